//! On-disk formats: datasets, checkpoints, trajectories, detections and
//! saliency images.
//!
//! ```text
//! dataset/annotations.json    scene spec + per-image annotation index
//! dataset/images/00000.bin    one tensor record per image
//! checkpoint/params.bin       tensor records in manifest order
//! checkpoint/manifest.json    config hash, epoch, parameter names, factor set
//! checkpoint/config.toml      the experiment config that produced it
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use renorm_core::kdn::{BBox, FactorSet, ObjectAnnotation};
use renorm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::analysis::DecompositionReport;
use crate::config::ExperimentConfig;
use crate::decode::Detection;
use crate::error::{HarnessError, Result};
use crate::eval::ApReport;
use crate::params::ParamStore;
use crate::scene::{Dataset, Scene, SceneSpec};
use crate::train::EpochRecord;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    scene: SceneSpec,
    images: Vec<ImageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    file: String,
    annotations: Vec<ObjectAnnotation>,
    distractors: Vec<BBox>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

pub fn save_dataset(dir: &Path, spec: &SceneSpec, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut images = Vec::with_capacity(data.len());
    for (i, scene) in data.scenes.iter().enumerate() {
        let file = format!("images/{i:05}.bin");
        let mut out = BufWriter::new(File::create(dir.join(&file))?);
        scene.image.write_to(&format!("image{i:05}"), &mut out)?;
        out.flush()?;
        images.push(ImageEntry {
            file,
            annotations: scene.annotations.clone(),
            distractors: scene.distractors.clone(),
        });
    }
    write_json(
        &dir.join("annotations.json"),
        &DatasetIndex {
            scene: spec.clone(),
            images,
        },
    )
}

pub fn load_dataset(dir: &Path) -> Result<(SceneSpec, Dataset)> {
    let index: DatasetIndex = read_json(&dir.join("annotations.json"))?;
    let mut scenes = Vec::with_capacity(index.images.len());
    for entry in index.images {
        let mut input = BufReader::new(File::open(dir.join(&entry.file))?);
        let (_, image) = Tensor::read_from(&mut input)?;
        scenes.push(Scene {
            image,
            annotations: entry.annotations,
            distractors: entry.distractors,
        });
    }
    Ok((index.scene, Dataset { scenes }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<String>,
    pub factor_set: Option<FactorSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub manifest: Manifest,
    pub params: ParamStore,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join("params.bin"))?);
    for name in &ckpt.manifest.params {
        ckpt.params.get(name)?.write_to(name, &mut out)?;
    }
    out.flush()?;
    write_json(&dir.join("manifest.json"), &ckpt.manifest)?;
    ckpt.config.save(&dir.join("config.toml"))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    if config.hash()? != manifest.config_hash {
        return Err(HarnessError::Format(format!(
            "{}: config.toml does not match the manifest hash",
            dir.display()
        )));
    }
    let mut input = BufReader::new(File::open(dir.join("params.bin"))?);
    let mut params = ParamStore::new();
    for expected in &manifest.params {
        let (name, t) = Tensor::read_from(&mut input)?;
        if &name != expected {
            return Err(HarnessError::Format(format!(
                "params.bin: expected `{expected}`, found `{name}`"
            )));
        }
        params.insert(name, t);
    }
    Ok(Checkpoint {
        config,
        manifest,
        params,
    })
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    epoch: usize,
    lr: f64,
    loss: f64,
    loss_cls: f64,
    loss_box: f64,
    ap50: Option<f64>,
    ap_small: Option<f64>,
    ap_medium: Option<f64>,
    ap_large: Option<f64>,
    interference_p3: Option<f64>,
    interference_p4: Option<f64>,
    interference_p5: Option<f64>,
    interference_p6: Option<f64>,
}

pub const TRAJECTORY_HEADER: &str = "epoch,lr,loss,loss_cls,loss_box,ap50,ap_small,ap_medium,ap_large,\
interference_p3,interference_p4,interference_p5,interference_p6";

/// CSV text of a trajectory; the header is written even when it is empty.
pub fn trajectory_csv(records: &[EpochRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        let e = r.evaluation.as_ref();
        let interf = |l: usize| e.and_then(|e| e.interference.get(l).copied());
        w.serialize(TrajectoryRow {
            epoch: r.epoch,
            lr: r.lr,
            loss: r.loss,
            loss_cls: r.loss_cls,
            loss_box: r.loss_box,
            ap50: e.and_then(|e| e.ap50),
            ap_small: e.and_then(|e| e.ap_small),
            ap_medium: e.and_then(|e| e.ap_medium),
            ap_large: e.and_then(|e| e.ap_large),
            interference_p3: interf(0),
            interference_p4: interf(1),
            interference_p5: interf(2),
            interference_p6: interf(3),
        })?;
    }
    let body = w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))?;
    let mut text = format!("{TRAJECTORY_HEADER}\n");
    text.push_str(&String::from_utf8(body).map_err(|e| HarnessError::Format(e.to_string()))?);
    Ok(text)
}

fn csv_text<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))?;
    String::from_utf8(body).map_err(|e| HarnessError::Format(e.to_string()))
}

/// One-row CSV with a header; absent APs are empty fields.
pub fn ap_report_csv(report: &ApReport) -> Result<String> {
    csv_text(&[report])
}

/// `image,level,stride,interference` rows.
pub fn interference_csv(per_image: &[Vec<f64>], strides: &[usize]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        image: usize,
        level: String,
        stride: usize,
        interference: f64,
    }
    let rows: Vec<Row> = per_image
        .iter()
        .enumerate()
        .flat_map(|(image, v)| {
            v.iter()
                .zip(strides)
                .enumerate()
                .map(move |(l, (&interference, &stride))| Row {
                    image,
                    level: format!("P{}", l + 3),
                    stride,
                    interference,
                })
        })
        .collect();
    if rows.is_empty() {
        return Ok("image,level,stride,interference\n".into());
    }
    csv_text(&rows)
}

/// Per-element `index,full,original,renormalized,residual` rows.
pub fn decomposition_csv(report: &DecompositionReport) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        index: usize,
        full: f64,
        original: f64,
        renormalized: f64,
        residual: f64,
    }
    let rows: Vec<Row> = report
        .full
        .data()
        .iter()
        .zip(report.original.data())
        .zip(report.renormalized.data())
        .enumerate()
        .map(|(index, ((&full, &original), &renormalized))| Row {
            index,
            full,
            original,
            renormalized,
            residual: full - (original + renormalized),
        })
        .collect();
    csv_text(&rows)
}

pub fn save_detections(path: &Path, detections: &[Vec<Detection>]) -> Result<()> {
    write_json(path, &detections)
}

pub fn load_detections(path: &Path) -> Result<Vec<Vec<Detection>>> {
    read_json(path)
}

/// 8-bit binary PGM of a `1×H×W` map with values in `[0, 1]`.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.spatial()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EvalSummary;

    #[test]
    fn pgm_layout() {
        let t = Tensor::new(&[1, 2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2]).unwrap();
        let b = pgm_bytes(&t).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 255, 255, 0, 51]);
    }

    #[test]
    fn ap_report_row() {
        let r = ApReport {
            ap50: Some(1.0),
            ap_small: Some(1.0),
            ap_medium: None,
            ap_large: None,
            num_gt: 3,
            num_detections: 3,
        };
        assert_eq!(
            ap_report_csv(&r).unwrap(),
            "ap50,ap_small,ap_medium,ap_large,num_gt,num_detections\n1.0,1.0,,,3,3\n"
        );
    }

    #[test]
    fn interference_rows() {
        let text = interference_csv(&[vec![0.5, 0.25]], &[4, 8]).unwrap();
        assert_eq!(text, "image,level,stride,interference\n0,P3,4,0.5\n0,P4,8,0.25\n");
        assert_eq!(
            interference_csv(&[], &[4]).unwrap(),
            "image,level,stride,interference\n"
        );
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        assert_eq!(trajectory_csv(&[]).unwrap(), format!("{TRAJECTORY_HEADER}\n"));
    }

    #[test]
    fn trajectory_rows() {
        let rec = |epoch, evaluation| EpochRecord {
            epoch,
            lr: 0.01,
            loss: 1.5,
            loss_cls: 1.0,
            loss_box: 0.5,
            evaluation,
        };
        let eval = EvalSummary {
            ap50: Some(0.25),
            ap_small: Some(0.25),
            ap_medium: None,
            ap_large: None,
            interference: vec![0.5, 0.1, 0.2, 0.3],
        };
        let text = trajectory_csv(&[rec(1, None), rec(2, Some(eval))]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "1,0.01,1.5,1.0,0.5,,,,,,,,");
        assert_eq!(lines[2], "2,0.01,1.5,1.0,0.5,0.25,0.25,,,0.5,0.1,0.2,0.3");
        let header_cols = TRAJECTORY_HEADER.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == header_cols));
    }
}
