//! Commands behind the `renorm` binary: generate scenes, train and evaluate
//! toy detectors, and inspect connection strengths.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use renorm_core::algebra::{factors_from_strengths, strengths_from_factors};
use renorm_core::{Factors, Strengths};
use renorm_harness::analysis::{grad_decomposition_check, interference_metric, predict};
use renorm_harness::detector::STRIDES;
use renorm_harness::eval::evaluate_ap;
use renorm_harness::experiment::{checkpoint, generate_splits, run_seed, TEST_STREAM};
use renorm_harness::io::{
    ap_report_csv, decomposition_csv, interference_csv, load_checkpoint, load_dataset, load_detections, pgm_bytes,
    save_checkpoint, save_dataset, save_detections, trajectory_csv,
};
use renorm_harness::scene::generate_dataset;
use renorm_harness::{Dataset, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(
    name = "renorm",
    version,
    about = "Renormalized-connection experiments on a toy detector"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train and test splits described by a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector per seed; writes a checkpoint and trajectory CSV each.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train this seed only instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory written by `generate`; regenerated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP of a checkpoint, or of injected detections, on a dataset.
    Eval {
        #[command(flatten)]
        target: Target,
        /// JSON detections (one list per image) to score instead of running the model.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Saliency maps, interference per image and the gradient-path split.
    Analyze {
        #[command(flatten)]
        target: Target,
        /// Images to export saliency maps for.
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Map amplification factors to connection strengths or back.
    DeriveStrengths {
        #[arg(
            long,
            value_delimiter = ',',
            allow_negative_numbers = true,
            conflicts_with = "strengths",
            required_unless_present = "strengths"
        )]
        factors: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        strengths: Option<Vec<f64>>,
    },
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (one split); defaults to regenerating the test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides the config's test-split seed when regenerating.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl Cli {
    /// Parses `args` (program name first) and runs the command.
    pub fn run_args<I, T>(args: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        Cli::try_parse_from(args)?.run()
    }

    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Generate { config, seed, out } => generate(&config, seed, &out),
            Command::Train {
                config,
                seed,
                data,
                out,
            } => train(&config, seed, data.as_deref(), out),
            Command::Eval { target, detections } => eval(&target, detections.as_deref()),
            Command::Analyze { target, images } => analyze(&target, images),
            Command::DeriveStrengths { factors, strengths } => derive_strengths(factors, strengths),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    let (train, test) = generate_splits(&cfg)?;
    save_dataset(&out.join("train"), &cfg.scene, &train)?;
    save_dataset(&out.join("test"), &cfg.scene, &test)?;
    println!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, data: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let (train_set, test_set) = match data {
        Some(dir) => (load_split(&dir.join("train"))?, load_split(&dir.join("test"))?),
        None => generate_splits(&cfg)?,
    };
    let out = out.unwrap_or_else(|| cfg.outputs.directory.clone());
    for &s in &cfg.seeds {
        let outcome = run_seed(&cfg, &train_set, &test_set, s)?;
        let dir = out.join(format!("seed-{s}"));
        save_checkpoint(&dir.join("checkpoint"), &checkpoint(&cfg, &outcome, s)?)?;
        write(&dir.join("trajectory.csv"), trajectory_csv(&outcome.trajectory)?)?;
        let last = outcome
            .trajectory
            .last()
            .and_then(|r| r.evaluation.as_ref())
            .and_then(|e| e.ap50);
        match last {
            Some(ap) => println!("seed {s}: {} epochs, final ap50 {ap:.4}", outcome.trajectory.len()),
            None => println!("seed {s}: {} epochs", outcome.trajectory.len()),
        }
    }
    Ok(())
}

fn load_split(dir: &Path) -> Result<Dataset> {
    Ok(load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))?
        .1)
}

fn target_data(t: &Target, cfg: &ExperimentConfig) -> Result<Dataset> {
    match &t.data {
        Some(dir) => load_split(dir),
        None => {
            let mut scene = cfg.scene.clone();
            if let Some(s) = t.seed {
                scene.seed = s;
            }
            Ok(generate_dataset(&scene, cfg.dataset.test_images, TEST_STREAM)?)
        }
    }
}

fn eval(t: &Target, injected: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(&t.checkpoint)?;
    let data = target_data(t, &ckpt.config)?;
    fs::create_dir_all(&t.out)?;
    let detections = match injected {
        Some(path) => load_detections(path)?,
        None => {
            let det = ckpt.config.build_detector()?;
            let dets = data
                .scenes
                .iter()
                .map(|s| {
                    predict(
                        &det,
                        &ckpt.params,
                        ckpt.manifest.factor_set.as_ref(),
                        &s.image,
                        &ckpt.config.evaluation,
                    )
                    .map(|p| p.detections)
                })
                .collect::<Result<Vec<_>, _>>()?;
            save_detections(&t.out.join("detections.json"), &dets)?;
            dets
        }
    };
    let report = evaluate_ap(&detections, &data.annotations(), 0.5)?;
    let text = ap_report_csv(&report)?;
    write(&t.out.join("ap_report.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn analyze(t: &Target, images: usize) -> Result<()> {
    let ckpt = load_checkpoint(&t.checkpoint)?;
    let cfg = &ckpt.config;
    let det = cfg.build_detector()?;
    let data = target_data(t, cfg)?;
    let maps = t.out.join("saliency");
    fs::create_dir_all(&maps)?;

    let mut rows = Vec::with_capacity(data.len());
    for (i, scene) in data.scenes.iter().enumerate() {
        let p = predict(
            &det,
            &ckpt.params,
            ckpt.manifest.factor_set.as_ref(),
            &scene.image,
            &cfg.evaluation,
        )?;
        rows.push(interference_metric(
            &p.saliency,
            &scene.annotations,
            &STRIDES,
            &cfg.detector.scale_thresholds,
        )?);
        if i < images {
            for (l, m) in p.saliency.iter().enumerate() {
                write(&maps.join(format!("img{i:05}_P{}.pgm", l + 3)), pgm_bytes(m)?)?;
            }
        }
    }
    write(&t.out.join("interference.csv"), interference_csv(&rows, &STRIDES)?)?;
    let n = rows.len().max(1) as f64;
    for (l, _) in STRIDES.iter().enumerate() {
        println!(
            "P{} interference {:.6}",
            l + 3,
            rows.iter().map(|r| r[l]).sum::<f64>() / n
        );
    }

    if det.connection.has_basis_paths() {
        let batch = &data.scenes[..data.len().min(cfg.training.batch_size)];
        let r = grad_decomposition_check(&det, &ckpt.params, batch, &cfg.loss)?;
        write(&t.out.join("decomposition.csv"), decomposition_csv(&r)?)?;
        println!(
            "decomposition of {}: max residual {:.3e}",
            r.parameter, r.max_abs_residual
        );
        println!(
            "  |full| {:.6e}  |original| {:.6e}  |renormalized| {:.6e}",
            r.full.norm(),
            r.original.norm(),
            r.renormalized.norm()
        );
        match r.norm_ratio {
            Some(q) => println!("  |full| / |baseline| {q:.6}"),
            None => println!("  baseline gradient vanishes"),
        }
    } else {
        println!("decomposition skipped: connection has no basis paths");
    }
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn derive_strengths(factors: Option<Vec<f64>>, strengths: Option<Vec<f64>>) -> Result<()> {
    match (factors, strengths) {
        (Some(f), _) => {
            let c = strengths_from_factors(&Factors(f.clone()))?;
            println!("factors   {}", join(&f));
            println!("strengths {}", join(c.values()));
            println!("factors   {} (round trip)", join(factors_from_strengths(&c).values()));
        }
        (None, Some(c)) => {
            if c.is_empty() {
                bail!("--strengths needs at least one value");
            }
            let f = factors_from_strengths(&Strengths(c.clone()));
            println!("strengths {}", join(&c));
            println!("factors   {}", join(f.values()));
            println!("strengths {} (round trip)", join(strengths_from_factors(&f)?.values()));
        }
        (None, None) => bail!("pass --factors or --strengths"),
    }
    Ok(())
}
