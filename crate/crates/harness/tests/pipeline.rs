//! Scenes, targets, training and persistence end to end on small inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use renorm_core::connections::{ConnectionSpec, IDENTITY_MATRIX};
use renorm_core::kdn::{BBox, ObjectAnnotation};
use renorm_harness::config::ExperimentConfig;
use renorm_harness::detector::STRIDES;
use renorm_harness::experiment::{checkpoint, generate_splits, run_seed};
use renorm_harness::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, trajectory_csv};
use renorm_harness::scene::{generate_dataset, generate_scene, SceneSpec};
use renorm_harness::targets::{assign_level, assign_targets};
use renorm_harness::train::{train, TrainConfig};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::example();
    cfg.scene.image_size = 64;
    cfg.scene.density = 3;
    cfg.dataset.train_images = 8;
    cfg.dataset.test_images = 4;
    cfg.training.epochs = 2;
    cfg.training.batch_size = 4;
    cfg.seeds = vec![3];
    cfg
}

#[test]
fn tiny_mode_objects_never_exceed_eight_pixels() {
    let spec = SceneSpec::tiny(17);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = 0;
    while seen < 10_000 {
        let scene = generate_scene(&spec, &mut rng).unwrap();
        for a in &scene.annotations {
            assert!(a.bbox.max_side() <= 8.0, "{:?}", a.bbox);
        }
        for d in &scene.distractors {
            assert!(d.max_side() > 8.0);
        }
        seen += scene.annotations.len();
    }
}

#[test]
fn splits_differ_and_regenerate() {
    let cfg = small_config();
    let (train_a, test_a) = generate_splits(&cfg).unwrap();
    let (train_b, _) = generate_splits(&cfg).unwrap();
    assert_eq!(train_a, train_b);
    assert_ne!(train_a.scenes[0].image, test_a.scenes[0].image);
}

fn grids(size: usize) -> Vec<(usize, usize)> {
    STRIDES.iter().map(|s| (size / s, size / s)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_object_is_positive_once_or_dropped(
        boxes in prop::collection::vec((0.0..90.0f64, 0.0..90.0f64, 1.0..80.0f64, 1.0..80.0f64), 0..12)
    ) {
        let anns: Vec<ObjectAnnotation> = boxes
            .iter()
            .map(|&(x, y, w, h)| ObjectAnnotation { bbox: BBox::new(x, y, w.min(96.0 - x), h.min(96.0 - y)), class_id: 0 })
            .collect();
        let thresholds = [16.0, 32.0, 64.0];
        let t = assign_targets(&anns, &STRIDES, &grids(96), &thresholds);
        prop_assert_eq!(t.positives() + t.dropped.len(), anns.len());

        let mut owner = vec![0usize; anns.len()];
        for (l, lt) in t.levels.iter().enumerate() {
            prop_assert_eq!(lt.cls.sum() as usize, lt.positives());
            for &i in &lt.objects {
                owner[i] += 1;
                prop_assert_eq!(assign_level(anns[i].bbox.max_side(), &thresholds), l);
            }
        }
        for &i in &t.dropped {
            owner[i] += 1;
        }
        prop_assert!(owner.iter().all(|&c| c == 1));
    }
}

#[test]
fn zero_epochs_gives_empty_trajectory() {
    let mut cfg = small_config();
    cfg.training.epochs = 0;
    let (tr, te) = generate_splits(&cfg).unwrap();
    let out = run_seed(&cfg, &tr, &te, 0).unwrap();
    assert!(out.trajectory.is_empty());
    assert_eq!(out.params, cfg.build_detector().unwrap().init_params(0));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small_config();
    cfg.training.epochs = 1;
    cfg.training.lr = 0.0;
    let (tr, te) = generate_splits(&cfg).unwrap();
    let out = run_seed(&cfg, &tr, &te, 5).unwrap();
    assert_eq!(out.params, cfg.build_detector().unwrap().init_params(5));
    assert_eq!(out.trajectory.len(), 1);
    assert!(out.trajectory[0].loss > 0.0);
}

#[test]
fn training_replays_exactly() {
    let cfg = small_config();
    let (tr, te) = generate_splits(&cfg).unwrap();
    let a = run_seed(&cfg, &tr, &te, 1).unwrap();
    let b = run_seed(&cfg, &tr, &te, 1).unwrap();
    assert_eq!(
        trajectory_csv(&a.trajectory).unwrap(),
        trajectory_csv(&b.trajectory).unwrap()
    );
    assert_eq!(a.params, b.params);
    let c = run_seed(&cfg, &tr, &te, 2).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn identity_complete_form_matches_baseline_bit_for_bit() {
    let base = small_config();
    let mut ident = base.clone();
    ident.connection = ConnectionSpec::complete(IDENTITY_MATRIX);
    let (tr, te) = generate_splits(&base).unwrap();
    let a = run_seed(&base, &tr, &te, 0).unwrap();
    let b = run_seed(&ident, &tr, &te, 0).unwrap();
    assert_eq!(
        trajectory_csv(&a.trajectory).unwrap(),
        trajectory_csv(&b.trajectory).unwrap()
    );
    assert_eq!(a.params, b.params);
}

#[test]
fn single_branch_training_yields_factor_set() {
    let mut cfg = small_config();
    cfg.connection.form = renorm_core::connections::ConnectionForm::SingleBranch;
    cfg.training.epochs = 1;
    let (tr, te) = generate_splits(&cfg).unwrap();
    let out = run_seed(&cfg, &tr, &te, 0).unwrap();
    let fs = out.factor_set.expect("objects were seen");
    let sum: f64 = fs.lambda_infer.values().iter().sum();
    assert!((sum - 3.0).abs() < 1e-9, "{sum}");
}

#[test]
fn diverging_run_reports_epoch() {
    let cfg = small_config();
    let det = cfg.build_detector().unwrap();
    let data = generate_dataset(&cfg.scene, 4, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e12,
        warmup_fraction: 0.0,
        epochs: 3,
        ..TrainConfig::default()
    };
    let err = train(&det, &data, None, &tc, &cfg.loss, &cfg.evaluation, 0).unwrap_err();
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn dataset_round_trip() {
    let cfg = small_config();
    let data = generate_dataset(&cfg.scene, 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &cfg.scene, &data).unwrap();
    let (spec, back) = load_dataset(dir.path()).unwrap();
    assert_eq!(spec, cfg.scene);
    assert_eq!(back, data);
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let mut cfg = small_config();
    cfg.training.epochs = 1;
    let (tr, te) = generate_splits(&cfg).unwrap();
    let out = run_seed(&cfg, &tr, &te, 0).unwrap();
    let ckpt = checkpoint(&cfg, &out, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ckpt).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);

    let mut other = cfg.clone();
    other.training.lr = 0.5;
    other.save(&dir.path().join("config.toml")).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}
