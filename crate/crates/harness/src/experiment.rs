//! Config-driven runs shared by the CLI and the acceptance suite.

use crate::config::ExperimentConfig;
use crate::detector::Connection;
use crate::error::Result;
use crate::io::{Checkpoint, Manifest};
use crate::scene::{generate_dataset, Dataset};
use crate::train::{train, uniform_factor_set, TrainOutcome};

/// Stream ids separating the two splits drawn from one scene spec.
pub const TRAIN_STREAM: u64 = 0;
pub const TEST_STREAM: u64 = 1;

pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_dataset(&cfg.scene, cfg.dataset.train_images, TRAIN_STREAM)?,
        generate_dataset(&cfg.scene, cfg.dataset.test_images, TEST_STREAM)?,
    ))
}

pub fn run_seed(cfg: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let det = cfg.build_detector()?;
    train(
        &det,
        train_set,
        Some(test_set),
        &cfg.training,
        &cfg.loss,
        &cfg.evaluation,
        seed,
    )
}

/// The manifest's factor set is the one inference should use, so a
/// single-branch run that never saw an object records uniform factors.
pub fn checkpoint(cfg: &ExperimentConfig, outcome: &TrainOutcome, seed: u64) -> Result<Checkpoint> {
    let single_branch = cfg.build_detector()?.connection.kind == Connection::SingleBranch;
    let factor_set = match &outcome.factor_set {
        None if single_branch => Some(uniform_factor_set()),
        other => other.clone(),
    };
    Ok(Checkpoint {
        config: cfg.clone(),
        manifest: Manifest {
            config_hash: cfg.hash()?,
            seed,
            epoch: outcome.trajectory.len(),
            params: outcome.params.names().map(str::to_string).collect(),
            factor_set,
        },
        params: outcome.params.clone(),
    })
}
