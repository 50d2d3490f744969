//! Desk-scale detection harness for renormalized connections: synthetic
//! scale-preferred scenes, a toy multi-branch detector, training, COCO-style
//! evaluation and the interference and gradient-path analyses.

pub mod analysis;
pub mod config;
pub mod decode;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod params;
pub mod scene;
pub mod targets;
pub mod train;

pub use config::ExperimentConfig;
pub use detector::{Connection, ConnectionSetup, DetectorConfig, GradRoute, ToyDetector};
pub use error::{HarnessError, Result};
pub use scene::{Dataset, Scene, SceneMode, SceneSpec};
