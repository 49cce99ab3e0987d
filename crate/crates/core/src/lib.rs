//! Discrete Boolean world models: environments, offline datasets, the
//! encoder/predictor architectures, the regularized objective and its
//! baselines, training loops and probe-based evaluation.

pub mod config;
pub mod datasets;
pub mod envs;
pub mod experiments;
pub mod error;
pub mod losses;
pub mod model;
pub mod probes;
pub mod seeding;
pub mod trainer;

pub use error::{CoreError, Result};
