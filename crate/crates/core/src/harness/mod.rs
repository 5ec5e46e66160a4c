//! Training, target generation, evaluation and experiment orchestration
//! shared by the command-line tool and the integration tests.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod results;
pub mod targets;
pub mod train;

pub use config::{ExperimentConfig, Strategy, TrainSchedule};
pub use results::{werr, ResultRow, ResultsTable};
pub use train::{evaluate, train, KdTarget, Objective, TrainExample, TrainOutcome};
