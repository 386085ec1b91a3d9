//! Operational surface: run configuration, training loops for both stages,
//! evaluation reports, the ablation matrix, gradient-check suites and the
//! command-line front end.

pub mod ablate;
pub mod checks;
pub mod cli;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use ablate::{ablate, AblationReport, Cell};
pub use config::{ModelConfig, RunConfig, Stage, StageConfig, Toggles, SEED_ENV};
pub use eval::{evaluate, write_outputs, Evaluation, MetricsReport};
pub use model::Model;
pub use train::{train_coarse, train_fine};
