//! Configuration, training, evaluation, checkpoints, reports and plots.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod inspect;
pub mod plots;
pub mod report;
pub mod run;
pub mod train;

pub use ablate::{ablate, Variant};
pub use checkpoint::Checkpoint;
pub use config::{Mode, TrainConfig, TrainParams};
pub use eval::{evaluate, EvalReport};
pub use report::RunReport;
pub use train::Trainer;
