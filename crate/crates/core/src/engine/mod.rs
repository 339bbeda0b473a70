//! Training, evaluation, test-time adaptation, experiments and reports.

pub mod config;
pub mod experiment;
pub mod report;
pub mod stats;
pub mod train;
pub mod ttda;

pub use config::{CheckpointMeta, ExperimentConfig, TrainConfig, TtdaConfig, CONFIG_VERSION};
pub use report::{emit_report, format_table, RunFragment, RunReport};
pub use stats::{paired_t_test, TTest};
pub use train::{evaluate, train_supervised, EvalResult, MaskPredictor, TrainOutcome};
pub use ttda::{prepare_for_ttda, run_ttda, TtdaReport, TtdaSample};
