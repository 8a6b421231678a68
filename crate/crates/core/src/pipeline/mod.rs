//! Training, inference, evaluation and cross-validation drivers.

pub mod config;
pub mod crossval;
pub mod evaluate;
pub mod infer;
pub mod prepare;
pub mod schedule;
pub mod train;

pub use config::TrainConfig;
pub use crossval::{crossval, run_fold, CrossvalOutcome, FoldResult, Table};
pub use evaluate::{evaluate_dirs, evaluate_sets, read_report, write_report, Evaluation, ReportRow, RowKind};
pub use infer::{infer_dir, infer_image, predict_image, Inference};
pub use prepare::{prepare, Prepared};
pub use schedule::{LrSchedule, SchedulerKind};
pub use train::{train_fold, RunRecord, StepOutcome, Trainer};
