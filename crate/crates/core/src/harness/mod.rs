//! Configuration, training, evaluation, prediction, checkpoints and the
//! strategy comparison.

mod checkpoint;
mod compare;
mod config;
mod gradsuite;
mod model;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use compare::{
    compare, lower_median, parse_strategy, selected_strategies, strategy_spec, Comparison, RunResult,
    COMPARE_CSV_HEADER,
};
pub use config::{apply_override, CompareConfig, DataConfig, DataSource, ExperimentConfig, Profile, TrainingConfig};
pub use gradsuite::{gradient_suite, GradCheckResult, DECODER_TOLERANCE, OP_TOLERANCE};
pub use model::{argmax, stack_images, SegmentationModel};
pub use train::{
    confusion_on, eval_views, evaluate, evaluate_model, log_csv, train, train_on, LogRecord, SampleCache, StopReason,
    TrainOutcome, LOG_HEADER,
};
