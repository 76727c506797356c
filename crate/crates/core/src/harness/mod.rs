//! Training, evaluation and ablation runs over seeded synthetic scenes.

mod compare;
mod config;
mod model;
mod optim;
mod report;
mod train;

pub use compare::{
    cached_runner, check_comparable, compare, matrix_rows, parse_aligned_csv, CompareSpec, ComparisonRow, ComparisonTable,
    LabeledConfig, Matrix, MatrixRow,
};
pub use config::{LossClamps, SpaSources, Toggles, TrainConfig, SCHEMA_VERSION};
pub use model::{Forward, Model, Prediction, Sample};
pub use optim::AdamW;
pub use report::{load_results, loss_curves_csv, summary_csv, summary_text, write_report};
pub use train::{
    evaluate, mean_loss, run_experiment, run_on, train_step, Dataset, EpochLog, ExperimentResult, RunOptions,
    Trainer, PROBE_SCENES,
};
