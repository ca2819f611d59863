//! Training, evaluation, cross-validation, grid search and ablations.

mod ablation;
mod cv;
mod grid;
mod metrics;
mod train;

pub use self::ablation::{baseline_config, fusion_ablation, run_study, study_table, AblationRow, Study};
pub use self::cv::{evaluate, run_cross_validation, run_fold, run_folds, CvResult, Evaluation, FoldResult};
pub use self::grid::{default_grid, grid_search, grid_table, parse_grid_table, select_best, GridCell, GridResult};
pub use self::metrics::{pairwise_angles, AngleReport, ClassMetrics, ConfusionMatrix, MetricsReport, RouterSummary};
pub use self::train::{accuracy, train, EpochRecord, TrainConfig, TrainOutcome};
