//! Cross-validation, error metrics and the before/after-filtering report.

mod experiment;
mod folds;
mod metrics;
mod plot;
mod report;

pub use experiment::{fold_path, run_experiment, ExperimentConfig, FoldResult};
pub use folds::{make_folds, make_grouped_folds, FoldSplit};
pub use metrics::{aggregate_folds, compute_metrics, FoldMetrics};
pub use plot::{emit_plot_data, plot_csv, plot_rows, render_svg, PlotRow};
pub use report::{CellStatus, ComparisonReport, FoldRow, Phase, ReportCell, PHASE_NOTE};
