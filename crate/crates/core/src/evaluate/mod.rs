//! Parameter-recovery metrics, the Monte Carlo harness and baseline models.

mod baselines;
mod mc;
mod metrics;

pub use baselines::{
    compare_models, fit_ols, fit_var1, information_criteria, spatiotemporal_row, write_comparison, BaselineFit,
    ComparisonRow, Criteria,
};
pub use mc::{monte_carlo, write_records, write_table1, LambdaMode, McConfig, McRecord, McSummary, MAX_FAILURE_SHARE};
pub use metrics::{full_model_rmse, group_metrics, prediction_sse, GroupMetrics, Moments};
