//! Error rates, sweeps over the window/horizon grid, reports and timing.

mod grid;
mod metrics;
mod report;
mod scores;
mod sweep;
mod timing;

pub use grid::{ReductionStats, RowReduction, SweepDefinition, SweepGrid, ABSENT};
pub use metrics::{compute_eer, compute_far_frr, mean, reduction_percentage, EerPoint, EerSummary, ScoreSet};
pub use report::{emit_report, read_summary, Report, Summary, TOOL_VERSION};
pub use scores::{read_scores, score_sets_by_user, write_scores, ScoreRow};
pub use sweep::{
    run_cell, run_overlap_sweep, run_sweep, CellRecord, OverlapSeries, SweepOptions, SweepOutcome, UserSummary,
};
pub use timing::{timing_benchmark, LatencyStats, MIN_REPETITIONS};
