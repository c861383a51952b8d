//! Evaluation: average precision, flag rates, rank summaries and the
//! replicated benchmark runners.

mod bench;
mod metrics;
mod report;

pub use bench::{run_copula_benchmark, run_friedman_benchmark, CopulaBench, FriedmanBench};
pub use metrics::{auc_pr, average_ranks, flag_rate, pr_curve, PrCurve};
pub use report::{AggregateRow, BenchmarkReport, RankRow, RunRecord};
