//! Ranking metric, evaluation reports, the expert-count sweep and gate
//! weight export.

mod gates;
mod metrics;
mod report;
mod sweep;

pub use gates::{export_gate_weights, GateMatrix, GateRow};
pub use metrics::auc;
pub use report::{evaluate, score_dataset, EvalReport, TaskScore, SCORE_BATCH};
pub use sweep::{sensitivity_sweep, sweep_csv, sweep_model_config, write_sweep_csv, SweepBase, SweepRow};
