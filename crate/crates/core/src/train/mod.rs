//! Sequential training over a task stream, evaluation, and result summaries.

mod eer;
mod report;
mod run;

pub use eer::{eer, eer_point, EerPoint, ScoreSet};
pub use report::{aggregate, mean_std, RunReport, SummaryRow};
pub use run::{evaluate, run_sequential, train_and_report, NoObserver, RunConfig, RunObserver};
