//! File-level workflows: each job reads its inputs, runs the engine, and
//! writes every artifact plus the fully resolved configuration. Results are
//! computed in full before anything is written, and each file is written to
//! a temporary name and renamed into place, so a failed job never leaves a
//! truncated file.

mod gradcheck;
mod jobs;

pub use gradcheck::{gradient_audit, seeded_network, GradcheckReport, ParamSampling, FD_STEP, GRADCHECK_TOLERANCE};
pub use jobs::{
    pair_grid, run_generate, run_invert, run_metrics, run_train, sibling, GenerateJob, InvertJob, InvertSummary,
    MetricsSummary, TrainJob, TrainSummary, PAIRS_PER_ROW,
};
