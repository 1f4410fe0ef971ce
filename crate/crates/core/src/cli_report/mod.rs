//! Run configuration, the train/adapt/evaluate pipeline, reports and the
//! gradient-check suites behind the `metadapt` command.

pub mod config;
pub mod gradcheck;
pub mod pipeline;
pub mod report;

pub use config::{AdaptSection, AmSection, MetaSection, RunConfig};
pub use gradcheck::{
    run_gradcheck, GradCheckCase, GradCheckOutcome, GradTarget, GRADCHECK_EPSILON,
    GRADCHECK_TOLERANCE,
};
pub use pipeline::{chunk_plan, spliced_utterances, split_frames, train_am, train_meta_model};
pub use report::{
    evaluate_methods, render_table, EvalReport, MethodRow, MethodSpec, SpeakerMetrics, Summary,
    REPORT_VERSION,
};
