//! Learned speaker adaptation for a feed-forward frame classifier.
//!
//! A coordinate-wise LSTM meta-learner proposes an update for every weight
//! of the classifier from a few seconds of speaker data. The crate also
//! provides the SGD-on-all-weights, LHUC and linear-transform baselines, a
//! synthetic multi-speaker corpus, and the evaluation/report tooling used
//! by the `metadapt` command-line tool.

pub mod adaptation;
pub(crate) mod binio;
pub mod cli_report;
pub mod error;
pub mod meta_learner;
pub mod meta_training;
pub mod nn_core;
pub mod speaker_sim;

pub use binio::round_to_f32;
pub use error::{Error, Result};
