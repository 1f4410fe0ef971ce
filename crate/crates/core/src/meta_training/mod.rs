//! Training the meta-learner on adapt-on-chunk-c / evaluate-on-chunk-c+1
//! pairs, with Adam and per-epoch validation selection.

pub mod adam;
pub mod chunks;
pub mod loss;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use chunks::{make_chunks, pseudo_label_chunks, Chunk, ChunkPair, ChunkPlan, TargetRegime};
pub use loss::{meta_gradient, meta_loss, pair_loss, MetaGradient};
pub use train::{train_meta, train_meta_with, MetaEpochLog, MetaTrainConfig, MetaTrainOutcome};
