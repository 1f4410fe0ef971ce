//! Dense numeric core and the feed-forward acoustic-model stand-in.

pub mod gradcheck;
pub mod io;
pub mod matrix;
pub mod model;
pub mod net;
pub mod train;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::Matrix;
pub use model::{Activation, Block, BlockKind, FrameBatch, ModelSpec, ParameterVector, Position};
pub use net::{
    argmax_rows, backward, backward_with_overlay, batch_loss, cross_entropy_loss, forward,
    forward_with_overlay, logistic, predict_labels, HiddenOverlay, OverlayGrad, POSTERIOR_FLOOR,
};
pub use train::{evaluate, train_si_model, AmEpochLog, AmTrainConfig, AmTrainOutcome};
