//! Coordinate-wise two-layer LSTM meta-learner.
//!
//! Every model weight is an independent sample: a shared first LSTM layer
//! reads `[θ or position, pre(L), pre(g)]`, and a second layer emits a
//! forget gate `f` and an input gate `i` that update the weight as the
//! cell state, `θ' = f θ − i g`.

pub mod batch;
pub mod cell;
pub mod io;
pub mod params;
pub mod preprocess;

pub use batch::{
    adapt_step_all, adapt_step_raw, unroll, unroll_backward, MetaState, StepTrace, Unroll,
};
pub use cell::{coordinate_update, gate_step, lstm_layer1_step, CoordinateState};
pub use io::{load_meta, save_meta};
pub use params::{init_meta_params, InputVariant, MetaLayout, MetaParams};
pub use preprocess::{
    build_input, preprocess, CoordPosition, CoordinateInput, PreprocessConfig, ThresholdRule,
};
