//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every op applied to [`Var`] handles together with a
//! closure computing its vector-Jacobian product. [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients; values unreachable from the
//! loss never get a gradient. [`Tape::custom_node`] splices in hand-written
//! backward passes such as the rasterizer's.

mod adam;
pub mod check;
mod checkpoint;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use ops::{sigmoid, softmax_in_place, SparseRows};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
