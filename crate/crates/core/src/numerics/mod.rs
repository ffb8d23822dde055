//! Minimal dense-tensor kernel with reverse-mode differentiation, an AdamW
//! optimizer and a cosine learning-rate schedule. 32-bit floats throughout.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, check_gradients_at};
pub use graph::{concat, linear, stack_rows, Graph, Tensor};
pub use optim::{adamw_step, cosine_lr, OptimizerState};
pub use params::{seeded_rng, BoundParams, Init, ParamEntry, ParamStore};

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;
