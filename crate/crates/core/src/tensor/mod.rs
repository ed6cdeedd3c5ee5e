//! Reverse-mode automatic differentiation with double-backprop support,
//! a small layer library, Adam, and a binary checkpoint format.

mod adam;
mod array;
mod checkpoint;
mod nn;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::{ConvGeom, Tensor};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use nn::{Layer, NetSpec, Network};
pub use params::{init_params, ParamSet, INIT_STD};
pub use tape::{sigmoid, softplus, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NumericalFault { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("input does not participate in the output's graph")]
    Disconnected,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
