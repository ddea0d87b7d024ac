//! Neural building blocks: parameter stores, dense layers, recurrent cells,
//! RMSProp, weight clipping and checkpoints.

mod checkpoint;
mod layers;
mod optim;
mod params;
mod rnn;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor, MAGIC as CHECKPOINT_MAGIC};
pub use layers::{Activation, DenseLayer, Mlp};
pub use optim::{clip_params, rmsprop_step, RmsProp};
pub use params::{Binding, Param, ParamGrads, ParamId, ParamKind, ParameterStore, Tag, TagSet};
pub use rnn::{CellKind, GruCell, LstmCell};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{what}: expected width {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch sizes differ: {lhs} vs {rhs}")]
    Batch { lhs: usize, rhs: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("invalid parameter name {0:?}")]
    InvalidName(String),
    #[error("no gradient for parameter {0:?}")]
    MissingGradient(String),
    #[error("gradient for {name:?} has shape {got:?}, expected {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Optimizer(String),
}
