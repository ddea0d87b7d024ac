//! Adversarially regularized variational recurrent neural network.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dynamic reverse-mode tape over `f64` tensors.
//! * [`nn`]: dense layers, GRU/LSTM cells, parameter stores, RMSProp, clipping
//!   and the `avrnn-ckpt v1` checkpoint format.
//! * [`distributions`]: diagonal Gaussians and factorized Bernoullis.
//! * [`vrnn`]: transition, proposal and emission networks, the unrolled
//!   inference pass, ELBO and reconstruction loss, generation.
//! * [`adversarial`]: the recurrent Wasserstein critic and its two training steps.
//! * [`training`]: the alternating training loop, evaluation, and an
//!   importance-weighted bound used as an oracle.
//! * [`data`]: synthetic sequence families, the Kalman oracle, the
//!   `seqdata v1` format and batching.

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod nn;
pub mod training;
pub mod vrnn;

pub use autodiff::{Tape, Tensor, Var};
