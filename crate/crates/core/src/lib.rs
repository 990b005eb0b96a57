//! Refined contrastive ERM for domain generalization, with an ERM baseline,
//! the no-gate ablation, a synthetic multi-domain dataset and model
//! selection.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`autodiff::Tape`]).

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod queue;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
