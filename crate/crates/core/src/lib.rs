//! Attention-refined class activation maps on a miniature dual-branch
//! CNN/transformer classifier.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`conformer`]: the dual-branch network and its parameters.
//! - [`cam`]: class activation maps, attention maps and their couplings,
//!   pseudo labels and multi-scale fusion.
//! - [`data`]: synthetic shapes dataset, loading and augmentation.
//! - [`train`]: loss, optimizer, training loop, metrics, sweeps, ablations.
//! - [`checkpoint`]: binary parameter snapshots.

pub mod autodiff;
pub mod cam;
pub mod checkpoint;
pub mod conformer;
pub mod data;
pub mod error;
mod kernels;
#[cfg(test)]
mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
