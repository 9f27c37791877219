//! SAIGFormer: spatially-adaptive illumination-guided low-light image
//! enhancement, built on a self-contained differentiable tensor engine.
//!
//! The crate follows the stages of the model: the [`tensor`] engine and
//! [`sat`] summed-area tables underpin the [`sai2e`] illumination estimator,
//! whose output guides the attention in [`blocks`]; [`network`] assembles
//! the U-shaped model and its checkpoints, [`train`] fits it, and [`cli`]
//! exposes everything as the `saig` binary. [`gradcheck`] holds the
//! finite-difference verification harness behind `saig gradcheck`.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod gradcheck;
pub mod imageio;
pub mod network;
pub mod nn;
pub mod sai2e;
pub mod sat;
pub mod tensor;
pub mod train;

pub use tensor::{Elem, GradStore, Shape, Tensor, TensorError};
