//! Anti-aliasing CNN building blocks at desk scale.
//!
//! The crate bundles a small f64 tensor/autodiff engine together with the
//! layers, training loop, and evaluation harnesses needed to study shift
//! robustness of convolutional classifiers:
//!
//! * [`tensor`] — dense tensors, a define-by-run tape, and the primitive
//!   differentiable ops (convolution, dense, pooling, subsampling, loss).
//! * [`layers`] — depth-adaptive Gaussian blur pooling with a learnable,
//!   depth-monotone sigma, the bounded AA-ReLU activation, and the fixed
//!   binomial blur / clipped-ReLU baselines.
//! * [`net`] — declarative layer graphs, the anti-aliasing rewrite of
//!   down-sampling layers, a toy CNN factory, and binary checkpoints.
//! * [`data`] — MNIST/CIFAR-10 loaders, a deterministic synthetic digit
//!   set, normalization, stratified subsetting, and batching.
//! * [`transforms`] — shifts, bilinear resize/warp (differentiable),
//!   perturbation sequences, and noise corruption generators.
//! * [`train`] — SGD-with-momentum training with the sigma projection hook.
//! * [`eval`] — shift-consistency protocols, flip probability, corruption
//!   error.
//! * [`attacks`] — first-order, grid-search, and worst-of-k translation
//!   attacks.
//! * [`spectra`] — 2-D DFT feature analysis and kernel galleries.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod net;
pub mod rng;
pub mod spectra;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::{PadMode, Tensor};
