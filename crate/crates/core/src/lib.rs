//! Graph matching by ensembles of differentiable quadratic-assignment solvers.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: synthetic geometric graphs (generation, perturbation, k-NN topology)
//! - [`affinity`]: sparse pairwise/unary affinity matrices and their matrix-vector product
//! - [`solvers`]: classical relaxation solvers (proximal, graduated-assignment, spectral)
//!   and the Sinkhorn normalisation they share
//! - [`assign`]: Hungarian rounding, matching accuracy, graph similarity
//! - [`tape`]: reverse-mode autodiff over the tensor operations the network needs
//! - [`net`]: the ensemble matching network, its variants and checkpoint format
//! - [`train`]: cross-entropy loss, Adam, and the training loop
//! - [`harness`]: evaluation, robustness sweeps, ablations, diagnostics

pub mod affinity;
pub mod assign;
pub mod error;
pub mod graph;
pub mod harness;
pub mod net;
pub mod solvers;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
