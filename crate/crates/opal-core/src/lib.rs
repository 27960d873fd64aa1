//! Learning co-sparse analysis operators (image-prior filter banks) by
//! bi-level optimization, and applying them to image restoration.
//!
//! The prior is a sum of penalized filter responses over every pixel of the
//! image; restoration minimizes that prior plus a quadratic data term for a
//! task-specific linear operator. Training differentiates the restoration
//! loss through the minimizer itself: each parameter gradient costs one
//! linear solve with the restoration Hessian, done matrix-free.
//!
//! Modules:
//! - [`image`]: image container, boundary-exact convolution pair, metrics
//! - [`basis`]: zero-mean orthonormal DCT filter basis
//! - [`io`]: PGM/PNG grayscale IO
//! - [`penalty`]: sparsity penalties with exact derivatives
//! - [`solvers`]: L-BFGS (optionally bounded) and MINRES kernels
//! - [`energy`]: the analysis energy, data operators and the MAP solver
//! - [`bilevel`]: adjoint parameter gradients and the training loop
//! - [`restore`]: denoise / inpaint / deblur / super-resolve

pub mod basis;
pub mod bilevel;
pub mod energy;
pub mod error;
pub mod image;
pub mod io;
pub mod penalty;
pub mod restore;
pub mod solvers;

pub use error::{Error, Result};
