//! Three-branch matrix compression toolkit.
//!
//! One compressed layer splits a full-precision weight matrix into three
//! additive branches:
//!
//! * a binarized matrix branch (1-bit weights, XNOR-popcount GEMM, scale
//!   compensation),
//! * a low-rank matrix branch (an SVD-initialized factor pair `B·A`),
//! * a sparse matrix branch (the largest-magnitude residual entries in
//!   coordinate format).
//!
//! The [`init`] module builds the three parameter sets from a pretrained
//! weight by a decoupling subtraction chain, [`layer`] assembles compressed
//! layers into a toy super-resolution model, [`train`] provides desk-scale
//! quantization-aware training against a full-precision teacher, [`account`]
//! computes parameter/operation costs and PSNR, and [`io`] defines the
//! bit-exact checkpoint and image formats used by the `tricomp` CLI.

pub mod account;
pub mod bitmat;
pub mod branches;
pub mod dense;
pub mod error;
pub mod init;
pub mod io;
pub mod layer;
pub mod train;

pub use error::{Error, Result};
