//! Tall-and-skinny QR and SVD on a local, disk-backed map/shuffle/reduce engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`] runs map/shuffle/reduce stages over record files with fault
//!   injection and exact byte counters.
//! * [`dense`] holds the serial kernels executed inside tasks.
//! * [`matrix`] stores row-keyed matrices as partitioned record files.
//! * [`drivers`] expresses Cholesky QR, indirect TSQR, direct TSQR (with its
//!   SVD and recursive forms) and Householder QR as stage pipelines.
//! * [`model`] evaluates the disk-bandwidth lower bound and reconciles it
//!   with engine counters.
//! * [`stability`] generates conditioned test matrices and measures
//!   orthogonality and residual errors.

pub mod dense;
pub mod drivers;
pub mod engine;
pub mod matrix;
pub mod model;
pub mod stability;

#[cfg(test)]
pub(crate) mod testutil;

pub use dense::{DenseMatrix, UpperTriangular};
pub use matrix::PartitionedMatrix;
