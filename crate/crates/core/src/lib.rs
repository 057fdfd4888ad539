//! Lipschitz-bounded residual (LDLT-R) and feedforward (LDLT-L) networks.
//!
//! Weights are produced from unconstrained raw parameters by closed-form
//! Cholesky-based maps so that the block LDL^T pivots of the Lipschitz LMI
//! are positive semidefinite by construction. The [`lmi`] module rebuilds
//! that LMI from materialized weights and checks it independently.

pub mod activation;
pub mod autodiff;
pub mod backend;
pub mod error;
mod fsutil;
pub mod linalg;
pub mod lmi;
pub mod network;
pub mod par;
pub mod param;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
