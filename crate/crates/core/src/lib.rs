//! Federated black-box prompt tuning with CMA-ES.
//!
//! Clients tune a low-dimensional vector `z` that a seeded random projection
//! maps to a continuous prompt for a frozen model. The model is only reachable
//! through an [`oracle::Oracle`]. The server treats the uploaded client means as
//! a sampled population and runs its own CMA-ES step with a step length
//! reconstructed from the clients' local step lengths.

pub mod client;
pub mod cma;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod seed;
pub mod server;
pub mod subspace;

pub use error::{Error, Result};
