//! Off-policy policy-gradient objectives for tabular autoregressive policies.
//!
//! The crate pairs a set of surrogate objectives (GRPO, GSPO, CISPO, M2PO,
//! MinPRO and two prefix-ratio variants) with an exact enumeration oracle that
//! computes true gradients on small problems, plus a staleness-controlled
//! training loop over synthetic verifiable-reward tasks.

pub mod advantage;
pub mod config;
pub mod envs;
pub mod error;
pub mod io;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod ratios;
pub mod seed;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
