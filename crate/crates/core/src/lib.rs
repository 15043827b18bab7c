//! Closed-loop tuning of economic MPC for a heat-pump-heated house, and
//! comparison of electricity contracts by their tuned monthly bill.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod billing;
pub mod building;
pub mod comfort;
pub mod config_opt;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod harness;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod report;
pub mod sysid;

pub use error::{Error, Result};
