//! Autoregressive flows: MADE networks, gated IAF blocks and chains of
//! per-timestep transitions.

mod chain;
mod iaf;
mod made;

pub use chain::{chain_log_prior, chain_log_prior_arrays, FlowChain, FlowConfig, LatentTrajectory, Trajectory};
pub use iaf::{iaf_forward, iaf_inverse, inject_logdet_sign_fault, IafBlock, GATE_FLOOR};
pub use made::{MadeConfig, MadeNet};
