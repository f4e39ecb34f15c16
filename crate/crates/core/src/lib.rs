//! Longitudinal latent-variable generative modelling: a per-frame encoder and
//! decoder tied together by a chain of invertible autoregressive flows acting
//! on the latent trajectory.

pub mod autodiff;
pub mod data;
mod error;
pub mod flow;
pub mod inference;
pub mod model;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
