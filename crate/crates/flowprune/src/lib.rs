//! De-memorization of a conditional rectified-flow model by learnable-gate
//! pruning trained on neutral conditions only, with the measurement suite
//! used to validate it: reproduction rates, latent-magnitude shifts,
//! embedding-space decoupling, deactivation accounting, and a Gaussian
//! Fréchet quality proxy.

pub mod analysis;
pub mod checkpoint;
pub mod cond;
pub mod error;
pub mod figures;
pub mod flownet;
pub mod maskengine;
pub mod memoria;
pub mod optim;
pub mod pipeline;
pub mod pruner;

pub use cond::{Condition, Role};
pub use error::{Error, Result};
