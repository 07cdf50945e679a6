//! Conditional velocity-field network with maskable sublayers, flow-matching
//! training, and the Euler sampler mapping noise z_0 to the denoised latent
//! z_N.

pub mod backward;
pub mod forward;
pub mod loss;
pub mod math;
pub mod params;
pub mod sampler;
pub mod spec;
pub mod train;

pub use forward::{velocity, velocity_forward};
pub use params::{build_model, Parameters};
pub use sampler::{euler_sample, euler_trajectory, BackpropMode};
pub use spec::ModelSpec;
pub use train::{train_base, TrainConfig, TrainLog};
