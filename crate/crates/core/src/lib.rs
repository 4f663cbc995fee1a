//! Latent-space surrogate for spatiotemporal ignition fields: a
//! convolutional autoencoder, a parameter-conditioned neural ODE over the
//! latent state trained with a horizon curriculum, trajectory metrics,
//! an ignition classifier and a sampling campaign over the uncertain inputs.

pub mod autograd;
pub mod classifier;
pub mod compressor;
pub mod container;
pub mod contour;
pub mod curriculum;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod uncertainty;
pub mod uq;

pub use error::{Error, Result};
