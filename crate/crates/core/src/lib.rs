//! Product-of-Gaussian-mixture diffusion prior on shearlet responses and
//! joint reconstruction of images and coil sensitivities from undersampled
//! parallel MRI data.

pub mod coil_prior;
pub mod dataset;
pub mod error;
pub mod fft;
pub mod gmm;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod mri;
pub mod phantom;
pub mod prior;
pub mod sampler;
pub mod shearlet;
pub mod simplex;
pub mod training;

pub use error::{Error, Result};
