//! Core numerics for probabilistic LWIR emissivity retrieval: the radiance forward model,
//! cube statistics and whitening, synthetic scene generation, and distribution-based
//! material matching.

pub mod cube;
pub mod distribution;
pub mod error;
pub mod matching;
pub mod rng;
pub mod spectra;
pub mod synth;

pub use cube::{
    fit_whitening, flatten, sample_pixel_sets, whiten, HsiCube, PixelSet, WhiteningModel,
};
pub use distribution::{EmissivityDistribution, Moments, Space};
pub use error::{Error, Result};
pub use spectra::{
    denormalize, normalize, planck_radiance, propagate, softclamp, target_radiance,
    AtmosphereParams, EmissivitySpectrum, NormalizedEmissivity, RadianceSpectrum, WavelengthGrid,
};
