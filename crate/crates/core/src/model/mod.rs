//! Token layout of houses and the per-corner transformer.

mod denoiser;
mod sample;
mod trained;

pub use denoiser::{sinusoidal, Denoiser, DenoiserConfig, LayerKind, Trace};
pub use sample::{Batch, RotationMode, Sample, COND_DIM};
pub use trained::{ModelKind, TrainedModel};
