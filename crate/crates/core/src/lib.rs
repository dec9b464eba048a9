//! Room-layout jigsaw solving with a conditional diffusion model.
//!
//! Given a set of Manhattan room polygons (with door corners and room
//! types), the model estimates each room's 2D translation and 4-fold
//! rotation. The crate covers the whole pipeline: a procedural dataset
//! generator, a small reverse-mode tensor core, the diffusion algebra, the
//! structured-attention denoiser, losses, training, sampling, evaluation
//! metrics, a direct-regression baseline and SVG rendering.

pub mod baseline;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod keyed;
pub mod losses;
pub mod metrics;
pub mod training;
pub mod model;
pub mod numcore;
pub mod render;

pub use error::{JigsawError, Result};
