//! Linear-schedule Gaussian diffusion over per-corner pose states.
//!
//! A state is an `N x D` tensor: one row per corner, `D = 6` (position plus
//! signed rotation one-hot) or `D = 2` when rotations are given. Time steps
//! are 1-based; `t = 0` is clean data with `alpha_bar = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Rotation4};
use crate::numcore::Tensor;

/// Pixel coordinate that maps to 0 in the normalized frame.
pub const FRAME_CENTER: f64 = 128.0;
/// Pixels per normalized unit.
pub const POS_SCALE: f64 = 128.0;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

pub fn normalize_position(p: Point2) -> [f64; 2] {
    [(p.x - FRAME_CENTER) / POS_SCALE, (p.y - FRAME_CENTER) / POS_SCALE]
}

pub fn denormalize_position(v: [f64; 2]) -> Point2 {
    Point2::new(v[0] * POS_SCALE + FRAME_CENTER, v[1] * POS_SCALE + FRAME_CENTER)
}

/// One-hot of `k` mapped to `{-1, +1}`.
pub fn encode_rotation(k: Rotation4) -> [f64; 4] {
    let mut o = [-1.0; 4];
    o[k.index()] = 1.0;
    o
}

/// Index of the largest entry; ties go to the lowest index.
pub fn decode_rotation(o: &[f64]) -> Rotation4 {
    let mut best = 0;
    for (i, &v) in o.iter().enumerate().take(4) {
        if v > o[best] {
            best = i;
        }
    }
    Rotation4::wrapping(best as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(JigsawError::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(JigsawError::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The 1000-step reference schedule, with both endpoints multiplied by
    /// `1000 / steps` so shorter chains still end near pure noise.
    pub fn scaled(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(JigsawError::InvalidConfig("schedule needs at least one step".into()));
        }
        let f = DEFAULT_STEPS as f64 / steps as f64;
        NoiseSchedule::linear(steps, DEFAULT_BETA_START * f, (DEFAULT_BETA_END * f).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(JigsawError::InvalidConfig(format!(
                "time step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    /// `x_t = sqrt(ab) x0 + sqrt(1 - ab) noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar[self.check_t(t)?];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(noise, |x, n| a * x + b * n)
    }

    /// Inverse of [`q_sample`](Self::q_sample) given a noise estimate.
    pub fn estimate_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar[self.check_t(t)?];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
    }

    /// Coefficients `(c_x, c_eps)` with `x0_hat = c_x x_t + c_eps eps_hat`.
    pub fn x0_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar[self.check_t(t)?];
        Ok((1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt()))
    }

    /// One reverse step. `z` is ignored at `t = 1`; `None` means zero noise.
    pub fn p_step(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
        let i = self.check_t(t)?;
        let (a, ab) = (self.alpha[i], self.alpha_bar[i]);
        let c = (1.0 - a) / (1.0 - ab).sqrt();
        let inv = 1.0 / a.sqrt();
        let mut out = x_t.zip_map(eps_hat, |x, e| inv * (x - c * e))?;
        if let (Some(z), true) = (z, t > 1) {
            out.require_same_shape("p_step", z)?;
            let s = (1.0 - a).sqrt();
            for (o, zv) in out.data_mut().iter_mut().zip(z.data()) {
                *o += s * zv;
            }
        }
        Ok(out)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, cols, rng)
}
