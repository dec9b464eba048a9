//! TransVector: the same transformer regressing the per-corner pose directly.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{combine, loss_match, rotation_cross_entropy, LossReport, Reconstruction};
use crate::model::{Batch, Denoiser, DenoiserConfig};
use crate::numcore::{Graph, Var};

/// Supervision of the rotation channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationLoss {
    /// Squared error against the signed one-hot, weighted like the position channels.
    #[default]
    Mse,
    CrossEntropy,
}

/// Removes the noisy-state and time inputs from `base`.
pub fn transvector_config(base: DenoiserConfig) -> DenoiserConfig {
    DenoiserConfig {
        state_embedding: false,
        time_embedding: false,
        ..base
    }
}

/// Per-corner pose prediction in the normalized state layout.
pub fn transvector_forward(net: &Denoiser, g: &mut Graph, batch: &Batch, dropout_rng: Option<&mut dyn RngCore>) -> Result<Var> {
    Ok(net.forward(g, batch, None, &[], dropout_rng)?.output)
}

/// Regression to the clean state plus the weighted door term on the
/// predicted poses themselves.
pub fn transvector_loss(g: &mut Graph, pred: Var, batch: &Batch, rotation_loss: RotationLoss, use_match: bool) -> Result<(Var, LossReport)> {
    let gt = batch.gt_state();
    let regression = match (rotation_loss, gt.cols()) {
        (RotationLoss::CrossEntropy, 6) => {
            let pos = g.slice_cols(pred, 0, 2)?;
            let l_pos = g.mse_to(pos, gt.slice_cols(0, 2))?;
            let labels: Vec<usize> = batch
                .samples
                .iter()
                .flat_map(|s| s.tokens.iter().map(move |&(j, _)| s.targets[j].rotation.index()))
                .collect();
            let l_rot = rotation_cross_entropy(g, pred, &labels)?;
            g.add(l_pos, l_rot)?
        }
        _ => g.mse_to(pred, gt)?,
    };
    let (lm, residuals) = loss_match(g, pred, &Reconstruction::direct(batch), batch)?;
    combine(g, regression, lm, use_match, residuals, batch.door_pairs.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};
    use crate::model::{RotationMode, Sample, TrainedModel};
    use crate::numcore::{grad_check, GradCheckOptions, ParamStore, Tensor};

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            mlp_hidden: 16,
            dropout: 0.0,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn parameter_count_drops_by_state_and_time_blocks() {
        let cfg = DenoiserConfig::default();
        let full = Denoiser::new(cfg.clone(), 0).unwrap();
        let tv = Denoiser::new(transvector_config(cfg.clone()), 0).unwrap();
        let d = cfg.d_model;
        let state = cfg.state_dim() * d + d;
        let time = 2 * (d * d + d);
        assert_eq!(full.num_parameters() - tv.num_parameters(), state + time);
    }

    #[test]
    fn output_shapes() {
        for mode in [RotationMode::Estimated, RotationMode::GtGiven] {
            let h = generate_house(1, &GeneratorConfig::with_rooms(3)).unwrap();
            let b = Batch::new(vec![Sample::canonical(&h, mode).unwrap()]).unwrap();
            let m = TrainedModel::transvector(DenoiserConfig { rotation_mode: mode, ..small() }, 0).unwrap();
            let mut g = Graph::new();
            let out = transvector_forward(&m.net, &mut g, &b, None).unwrap();
            assert_eq!(g.value(out).shape(), &[b.num_tokens(), mode.state_dim()]);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let h = generate_house(2, &GeneratorConfig::with_rooms(4)).unwrap();
        let b = Batch::new(vec![Sample::canonical(&h, RotationMode::Estimated).unwrap()]).unwrap();
        let mut g = Graph::new();
        let pred = g.constant(b.gt_state());
        let (_, rep) = transvector_loss(&mut g, pred, &b, RotationLoss::Mse, true).unwrap();
        assert!(rep.l_total < 1e-20);
        assert!(rep.l_match < 1e-20);
    }

    #[test]
    fn loss_gradient_checks() {
        let h = generate_house(3, &GeneratorConfig::with_rooms(3)).unwrap();
        let b = Batch::new(vec![Sample::canonical(&h, RotationMode::Estimated).unwrap()]).unwrap();
        for rl in [RotationLoss::Mse, RotationLoss::CrossEntropy] {
            let mut store = ParamStore::new();
            let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
            let id = store.add("pred", Tensor::randn(b.num_tokens(), 6, &mut r)).unwrap();
            let rep = grad_check(
                &mut store,
                |g, s| {
                    let p = g.param(s, id);
                    Ok(transvector_loss(g, p, &b, rl, true)?.0)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(rep.passed(), "{rep}");
        }
    }
}
