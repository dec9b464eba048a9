//! Noise regression, door matching and their weighted total.

use serde::{Deserialize, Serialize};

use crate::diffusion::{decode_rotation, NoiseSchedule, POS_SCALE};
use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Rotation4};
use crate::model::Batch;
use crate::numcore::{CustomOp, Graph, Tensor, Var};

pub const MATCH_WEIGHT: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_simple: f64,
    pub l_match: f64,
    pub l_total: f64,
    /// Distance between the two reconstructions of each paired door corner, in pixels.
    pub door_residuals_px: Vec<f64>,
    /// Set when the batch had no door pairs, so the match term is 0 by definition.
    pub no_door_pairs: bool,
}

/// Mean squared error over every corner and channel.
pub fn loss_simple(g: &mut Graph, eps_hat: Var, eps: &Tensor) -> Result<Var> {
    g.mse_to(eps_hat, eps.clone())
}

/// Plain-tensor version of [`loss_simple`].
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.require_same_shape("mse", b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
}

/// How a network output maps to a clean-state estimate, per token:
/// `x0 = c_x * x_t + c_out * out`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x_t: Tensor,
    pub c_x: Vec<f64>,
    pub c_out: Vec<f64>,
}

impl Reconstruction {
    /// Noise prediction at per-house time steps `t`.
    pub fn from_noise(batch: &Batch, x_t: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Self> {
        let coef: Vec<(f64, f64)> = t.iter().map(|&t| sched.x0_coefficients(t)).collect::<Result<_>>()?;
        let per = batch.per_token(&coef);
        Ok(Reconstruction {
            x_t: x_t.clone(),
            c_x: per.iter().map(|c| c.0).collect(),
            c_out: per.iter().map(|c| c.1).collect(),
        })
    }

    /// The output is the clean state itself.
    pub fn direct(batch: &Batch) -> Self {
        let n = batch.num_tokens();
        Reconstruction {
            x_t: Tensor::zeros(n, batch.state_dim()),
            c_x: vec![0.0; n],
            c_out: vec![1.0; n],
        }
    }

    fn x0(&self, out: &Tensor) -> Tensor {
        let mut x0 = out.clone();
        for r in 0..x0.rows() {
            let (cx, co) = (self.c_x[r], self.c_out[r]);
            let xt = self.x_t.row(r);
            for (v, &x) in x0.row_mut(r).iter_mut().zip(xt) {
                *v = cx * x + co * *v;
            }
        }
        x0
    }
}

struct DoorMatch {
    c_out: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    diffs: Vec<[f64; 2]>,
}

impl CustomOp for DoorMatch {
    fn name(&self) -> &'static str {
        "door_match"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let out = inputs[0];
        let mut d = Tensor::zeros(out.rows(), out.cols());
        let f = 2.0 * grad.item() / self.pairs.len() as f64;
        for (&(a, b), diff) in self.pairs.iter().zip(&self.diffs) {
            for c in 0..2 {
                let v = f * diff[c];
                d.row_mut(a)[c] += v * self.c_out[a];
                d.row_mut(b)[c] -= v * self.c_out[b];
            }
        }
        vec![Some(d)]
    }
}

/// World position (normalized frame) of every token under the reconstructed state.
fn reconstruct_corners(batch: &Batch, x0: &Tensor) -> Vec<Point2> {
    (0..batch.num_tokens())
        .map(|i| {
            let row = x0.row(i);
            let p = Point2::new(row[0], row[1]);
            let c = Point2::new(batch.cond.get(i, 0), batch.cond.get(i, 1));
            let r = if row.len() >= 6 {
                decode_rotation(&row[2..6])
            } else {
                Rotation4::IDENTITY
            };
            p + r.apply(c)
        })
        .collect()
}

/// Door-matching loss: mean squared distance between the reconstructed world
/// positions of each paired door corner.
///
/// The rotation is picked by argmax and treated as a constant, so the rotation
/// channels of `out` get no gradient from this term. Returns the loss node and
/// per-pair residuals in pixels; with no pairs the loss is a constant 0.
pub fn loss_match(g: &mut Graph, out: Var, rec: &Reconstruction, batch: &Batch) -> Result<(Var, Vec<f64>)> {
    let ov = g.value(out);
    if ov.rows() != batch.num_tokens() || ov.cols() != batch.state_dim() {
        return Err(JigsawError::shape("loss_match", ov.shape(), &[batch.num_tokens(), batch.state_dim()]));
    }
    if batch.door_pairs.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), Vec::new()));
    }
    let x0 = rec.x0(ov);
    let world = reconstruct_corners(batch, &x0);
    let mut diffs = Vec::with_capacity(batch.door_pairs.len());
    let mut residuals = Vec::with_capacity(batch.door_pairs.len());
    let mut total = 0.0;
    for &(a, b) in &batch.door_pairs {
        let d = world[a] - world[b];
        diffs.push([d.x, d.y]);
        total += d.x * d.x + d.y * d.y;
        residuals.push(d.norm() * POS_SCALE);
    }
    let value = Tensor::scalar(total / batch.door_pairs.len() as f64);
    let op = DoorMatch {
        c_out: rec.c_out.clone(),
        pairs: batch.door_pairs.clone(),
        diffs,
    };
    Ok((g.custom(&[out], value, Box::new(op)), residuals))
}

/// `l_simple + 0.01 * l_match` (the match term can be switched off).
pub fn combine(g: &mut Graph, l_simple: Var, l_match: Var, use_match: bool, residuals: Vec<f64>, no_pairs: bool) -> Result<(Var, LossReport)> {
    let total = if use_match {
        let w = g.scale(l_match, MATCH_WEIGHT);
        g.add(l_simple, w)?
    } else {
        l_simple
    };
    let report = LossReport {
        l_simple: g.value(l_simple).item(),
        l_match: g.value(l_match).item(),
        l_total: g.value(total).item(),
        door_residuals_px: residuals,
        no_door_pairs: no_pairs,
    };
    Ok((total, report))
}

/// Training loss of the diffusion model for one batch.
pub fn loss_total(
    g: &mut Graph,
    eps_hat: Var,
    eps: &Tensor,
    rec: &Reconstruction,
    batch: &Batch,
    use_match: bool,
) -> Result<(Var, LossReport)> {
    let ls = loss_simple(g, eps_hat, eps)?;
    let (lm, residuals) = loss_match(g, eps_hat, rec, batch)?;
    combine(g, ls, lm, use_match, residuals, batch.door_pairs.is_empty())
}

/// Softmax cross-entropy of the four rotation channels against integer labels, averaged over tokens.
struct RotationCe {
    probs: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

impl CustomOp for RotationCe {
    fn name(&self) -> &'static str {
        "rotation_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let mut d = Tensor::zeros(x.rows(), x.cols());
        let f = grad.item() / self.labels.len() as f64;
        for (r, (p, &l)) in self.probs.iter().zip(&self.labels).enumerate() {
            for k in 0..4 {
                d.row_mut(r)[2 + k] = f * (p[k] - if k == l { 1.0 } else { 0.0 });
            }
        }
        vec![Some(d)]
    }
}

pub fn rotation_cross_entropy(g: &mut Graph, out: Var, labels: &[usize]) -> Result<Var> {
    let x = g.value(out);
    if x.cols() < 6 || x.rows() != labels.len() {
        return Err(JigsawError::shape("rotation_cross_entropy", x.shape(), &[labels.len(), 6]));
    }
    let mut probs = Vec::with_capacity(labels.len());
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let mut p = [0.0; 4];
        p.copy_from_slice(&x.row(r)[2..6]);
        crate::numcore::softmax_in_place(&mut p);
        loss -= p[l].max(1e-300).ln();
        probs.push(p);
    }
    let value = Tensor::scalar(loss / labels.len().max(1) as f64);
    Ok(g.custom(&[out], value, Box::new(RotationCe { probs, labels: labels.to_vec() })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};
    use crate::model::{RotationMode, Sample};
    use crate::numcore::{grad_check, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(mode: RotationMode, seed: u64) -> Batch {
        let h = generate_house(seed, &GeneratorConfig::with_rooms(3)).unwrap();
        Batch::new(vec![Sample::canonical(&h, mode).unwrap()]).unwrap()
    }

    #[test]
    fn simple_loss_definitions() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(5, 6, &mut r);
        let b = Tensor::randn(5, 6, &mut r);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&Tensor::zeros(3, 2), &Tensor::full(3, 2, 1.0)).unwrap(), 1.0);
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..6 {
                oracle += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let l = loss_simple(&mut g, av, &b).unwrap();
        assert!((g.value(l).item() - oracle / 30.0).abs() < 1e-14);
        assert!(mse(&a, &Tensor::zeros(5, 5)).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_match_loss() {
        for mode in [RotationMode::Estimated, RotationMode::GtGiven] {
            let b = batch(mode, 3);
            let mut g = Graph::new();
            let out = g.constant(b.gt_state());
            let (l, res) = loss_match(&mut g, out, &Reconstruction::direct(&b), &b).unwrap();
            assert!(g.value(l).item() < 1e-24);
            assert!(res.iter().all(|&r| r < 1e-9));
        }
    }

    #[test]
    fn offset_of_three_four_contributes_25() {
        let mut b = batch(RotationMode::GtGiven, 3);
        let (a, c) = b.door_pairs[0];
        b.door_pairs = vec![(a, c)];
        let mut state = b.gt_state();
        let room_a = b.room_of[a];
        for t in 0..b.num_tokens() {
            if b.room_of[t] == room_a {
                state.row_mut(t)[0] += 3.0;
                state.row_mut(t)[1] += 4.0;
            }
        }
        let mut g = Graph::new();
        let out = g.constant(state);
        let (l, res) = loss_match(&mut g, out, &Reconstruction::direct(&b), &b).unwrap();
        assert!((g.value(l).item() - 25.0).abs() < 1e-9);
        assert!((res[0] - 5.0 * POS_SCALE).abs() < 1e-7);
    }

    #[test]
    fn global_shift_leaves_match_loss_unchanged() {
        let b = batch(RotationMode::Estimated, 8);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let noisy = b.gt_state().zip_map(&Tensor::randn(b.num_tokens(), 6, &mut r), |a, n| a + 0.1 * n).unwrap();
        let mut shifted = noisy.clone();
        for t in 0..b.num_tokens() {
            shifted.row_mut(t)[0] += 0.37;
            shifted.row_mut(t)[1] -= 1.2;
        }
        let mut g = Graph::new();
        let (o1, o2) = (g.constant(noisy), g.constant(shifted));
        let rec = Reconstruction::direct(&b);
        let (l1, _) = loss_match(&mut g, o1, &rec, &b).unwrap();
        let (l2, _) = loss_match(&mut g, o2, &rec, &b).unwrap();
        assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut g = Graph::new();
        let ls = g.constant(Tensor::scalar(1.0));
        let lm = g.constant(Tensor::scalar(100.0));
        let (t, rep) = combine(&mut g, ls, lm, true, vec![], false).unwrap();
        assert_eq!(g.value(t).item(), 2.0);
        assert_eq!(rep.l_total, 2.0);
        let lm0 = g.constant(Tensor::scalar(0.0));
        let (_, rep) = combine(&mut g, ls, lm0, true, vec![], false).unwrap();
        assert_eq!(rep.l_total, rep.l_simple);
    }

    #[test]
    fn empty_pairs_give_simple_loss() {
        let h = generate_house(3, &GeneratorConfig::with_rooms(4)).unwrap();
        let h = crate::data::corrupt_house(&h, false, true);
        let b = Batch::new(vec![Sample::canonical(&h, RotationMode::Estimated).unwrap()]).unwrap();
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let eps = Tensor::randn(b.num_tokens(), 6, &mut r);
        let out = g.input(Tensor::randn(b.num_tokens(), 6, &mut r));
        let sched = NoiseSchedule::scaled(100).unwrap();
        let rec = Reconstruction::from_noise(&b, &b.gt_state(), &[10], &sched).unwrap();
        let (_, rep) = loss_total(&mut g, out, &eps, &rec, &b, true).unwrap();
        assert!(rep.no_door_pairs);
        assert_eq!(rep.l_total, rep.l_simple);
    }

    #[test]
    fn match_gradient_checks_and_blocks_rotation() {
        let b = batch(RotationMode::Estimated, 5);
        let sched = NoiseSchedule::scaled(100).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x_t = Tensor::randn(b.num_tokens(), 6, &mut r);
        let rec = Reconstruction::from_noise(&b, &x_t, &[40], &sched).unwrap();
        let mut store = ParamStore::new();
        let id = store.add("eps_hat", Tensor::randn(b.num_tokens(), 6, &mut r)).unwrap();
        let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let e = g.param(s, id);
            Ok(loss_match(g, e, &rec, &b)?.0)
        };
        let rep = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        assert!(rep.passed(), "{rep}");
        let mut g = Graph::new();
        let out = f(&mut g, &store).unwrap();
        let grads = g.backward(out).unwrap();
        let pg = g.param_grads(&grads, &store);
        for row in 0..b.num_tokens() {
            assert!(pg[0].row(row)[2..].iter().all(|&v| v == 0.0));
        }
        assert!(pg[0].norm() > 0.0);
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.add("logits", Tensor::randn(5, 6, &mut r)).unwrap();
        let labels = [0, 3, 1, 1, 2];
        let rep = grad_check(
            &mut store,
            |g, s| {
                let x = g.param(s, id);
                rotation_cross_entropy(g, x, &labels)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
    }
}
