//! Reverse-process sampling, per-room aggregation and multi-run evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_test_scaling, House};
use crate::diffusion::{denormalize_position, NoiseSchedule};
use crate::error::{JigsawError, Result};
use crate::geometry::{Point2, Pose, Rotation4};
use crate::keyed::{house_key, keyed_rng};
use crate::metrics::{align_translation, connectivity, ged, mpe, CONNECT_THRESHOLD};
use crate::model::{Batch, Denoiser, ModelKind, RotationMode, Sample, TrainedModel};
use crate::numcore::Tensor;

/// Anything that predicts the noise in a noisy state.
pub trait NoisePredictor {
    fn predict_noise(&self, batch: &Batch, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, batch: &Batch, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.predict(batch, Some(x_t), t)
    }
}

fn house_rows(batch: &Batch, rngs: &mut [ChaCha8Rng], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch.num_tokens() * d);
    for (h, &(_, len)) in batch.spans.iter().enumerate() {
        data.extend(Tensor::randn(len, d, &mut rngs[h]).into_data());
    }
    Tensor::matrix(batch.num_tokens(), d, data)
}

/// Runs the reverse chain from `t = T` down to 1. House `h` draws all of its
/// noise from `rngs[h]`, so its result does not depend on the other houses.
pub fn sample(model: &dyn NoisePredictor, batch: &Batch, sched: &NoiseSchedule, rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
    if rngs.len() != batch.num_houses() {
        return Err(JigsawError::shape("sample rngs", &[rngs.len()], &[batch.num_houses()]));
    }
    let d = batch.state_dim();
    let mut x = house_rows(batch, rngs, d);
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; batch.num_houses()];
        let eps = model.predict_noise(batch, &x, &ts)?;
        let z = if t > 1 { Some(house_rows(batch, rngs, d)) } else { None };
        x = sched.p_step(&x, t, &eps, z.as_ref())?;
        if !x.all_finite() {
            let ids: Vec<&str> = batch.samples.iter().map(|s| s.house_id.as_str()).collect();
            return Err(JigsawError::Numerical(format!(
                "non-finite state at reverse step t={t} (houses {ids:?})"
            )));
        }
    }
    Ok(x)
}

/// Majority vote over per-corner rotation picks; ties go to the larger summed
/// score, then to the lower index.
pub fn vote_rotation(votes: &[Rotation4], scores: &[[f64; 4]]) -> Rotation4 {
    let mut count = [0usize; 4];
    for v in votes {
        count[v.index()] += 1;
    }
    let mut sum = [0.0; 4];
    for s in scores {
        for k in 0..4 {
            sum[k] += s[k];
        }
    }
    let mut best = 0;
    for k in 1..4 {
        if count[k] > count[best] || (count[k] == count[best] && sum[k] > sum[best]) {
            best = k;
        }
    }
    Rotation4::ALL[best]
}

/// Per-room poses from a clean per-corner state of one sample, in house room
/// order and in the house frame (rotations undo the input rotation).
pub fn aggregate(sample: &Sample, state: &Tensor) -> Result<Vec<Pose>> {
    let d = sample.mode.state_dim();
    if state.shape() != [sample.num_tokens(), d] {
        return Err(JigsawError::shape("aggregate", state.shape(), &[sample.num_tokens(), d]));
    }
    let n = sample.num_rooms();
    let mut pos = vec![[0.0f64; 2]; n];
    let mut count = vec![0usize; n];
    let mut votes: Vec<Vec<Rotation4>> = vec![Vec::new(); n];
    let mut scores: Vec<Vec<[f64; 4]>> = vec![Vec::new(); n];
    for (tok, &(j, _)) in sample.tokens.iter().enumerate() {
        let row = state.row(tok);
        pos[j][0] += row[0];
        pos[j][1] += row[1];
        count[j] += 1;
        if d == 6 {
            let mut o = [0.0; 4];
            o.copy_from_slice(&row[2..6]);
            votes[j].push(crate::diffusion::decode_rotation(&o));
            scores[j].push(o);
        }
    }
    let per_sample_room: Vec<Pose> = (0..n)
        .map(|j| {
            let c = count[j].max(1) as f64;
            let translation = denormalize_position([pos[j][0] / c, pos[j][1] / c]);
            let est = match sample.mode {
                RotationMode::Estimated => vote_rotation(&votes[j], &scores[j]),
                RotationMode::GtGiven => Rotation4::IDENTITY,
            };
            sample.pose_in_house_frame(j, Pose::new(translation, est))
        })
        .collect();
    Ok(sample.to_house_order(&per_sample_room))
}

impl TrainedModel {
    /// Clean-state estimate for a batch. Deterministic for direct regression.
    pub fn estimate(&self, batch: &Batch, rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
        match self.kind {
            ModelKind::Diffusion => {
                let sched = self
                    .schedule
                    .as_ref()
                    .ok_or_else(|| JigsawError::InvalidConfig("diffusion model without schedule".into()))?;
                sample(&self.net, batch, sched, rngs)
            }
            ModelKind::TransVector => self.net.predict(batch, None, &[]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
    /// Random per-house scale in [0.8, 1.0] before evaluation.
    pub test_scaling: bool,
    /// Random room order and (in estimated mode) random input rotations.
    pub augment: bool,
    /// Remove the global translation offset before computing MPE.
    pub align_translation: bool,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_runs: 5,
            seed: 0,
            test_scaling: true,
            augment: true,
            align_translation: false,
            batch_size: 32,
            threshold: CONNECT_THRESHOLD,
        }
    }
}

/// The evaluation view of a house: optionally rescaled, laid out with a
/// room order and input rotations drawn from a stream keyed by the house id.
pub fn prepare_eval(house: &House, mode: RotationMode, cfg: &EvalConfig) -> Result<(House, Sample)> {
    let mut rng = keyed_rng(cfg.seed, "eval-view", &[house_key(&house.id)]);
    let scaled = if cfg.test_scaling {
        apply_test_scaling(house, &mut rng)
    } else {
        house.clone()
    };
    let n = scaled.num_rooms();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rot: Vec<Rotation4> = scaled.gt_poses.iter().map(|p| p.rotation).collect();
    if cfg.augment {
        order.shuffle(&mut rng);
        if mode == RotationMode::Estimated {
            for r in &mut rot {
                *r = Rotation4::wrapping(rng.gen_range(0..4));
            }
        }
    }
    let reordered: Vec<Rotation4> = order.iter().map(|&r| rot[r]).collect();
    let sample = Sample::new(&scaled, mode, &order, &reordered)?;
    Ok((scaled, sample))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub pred_poses: Vec<Pose>,
    pub mpe: f64,
    pub ged: Option<usize>,
    pub rotation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HouseResult {
    pub id: String,
    /// Poses of the first run.
    pub pred_poses: Vec<Pose>,
    /// Ground truth in the evaluated (possibly rescaled) frame.
    pub gt_poses: Vec<Pose>,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub mpe: f64,
    pub ged: Option<f64>,
    pub rotation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: ModelKind,
    pub n_runs: usize,
    pub n_houses: usize,
    pub mpe_mean: f64,
    pub mpe_std: f64,
    /// `None` when some house has no door information.
    pub ged_mean: Option<f64>,
    pub ged_std: Option<f64>,
    pub rotation_accuracy_mean: f64,
    /// Set when only one run was made and the standard deviations are 0 by convention.
    pub single_run: bool,
    /// Mean pairwise distance between runs' predictions of the same room center, in pixels.
    pub run_spread_px: f64,
    pub per_run: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub houses: Vec<HouseResult>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn metric_rows(&self) -> Vec<crate::metrics::MetricRow> {
        let mut rows = Vec::new();
        for h in &self.houses {
            for r in &h.runs {
                rows.push(crate::metrics::MetricRow {
                    house_id: h.id.clone(),
                    run: r.run,
                    mpe: r.mpe,
                    ged: r.ged,
                });
            }
        }
        rows
    }
}

/// Mean and sample standard deviation (n - 1 denominator); 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Evaluates `model` on every house `cfg.n_runs` times. Houses are returned sorted by id.
pub fn evaluate_runs(model: &TrainedModel, houses: &[House], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n_runs == 0 {
        return Err(JigsawError::InvalidConfig("n_runs must be at least 1".into()));
    }
    let mode = model.net.config.rotation_mode;
    let mut sorted: Vec<&House> = houses.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let views: Vec<(House, Sample)> = sorted
        .iter()
        .map(|h| prepare_eval(h, mode, cfg))
        .collect::<Result<_>>()?;
    let mut results: Vec<HouseResult> = views
        .iter()
        .map(|(h, _)| HouseResult {
            id: h.id.clone(),
            pred_poses: Vec::new(),
            gt_poses: h.gt_poses.clone(),
            runs: Vec::with_capacity(cfg.n_runs),
        })
        .collect();
    let bs = cfg.batch_size.max(1);
    for run in 0..cfg.n_runs {
        for (chunk_idx, chunk) in views.chunks(bs).enumerate() {
            let batch = Batch::new(chunk.iter().map(|(_, s)| s.clone()).collect())?;
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|(h, _)| keyed_rng(cfg.seed, "eval-sample", &[run as u64, house_key(&h.id)]))
                .collect();
            let state = model.estimate(&batch, &mut rngs)?;
            for (i, (house, s)) in chunk.iter().enumerate() {
                let (start, len) = batch.spans[i];
                let mut poses = aggregate(s, &state.slice_rows(start, len))?;
                if cfg.align_translation {
                    poses = align_translation(&poses, &house.gt_poses);
                }
                let m = mpe(&poses, &house.gt_poses)?;
                let g = if house.has_doors() {
                    let pg = connectivity(&poses, house, cfg.threshold)?;
                    let gg = connectivity(&house.gt_poses, house, cfg.threshold)?;
                    Some(ged(&pg, &gg)?)
                } else {
                    None
                };
                let correct = poses
                    .iter()
                    .zip(&house.gt_poses)
                    .filter(|(p, g)| p.rotation == g.rotation)
                    .count();
                let r = &mut results[chunk_idx * bs + i];
                if run == 0 {
                    r.pred_poses = poses.clone();
                }
                r.runs.push(RunResult {
                    run,
                    pred_poses: poses,
                    mpe: m,
                    ged: g,
                    rotation_accuracy: correct as f64 / house.num_rooms() as f64,
                });
            }
        }
    }
    let summary = summarize(model.kind, &results, cfg.n_runs);
    Ok(EvalReport {
        houses: results,
        summary,
    })
}

/// Joins reports over disjoint house sets made with the same config, as
/// produced by evaluating chunks of a dataset independently.
pub fn merge_reports(kind: ModelKind, n_runs: usize, parts: Vec<EvalReport>) -> EvalReport {
    let mut houses: Vec<HouseResult> = parts.into_iter().flat_map(|p| p.houses).collect();
    houses.sort_by(|a, b| a.id.cmp(&b.id));
    let summary = summarize(kind, &houses, n_runs);
    EvalReport { houses, summary }
}

fn summarize(kind: ModelKind, results: &[HouseResult], n_runs: usize) -> EvalSummary {
    let nh = results.len().max(1) as f64;
    let has_ged = results.iter().all(|h| h.runs.iter().all(|r| r.ged.is_some()));
    let per_run: Vec<RunSummary> = (0..n_runs)
        .map(|run| {
            let mut rooms = 0usize;
            let mut correct = 0.0;
            for h in results {
                rooms += h.gt_poses.len();
                correct += h.runs[run].rotation_accuracy * h.gt_poses.len() as f64;
            }
            RunSummary {
                run,
                mpe: results.iter().map(|h| h.runs[run].mpe).sum::<f64>() / nh,
                ged: has_ged.then(|| {
                    results.iter().map(|h| h.runs[run].ged.unwrap_or(0) as f64).sum::<f64>() / nh
                }),
                rotation_accuracy: correct / rooms.max(1) as f64,
            }
        })
        .collect();
    let (mpe_mean, mpe_std) = mean_std(&per_run.iter().map(|r| r.mpe).collect::<Vec<_>>());
    let (ged_mean, ged_std) = if has_ged {
        let (m, s) = mean_std(&per_run.iter().map(|r| r.ged.unwrap_or(0.0)).collect::<Vec<_>>());
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let rotation_accuracy_mean = per_run.iter().map(|r| r.rotation_accuracy).sum::<f64>() / n_runs as f64;
    let mut spread = 0.0;
    let mut pairs = 0usize;
    for h in results {
        for a in 0..h.runs.len() {
            for b in a + 1..h.runs.len() {
                for (pa, pb) in h.runs[a].pred_poses.iter().zip(&h.runs[b].pred_poses) {
                    spread += pa.translation.distance(pb.translation);
                    pairs += 1;
                }
            }
        }
    }
    EvalSummary {
        model: kind,
        n_runs,
        n_houses: results.len(),
        mpe_mean,
        mpe_std,
        ged_mean,
        ged_std,
        rotation_accuracy_mean,
        single_run: n_runs == 1,
        run_spread_px: if pairs > 0 { spread / pairs as f64 } else { 0.0 },
        per_run,
    }
}

/// Mean room center of a pose list, for reporting.
pub fn mean_center(poses: &[Pose]) -> Point2 {
    poses.iter().fold(Point2::ORIGIN, |a, p| a + p.translation) / poses.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_house, GeneratorConfig};
    use crate::diffusion::normalize_position;
    use rand::SeedableRng;

    /// Knows the clean state and returns the exact noise of any `x_t`.
    struct Oracle {
        x0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, _b: &Batch, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
            let ab = self.sched.alpha_bar_at(t[0])?;
            x_t.zip_map(&self.x0, |x, c| (x - ab.sqrt() * c) / (1.0 - ab).sqrt())
        }
    }

    fn one(seed: u64, mode: RotationMode) -> (House, Batch) {
        let h = generate_house(seed, &GeneratorConfig::with_rooms(4)).unwrap();
        let (_, s) = prepare_eval(&h, mode, &EvalConfig { test_scaling: false, ..EvalConfig::default() }).unwrap();
        (h, Batch::new(vec![s]).unwrap())
    }

    #[test]
    fn one_step_oracle_returns_ground_truth() {
        let (h, b) = one(2, RotationMode::Estimated);
        let sched = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        let oracle = Oracle { x0: b.gt_state(), sched: sched.clone() };
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(0)];
        let x0 = sample(&oracle, &b, &sched, &mut rngs).unwrap();
        assert!(x0.max_abs_diff(&b.gt_state()) < 1e-9);
        let poses = aggregate(&b.samples[0], &x0).unwrap();
        for (p, g) in poses.iter().zip(&h.gt_poses) {
            assert!(p.translation.distance(g.translation) < 1e-6);
            assert_eq!(p.rotation, g.rotation);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let (_, b) = one(3, RotationMode::GtGiven);
        let sched = NoiseSchedule::scaled(10).unwrap();
        let oracle = Oracle { x0: b.gt_state(), sched: sched.clone() };
        let run = |seed| sample(&oracle, &b, &sched, &mut [ChaCha8Rng::seed_from_u64(seed)]).unwrap();
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn aggregate_examples() {
        let h = generate_house(1, &GeneratorConfig::with_rooms(3)).unwrap();
        let s = Sample::canonical(&h, RotationMode::Estimated).unwrap();
        // perfect state: exact poses back
        let poses = aggregate(&s, &s.gt_state()).unwrap();
        assert_eq!(poses, h.gt_poses);

        assert_eq!(vote_rotation(&[Rotation4::ALL[1], Rotation4::ALL[1], Rotation4::ALL[3]], &[]).k(), 1);
        let tied = vote_rotation(
            &[Rotation4::ALL[2], Rotation4::ALL[0]],
            &[[0.1, 0.0, 0.9, 0.0], [0.5, 0.0, 0.2, 0.0]],
        );
        assert_eq!(tied.k(), 2);
        assert_eq!(vote_rotation(&[Rotation4::ALL[3], Rotation4::ALL[1]], &[]).k(), 1);

        // mean of three corner positions
        let mut st = s.gt_state();
        let pts = [(0.0, 0.0), (2.0, 0.0), (1.0, 3.0)];
        let room0: Vec<usize> = (0..s.num_tokens()).filter(|&t| s.tokens[t].0 == 0).collect();
        for (k, &t) in room0.iter().enumerate() {
            let p = if k < 3 { pts[k] } else { (1.0, 1.0) };
            let n = normalize_position(Point2::new(p.0, p.1));
            st.row_mut(t)[0] = n[0];
            st.row_mut(t)[1] = n[1];
        }
        let poses = aggregate(&s, &st).unwrap();
        assert!(poses[0].translation.distance(Point2::new(1.0, 1.0)) < 1e-9);
    }

    #[test]
    fn aggregate_ignores_corner_order_within_room() {
        let h = generate_house(6, &GeneratorConfig::with_rooms(3)).unwrap();
        let s = Sample::canonical(&h, RotationMode::Estimated).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let st = Tensor::randn(s.num_tokens(), 6, &mut r);
        let base = aggregate(&s, &st).unwrap();
        // reverse token order inside each room
        let mut perm: Vec<usize> = (0..s.num_tokens()).collect();
        let mut start = 0;
        while start < perm.len() {
            let j = s.tokens[start].0;
            let end = (start..perm.len()).find(|&t| s.tokens[t].0 != j).unwrap_or(perm.len());
            perm[start..end].reverse();
            start = end;
        }
        let st2 = st.gather_rows(&perm);
        let again = aggregate(&s, &st2).unwrap();
        for (a, b) in base.iter().zip(&again) {
            assert!(a.translation.distance(b.translation) < 1e-9);
            assert_eq!(a.rotation, b.rotation);
        }
    }

    #[test]
    fn std_conventions() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eval_view_is_keyed_by_house_only() {
        let h = generate_house(9, &GeneratorConfig::with_rooms(5)).unwrap();
        let cfg = EvalConfig::default();
        let (a, sa) = prepare_eval(&h, RotationMode::Estimated, &cfg).unwrap();
        let (b, sb) = prepare_eval(&h, RotationMode::Estimated, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let s = a.gt_poses[0].translation.x / h.gt_poses[0].translation.x;
        assert!((0.8..=1.0).contains(&s));
    }
}
