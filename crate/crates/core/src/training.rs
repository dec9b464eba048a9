//! Augmentation, the optimization step and the epoch loop with
//! checkpointing, validation and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baseline::{transvector_loss, RotationLoss};
use crate::data::House;
use crate::error::{JigsawError, Result};
use crate::geometry::Rotation4;
use crate::inference::{evaluate_runs, EvalConfig};
use crate::keyed::{house_key, keyed_rng};
use crate::losses::{loss_total, LossReport, Reconstruction};
use crate::model::{Batch, DenoiserConfig, ModelKind, RotationMode, Sample, TrainedModel};
use crate::numcore::{step_lr, AdamW, Checkpoint, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub model: DenoiserConfig,
    pub diffusion_steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling (0 disables clipping).
    pub grad_clip: f64,
    pub batch_size: usize,
    pub scheduler_step_epochs: usize,
    pub scheduler_gamma: f64,
    pub epochs: usize,
    pub seed: u64,
    pub use_match_loss: bool,
    /// The match loss only sees examples with `t <= match_t_fraction * T` (1 keeps every t).
    pub match_t_fraction: f64,
    /// Rotation supervision of the direct-regression model.
    pub rotation_loss: RotationLoss,
    /// Validate every this many epochs (0 disables validation).
    pub val_every: usize,
    /// Keep `ckpt-<epoch>` every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::Diffusion,
            model: DenoiserConfig::default(),
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            grad_clip: 1.0,
            batch_size: 32,
            scheduler_step_epochs: 20,
            scheduler_gamma: 0.5,
            epochs: 100,
            seed: 0,
            use_match_loss: true,
            match_t_fraction: 0.25,
            rotation_loss: RotationLoss::Mse,
            val_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        self.model.check()?;
        let bad = |m: String| Err(JigsawError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.lr));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.match_t_fraction) {
            return bad(format!("match_t_fraction {} must lie in [0, 1]", self.match_t_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.scheduler_gamma > 0.0) || self.weight_decay < 0.0 {
            return bad("scheduler_gamma must be positive and weight_decay non-negative".into());
        }
        if self.kind == ModelKind::Diffusion && self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    /// Largest time step that still receives the match loss.
    pub fn match_max_t(&self) -> usize {
        (self.match_t_fraction * self.diffusion_steps as f64).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr, epoch, self.scheduler_step_epochs, self.scheduler_gamma)
    }
}

/// Random room order and, in estimated mode, a random input rotation per room.
pub fn augment<R: Rng + ?Sized>(house: &House, rng: &mut R, mode: RotationMode) -> Result<Sample> {
    let n = house.num_rooms();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let rot: Vec<Rotation4> = order
        .iter()
        .map(|&r| match mode {
            RotationMode::Estimated => Rotation4::wrapping(rng.gen_range(0..4)),
            RotationMode::GtGiven => house.gt_poses[r].rotation,
        })
        .collect();
    Sample::new(house, mode, &order, &rot)
}

pub fn sample_t<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

/// Per-house training inputs, drawn from a stream keyed by `(seed, epoch, house)`.
pub fn draw_example(house: &House, cfg: &TrainConfig, epoch: usize) -> Result<(Sample, usize, Tensor)> {
    let mut rng = keyed_rng(cfg.seed, "train-example", &[epoch as u64, house_key(&house.id)]);
    let sample = augment(house, &mut rng, cfg.model.rotation_mode)?;
    let t = match cfg.kind {
        ModelKind::Diffusion => sample_t(&mut rng, cfg.diffusion_steps),
        ModelKind::TransVector => 0,
    };
    let noise = Tensor::randn(sample.num_tokens(), cfg.model.state_dim(), &mut rng);
    Ok((sample, t, noise))
}

/// Builds the loss of one batch on a fresh graph and returns the gradients.
pub fn loss_and_grads(
    model: &TrainedModel,
    cfg: &TrainConfig,
    batch: &Batch,
    t: &[usize],
    noise: &Tensor,
    dropout_seed: Option<u64>,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut drop_rng = dropout_seed.map(|s| keyed_rng(s, "dropout", &[]));
    let drop = drop_rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
    let (loss, report) = match model.kind {
        ModelKind::Diffusion => {
            let sched = model
                .schedule
                .as_ref()
                .ok_or_else(|| JigsawError::InvalidConfig("diffusion model without schedule".into()))?;
            let x0 = batch.gt_state();
            let mut rows = Vec::with_capacity(x0.len());
            for (h, &(start, len)) in batch.spans.iter().enumerate() {
                let xt = sched.q_sample(&x0.slice_rows(start, len), t[h], &noise.slice_rows(start, len))?;
                rows.extend(xt.into_data());
            }
            let x_t = Tensor::matrix(x0.rows(), x0.cols(), rows);
            let xv = g.constant(x_t.clone());
            let trace = model.net.forward(&mut g, batch, Some(xv), t, drop)?;
            let rec = Reconstruction::from_noise(batch, &x_t, t, sched)?;
            let max_t = cfg.match_max_t();
            if max_t < sched.steps() {
                let mut limited = batch.clone();
                limited.door_pairs.retain(|&(a, _)| t[batch.house_of[a]] <= max_t);
                loss_total(&mut g, trace.output, noise, &rec, &limited, cfg.use_match_loss)?
            } else {
                loss_total(&mut g, trace.output, noise, &rec, batch, cfg.use_match_loss)?
            }
        }
        ModelKind::TransVector => {
            let out = model.net.forward(&mut g, batch, None, &[], drop)?.output;
            transvector_loss(&mut g, out, batch, cfg.rotation_loss, cfg.use_match_loss)?
        }
    };
    if !report.l_total.is_finite() {
        let ids: Vec<&str> = batch.samples.iter().map(|s| s.house_id.as_str()).collect();
        return Err(JigsawError::Numerical(format!(
            "non-finite loss {} (t={t:?}, houses {ids:?})",
            report.l_total
        )));
    }
    let grads = g.backward(loss)?;
    Ok((report, g.param_grads(&grads, &model.net.params)))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// One optimizer step on `houses` at the given epoch/step keys and learning rate.
pub fn train_step(model: &mut TrainedModel, cfg: &TrainConfig, houses: &[&House], epoch: usize, step: u64, lr: f64) -> Result<LossReport> {
    if houses.is_empty() {
        return Err(JigsawError::InvalidConfig("empty batch".into()));
    }
    let mut samples = Vec::with_capacity(houses.len());
    let mut ts = Vec::with_capacity(houses.len());
    let mut noises = Vec::with_capacity(houses.len());
    for h in houses {
        let (s, t, n) = draw_example(h, cfg, epoch)?;
        samples.push(s);
        ts.push(t);
        noises.push(n);
    }
    let batch = Batch::new(samples)?;
    let noise = Tensor::concat_rows(&noises)?;
    let dropout_seed = (cfg.model.dropout > 0.0).then(|| cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (report, mut grads) = loss_and_grads(model, cfg, &batch, &ts, &noise, dropout_seed)?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    cfg.optimizer(lr).step(&mut model.net.params, &grads)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_l_simple: f64,
    pub mean_l_match: f64,
    pub val_mpe: Option<f64>,
}

/// Training state with an optional run directory for logs and checkpoints.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TrainedModel,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_mpe: Option<f64>,
    pub history: Vec<EpochLog>,
    run_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, run_dir: Option<PathBuf>) -> Result<Self> {
        cfg.check()?;
        let model = TrainedModel::new(cfg.kind, cfg.model.clone(), cfg.diffusion_steps, cfg.seed)?;
        let mut t = Trainer {
            cfg,
            model,
            epoch: 0,
            step: 0,
            best_val_mpe: None,
            history: Vec::new(),
            run_dir,
            log: None,
        };
        t.open_log(false)?;
        Ok(t)
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    /// The stored training config wins over `cfg` except for `epochs`.
    pub fn resume(checkpoint: &Path, epochs: Option<usize>, run_dir: Option<PathBuf>) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let mut cfg: TrainConfig = serde_json::from_value(
            ck.meta
                .get("train_config")
                .cloned()
                .ok_or_else(|| JigsawError::Checkpoint("checkpoint has no training config".into()))?,
        )?;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let model = TrainedModel::from_checkpoint(&ck)?;
        let get_u = |k: &str| ck.meta.get(k).and_then(Value::as_u64).unwrap_or(0);
        let mut t = Trainer {
            epoch: get_u("epoch") as usize,
            step: get_u("step"),
            best_val_mpe: ck.meta.get("best_val_mpe").and_then(Value::as_f64),
            history: ck
                .meta
                .get("history")
                .cloned()
                .map(serde_json::from_value)
                .transpose()?
                .unwrap_or_default(),
            cfg,
            model,
            run_dir,
            log: None,
        };
        t.open_log(true)?;
        Ok(t)
    }

    fn open_log(&mut self, append: bool) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            fs::create_dir_all(dir)?;
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(dir.join("train_log.jsonl"))?;
            self.log = Some(BufWriter::new(f));
        }
        Ok(())
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Result<Checkpoint> {
        self.model.to_checkpoint(
            json!({
                "epoch": self.epoch,
                "step": self.step,
                "best_val_mpe": self.best_val_mpe,
                "train_config": self.cfg,
                "history": self.history,
            }),
            with_optimizer,
        )
    }

    /// Writes `ckpt-<epoch>` (with optimizer state) into the run directory.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.run_dir else { return Ok(None) };
        let path = dir.join(format!("ckpt-{}", self.epoch));
        self.checkpoint(true)?.save(&path)?;
        Ok(Some(path))
    }

    /// One pass over `train` in a shuffled order keyed by the epoch.
    pub fn run_epoch(&mut self, train: &[House]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(JigsawError::InvalidConfig("empty training set".into()));
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<&House> = train.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        order.shuffle(&mut keyed_rng(self.cfg.seed, "epoch-order", &[self.epoch as u64]));
        let (mut sum, mut sum_s, mut sum_m, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let rep = train_step(&mut self.model, &self.cfg, chunk, self.epoch, self.step, lr)?;
            self.step += 1;
            if let Some(log) = &mut self.log {
                writeln!(
                    log,
                    "{}",
                    json!({
                        "step": self.step,
                        "epoch": self.epoch,
                        "t_loss": rep.l_total,
                        "l_simple": rep.l_simple,
                        "l_match": rep.l_match,
                        "lr": lr,
                    })
                )?;
            }
            sum += rep.l_total;
            sum_s += rep.l_simple;
            sum_m += rep.l_match;
            n += 1;
        }
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            lr,
            mean_loss: sum / n as f64,
            mean_l_simple: sum_s / n as f64,
            mean_l_match: sum_m / n as f64,
            val_mpe: None,
        };
        self.history.push(entry.clone());
        Ok(entry)
    }

    fn validate(&mut self, val: &[House]) -> Result<f64> {
        let cfg = EvalConfig {
            n_runs: 1,
            seed: self.cfg.seed,
            batch_size: self.cfg.batch_size,
            ..EvalConfig::default()
        };
        let mpe = evaluate_runs(&self.model, val, &cfg)?.summary.mpe_mean;
        if self.best_val_mpe.map_or(true, |b| mpe < b) {
            self.best_val_mpe = Some(mpe);
            if let Some(dir) = &self.run_dir {
                self.checkpoint(false)?.save(&dir.join("best"))?;
            }
        }
        Ok(mpe)
    }

    /// Trains until `cfg.epochs` epochs are complete. With `epochs = 0` the
    /// initialized model is checkpointed and returned unchanged.
    pub fn fit(&mut self, train: &[House], val: &[House]) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(train)?;
            let every = self.cfg.val_every;
            if every > 0 && !val.is_empty() && self.epoch % every == 0 {
                let mpe = self.validate(val)?;
                log::info!("epoch {} validation MPE {:.2}px", self.epoch, mpe);
                if let Some(last) = self.history.last_mut() {
                    last.val_mpe = Some(mpe);
                }
            }
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(())
    }
}

/// Convenience wrapper: train from scratch and return the model.
pub fn fit(cfg: TrainConfig, train: &[House], val: &[House], run_dir: Option<PathBuf>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, run_dir)?;
    t.fit(train, val)?;
    Ok(t)
}
