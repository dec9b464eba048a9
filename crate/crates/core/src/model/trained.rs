use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{JigsawError, Result};
use crate::numcore::Checkpoint;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Iterative denoising from noise.
    #[default]
    Diffusion,
    /// Direct regression of the per-corner pose, no time or state inputs.
    #[serde(rename = "transvector")]
    TransVector,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::TransVector => "transvector",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = JigsawError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(ModelKind::Diffusion),
            "transvector" => Ok(ModelKind::TransVector),
            other => Err(JigsawError::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A network together with what is needed to run it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub net: Denoiser,
    /// Present for diffusion models.
    pub schedule: Option<NoiseSchedule>,
}

impl TrainedModel {
    /// Fresh diffusion model with the scaled linear schedule of `steps` steps.
    pub fn diffusion(config: DenoiserConfig, steps: usize, seed: u64) -> Result<Self> {
        if !(config.state_embedding && config.time_embedding) {
            return Err(JigsawError::InvalidConfig(
                "a diffusion model needs state and time embeddings".into(),
            ));
        }
        Ok(TrainedModel {
            kind: ModelKind::Diffusion,
            net: Denoiser::new(config, seed)?,
            schedule: Some(NoiseSchedule::scaled(steps)?),
        })
    }

    pub fn transvector(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let config = DenoiserConfig {
            state_embedding: false,
            time_embedding: false,
            ..config
        };
        Ok(TrainedModel {
            kind: ModelKind::TransVector,
            net: Denoiser::new(config, seed)?,
            schedule: None,
        })
    }

    pub fn new(kind: ModelKind, config: DenoiserConfig, steps: usize, seed: u64) -> Result<Self> {
        match kind {
            ModelKind::Diffusion => TrainedModel::diffusion(config, steps, seed),
            ModelKind::TransVector => TrainedModel::transvector(config, seed),
        }
    }

    pub fn diffusion_steps(&self) -> usize {
        self.schedule.as_ref().map_or(0, NoiseSchedule::steps)
    }

    /// Checkpoint with `extra` merged into the metadata.
    pub fn to_checkpoint(&self, extra: Value, with_optimizer: bool) -> Result<Checkpoint> {
        let mut meta = json!({
            "model": self.kind.as_str(),
            "diffusion_steps": self.diffusion_steps(),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        Ok(Checkpoint::from_store(
            &self.net.params,
            serde_json::to_value(&self.net.config)?,
            meta,
            with_optimizer,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_value(ck.model_config.clone())?;
        let kind: ModelKind = match ck.meta.get("model").and_then(Value::as_str) {
            Some(s) => s.parse()?,
            None => ModelKind::Diffusion,
        };
        let steps = ck.meta.get("diffusion_steps").and_then(Value::as_u64).unwrap_or(0) as usize;
        let mut model = match kind {
            ModelKind::Diffusion => TrainedModel {
                kind,
                net: Denoiser::new(config, 0)?,
                schedule: Some(NoiseSchedule::scaled(steps)?),
            },
            ModelKind::TransVector => TrainedModel {
                kind,
                net: Denoiser::new(config, 0)?,
                schedule: None,
            },
        };
        ck.restore_into(&mut model.net.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: Value) -> Result<()> {
        self.to_checkpoint(extra, false)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let ck = Checkpoint::load(path)?;
        Ok((TrainedModel::from_checkpoint(&ck)?, ck.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_keeps_kind_and_schedule() {
        let cfg = DenoiserConfig {
            d_model: 16,
            n_blocks: 1,
            mlp_hidden: 16,
            ..DenoiserConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        for m in [
            TrainedModel::diffusion(cfg.clone(), 50, 3).unwrap(),
            TrainedModel::transvector(cfg.clone(), 3).unwrap(),
        ] {
            let path = dir.path().join(m.kind.as_str());
            m.save(&path, json!({"epoch": 4})).unwrap();
            let (back, meta) = TrainedModel::load(&path).unwrap();
            assert_eq!(back.kind, m.kind);
            assert_eq!(back.schedule, m.schedule);
            assert_eq!(back.net.params, m.net.params);
            assert_eq!(meta["epoch"], 4);
            assert_eq!(meta["model"], m.kind.as_str());
        }
    }
}
