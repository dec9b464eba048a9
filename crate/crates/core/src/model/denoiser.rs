use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{Batch, RotationMode, COND_DIM};
use crate::error::{JigsawError, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub rotation_mode: RotationMode,
    pub use_rsa: bool,
    pub use_gsa: bool,
    /// `Lin(x)` on the noisy state.
    pub state_embedding: bool,
    /// `MLP(t)` on the sinusoidal time encoding.
    pub time_embedding: bool,
    /// Sinusoidal encoding of the corner index within the house.
    pub position_encoding: bool,
    /// Biases on the input projections.
    pub embed_bias: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_model: 128,
            n_blocks: 6,
            n_heads: 4,
            mlp_hidden: 512,
            dropout: 0.1,
            rotation_mode: RotationMode::Estimated,
            use_rsa: true,
            use_gsa: true,
            state_embedding: true,
            time_embedding: true,
            position_encoding: true,
            embed_bias: true,
        }
    }
}

impl DenoiserConfig {
    pub fn state_dim(&self) -> usize {
        self.rotation_mode.state_dim()
    }

    pub fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(JigsawError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(JigsawError::InvalidConfig("d_model must be even".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(JigsawError::InvalidConfig("mlp_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(JigsawError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Attention layers in evaluation order.
    pub fn layers(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        for _ in 0..self.n_blocks {
            if self.use_rsa {
                out.push(LayerKind::RoomAttention);
            }
            if self.use_gsa {
                out.push(LayerKind::GlobalAttention);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    RoomAttention,
    GlobalAttention,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::RoomAttention => "rsa",
            LayerKind::GlobalAttention => "gsa",
        }
    }
}

/// Parameters of one pre-norm attention + feed-forward layer.
#[derive(Clone, Debug)]
struct LayerParams {
    kind: LayerKind,
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    state_in: Option<(ParamId, Option<ParamId>)>,
    cond_in: (ParamId, Option<ParamId>),
    time_mlp: Option<[(ParamId, ParamId); 2]>,
    layers: Vec<LayerParams>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Intermediate values of one forward pass.
pub struct Trace {
    pub embedding: Var,
    /// Per layer: kind, attention node, layer output.
    pub layers: Vec<(LayerKind, Var, Var)>,
    pub output: Var,
}

/// The per-corner transformer. With `state_embedding` and `time_embedding`
/// disabled it becomes the direct-regression network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, bound, rng)
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let sd = config.state_dim();
        let mut linear = |p: &mut ParamStore, name: &str, i: usize, o: usize, bias: bool| -> Result<(ParamId, Option<ParamId>)> {
            let w = p.add(format!("{name}.w"), xavier(i, o, &mut rng))?;
            let b = if bias { Some(p.add(format!("{name}.b"), Tensor::zeros(1, o))?) } else { None };
            Ok((w, b))
        };
        let with_bias = |x: (ParamId, Option<ParamId>)| (x.0, x.1.expect("bias requested"));
        let state_in = if config.state_embedding {
            Some(linear(&mut p, "embed.state", sd, d, config.embed_bias)?)
        } else {
            None
        };
        let cond_in = linear(&mut p, "embed.cond", COND_DIM, d, config.embed_bias)?;
        let time_mlp = if config.time_embedding {
            Some([
                with_bias(linear(&mut p, "embed.time.0", d, d, true)?),
                with_bias(linear(&mut p, "embed.time.1", d, d, true)?),
            ])
        } else {
            None
        };
        let ln = |p: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                p.add(format!("{name}.gamma"), Tensor::full(1, d, 1.0))?,
                p.add(format!("{name}.beta"), Tensor::zeros(1, d))?,
            ))
        };
        let mut layers = Vec::new();
        for (i, kind) in config.layers().into_iter().enumerate() {
            let name = format!("layer{}.{}", i, kind.tag());
            layers.push(LayerParams {
                kind,
                ln1: ln(&mut p, &format!("{name}.ln1"))?,
                qkv: with_bias(linear(&mut p, &format!("{name}.qkv"), d, 3 * d, true)?),
                out: with_bias(linear(&mut p, &format!("{name}.out"), d, d, true)?),
                ln2: ln(&mut p, &format!("{name}.ln2"))?,
                ff1: with_bias(linear(&mut p, &format!("{name}.ff1"), d, config.mlp_hidden, true)?),
                ff2: with_bias(linear(&mut p, &format!("{name}.ff2"), config.mlp_hidden, d, true)?),
            });
        }
        let ln_f = ln(&mut p, "final_ln")?;
        let head = with_bias(linear(&mut p, "head", d, sd, true)?);
        Ok(Denoiser {
            config,
            params: p,
            ids: Ids {
                state_in,
                cond_in,
                time_mlp,
                layers,
                ln_f,
                head,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_batch(&self, batch: &Batch, x_t: Option<&Tensor>, t: &[usize]) -> Result<()> {
        if batch.mode() != self.config.rotation_mode {
            return Err(JigsawError::InvalidConfig(format!(
                "batch rotation mode {:?} does not match model {:?}",
                batch.mode(),
                self.config.rotation_mode
            )));
        }
        if let Some(x) = x_t {
            let want = [batch.num_tokens(), self.config.state_dim()];
            if x.shape() != want {
                return Err(JigsawError::shape("denoiser state", x.shape(), &want));
            }
        }
        if self.config.time_embedding && t.len() != batch.num_houses() {
            return Err(JigsawError::shape("denoiser time steps", &[t.len()], &[batch.num_houses()]));
        }
        Ok(())
    }

    /// Per-corner input embedding.
    pub fn embed(&self, g: &mut Graph, batch: &Batch, x_t: Option<Var>, t: &[usize]) -> Result<Var> {
        let p = &self.params;
        let d = self.config.d_model;
        let cond = g.constant(batch.cond.clone());
        let (w, b) = self.ids.cond_in;
        let (w, b) = (g.param(p, w), b.map(|b| g.param(p, b)));
        let mut h = g.linear(cond, w, b)?;
        if let Some((w, b)) = self.ids.state_in {
            let x = x_t.ok_or_else(|| JigsawError::InvalidConfig("model needs a noisy state".into()))?;
            let (w, b) = (g.param(p, w), b.map(|b| g.param(p, b)));
            let e = g.linear(x, w, b)?;
            h = g.add(h, e)?;
        }
        if let Some([l0, l1]) = self.ids.time_mlp {
            let enc: Vec<Vec<f64>> = t.iter().map(|&v| sinusoidal(v as f64, d)).collect();
            let enc = g.constant(Tensor::from_rows(&enc)?);
            let (w0, b0, w1, b1) = (g.param(p, l0.0), g.param(p, l0.1), g.param(p, l1.0), g.param(p, l1.1));
            let z = g.linear(enc, w0, Some(b0))?;
            let z = g.gelu(z);
            let z = g.linear(z, w1, Some(b1))?;
            let z = g.gather_rows(z, &batch.house_of)?;
            h = g.add(h, z)?;
        }
        if self.config.position_encoding {
            let pe: Vec<f64> = batch
                .local_index
                .iter()
                .flat_map(|&i| sinusoidal(i as f64, d))
                .collect();
            let pe = g.constant(Tensor::matrix(batch.num_tokens(), d, pe));
            h = g.add(h, pe)?;
        }
        Ok(h)
    }

    fn layer(&self, g: &mut Graph, batch: &Batch, h: Var, lp: &LayerParams, rng: &mut Option<&mut dyn RngCore>) -> Result<(Var, Var)> {
        let p = &self.params;
        let d = self.config.d_model;
        let drop = self.config.dropout;
        let (g1, b1) = (g.param(p, lp.ln1.0), g.param(p, lp.ln1.1));
        let x = g.layer_norm(h, g1, b1, LN_EPS)?;
        let (w, b) = (g.param(p, lp.qkv.0), g.param(p, lp.qkv.1));
        let qkv = g.linear(x, w, Some(b))?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let layout = match lp.kind {
            LayerKind::RoomAttention => batch.rsa_layout.clone(),
            LayerKind::GlobalAttention => batch.gsa_layout.clone(),
        };
        let att = g.attention(q, k, v, self.config.n_heads, layout)?;
        let (w, b) = (g.param(p, lp.out.0), g.param(p, lp.out.1));
        let mut a = g.linear(att, w, Some(b))?;
        if let Some(r) = rng.as_deref_mut() {
            a = g.dropout(a, drop, r);
        }
        let h = g.add(h, a)?;
        let (g2, b2) = (g.param(p, lp.ln2.0), g.param(p, lp.ln2.1));
        let x = g.layer_norm(h, g2, b2, LN_EPS)?;
        let (w, b) = (g.param(p, lp.ff1.0), g.param(p, lp.ff1.1));
        let f = g.linear(x, w, Some(b))?;
        let f = g.gelu(f);
        let (w, b) = (g.param(p, lp.ff2.0), g.param(p, lp.ff2.1));
        let mut f = g.linear(f, w, Some(b))?;
        if let Some(r) = rng.as_deref_mut() {
            f = g.dropout(f, drop, r);
        }
        Ok((att, g.add(h, f)?))
    }

    /// Full network. Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        x_t: Option<Var>,
        t: &[usize],
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Trace> {
        self.check_batch(batch, x_t.map(|v| g.value(v)), t)?;
        let embedding = self.embed(g, batch, x_t, t)?;
        let mut h = embedding;
        let mut layers = Vec::with_capacity(self.ids.layers.len());
        for (i, lp) in self.ids.layers.iter().enumerate() {
            let (att, out) = self.layer(g, batch, h, lp, &mut dropout_rng)?;
            if !g.value(out).all_finite() {
                return Err(JigsawError::Numerical(format!(
                    "non-finite activations after layer {i} ({}), block {}",
                    lp.kind.tag(),
                    self.block_of(i)
                )));
            }
            layers.push((lp.kind, att, out));
            h = out;
        }
        let p = &self.params;
        let (gf, bf) = (g.param(p, self.ids.ln_f.0), g.param(p, self.ids.ln_f.1));
        let x = g.layer_norm(h, gf, bf, LN_EPS)?;
        let (w, b) = (g.param(p, self.ids.head.0), g.param(p, self.ids.head.1));
        let output = g.linear(x, w, Some(b))?;
        Ok(Trace {
            embedding,
            layers,
            output,
        })
    }

    fn block_of(&self, layer: usize) -> usize {
        let per_block = usize::from(self.config.use_rsa) + usize::from(self.config.use_gsa);
        layer / per_block.max(1)
    }

    /// Inference-mode prediction (no dropout) returning the output tensor.
    pub fn predict(&self, batch: &Batch, x_t: Option<&Tensor>, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = x_t.map(|x| g.constant(x.clone()));
        let trace = self.forward(&mut g, batch, x, t, None)?;
        Ok(g.value(trace.output).clone())
    }
}

/// Transformer-style sinusoidal encoding of a scalar into `d` features
/// (sines in the first half, cosines in the second).
pub fn sinusoidal(v: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (v * freq).sin();
        out[half + i] = (v * freq).cos();
    }
    out
}
