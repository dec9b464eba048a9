//! Binary checkpoint container.
//!
//! Layout: `b"JIGSAWCK"`, a little-endian `u32` header length, the JSON
//! header `{"format_version":1,"model_config":..,"meta":..,"tensors":[{"name","shape"}]}`,
//! then every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{JigsawError, Result};

pub const MAGIC: &[u8; 8] = b"JIGSAWCK";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: Value,
    #[serde(default)]
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameters, and optionally AdamW moments (stored as `adam.m/<name>`, `adam.v/<name>`).
    pub fn from_store(store: &ParamStore, model_config: Value, meta: Value, with_optimizer: bool) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if with_optimizer {
            for id in store.ids() {
                tensors.push((format!("{ADAM_M}{}", store.name(id)), store.first_moment(id).clone()));
                tensors.push((format!("{ADAM_V}{}", store.name(id)), store.second_moment(id).clone()));
            }
        }
        let mut meta = meta;
        if with_optimizer {
            if let Value::Object(map) = &mut meta {
                map.insert("adam_step".into(), store.step().into());
            } else {
                meta = serde_json::json!({ "adam_step": store.step() });
            }
        }
        Checkpoint {
            model_config,
            meta,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `store`, which must already hold parameters
    /// of the same names and shapes. Optimizer state is restored when present.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let name = store.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| JigsawError::Checkpoint(format!("missing tensor `{name}`")))?;
            store.get(id).require_same_shape("checkpoint restore", t)?;
            *store.get_mut(id) = t.clone();
        }
        let has_opt = self.tensors.iter().any(|(n, _)| n.starts_with(ADAM_M));
        if has_opt {
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for &id in &ids {
                let name = store.name(id);
                let get = |prefix: &str| {
                    self.tensor(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| JigsawError::Checkpoint(format!("missing optimizer state for `{name}`")))
                };
                m.push(get(ADAM_M)?);
                v.push(get(ADAM_V)?);
            }
            let step = self.meta.get("adam_step").and_then(Value::as_u64).unwrap_or(0);
            store.set_optimizer_state(step, m, v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.model_config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| JigsawError::Checkpoint("header too large".into()))?;
        let body: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| JigsawError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12 + len;
        if bytes.len() < header_end {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(JigsawError::Checkpoint(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * 8;
            if bytes.len() < end {
                return Err(JigsawError::Checkpoint(format!("truncated data for `{}`", e.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::AdamW;
    use serde_json::json;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 1e-300, f64::MAX])).unwrap();
        s.add("b", Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3])).unwrap();
        s
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut s = store();
        let grads: Vec<_> = s.values().map(|t| t.map(|v| v.signum())).collect();
        AdamW::default().step(&mut s, &grads).unwrap();
        let ck = Checkpoint::from_store(&s, json!({"d_model": 8}), json!({"epoch": 3}), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/x/ckpt-3");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::from_store(&store(), json!({}), json!({}), false);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn restore_rejects_shape_change() {
        let ck = Checkpoint::from_store(&store(), json!({}), json!({}), false);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(3, 3)).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
    }
}
