//! Checkpoint container: an 8-byte little-endian header length, a JSON header
//! listing every tensor (name, dtype, shape, byte range), then the raw
//! little-endian tensor data in header order. Tensor names are sorted.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::smol::{SmolBank, SmolConfig};
use crate::tensor::Tensor;

use super::{ElasticModel, LayerWeights, ModelConfig, ModelWeights};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// `[begin, end)` byte range inside the data section.
    pub offsets: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `path` through a sibling temp file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode<T: Scalar>(metadata: serde_json::Value, tensors: &BTreeMap<String, &Tensor<T>>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let begin = data.len() as u64;
        for &v in t.data() {
            v.write_le(&mut data);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offsets: [begin, data.len() as u64],
        });
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        metadata,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

fn read_as<T: Scalar>(dtype: &str, raw: &[u8]) -> Result<Vec<T>> {
    Ok(match dtype {
        "f32" => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        "f64" => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    })
}

/// Parses a checkpoint, converting stored values to `T` when the dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor<T>>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    let data = &bytes[8 + hlen..];
    let mut out = BTreeMap::new();
    for e in &header.tensors {
        let [b, end] = e.offsets;
        let raw = data
            .get(b as usize..end as usize)
            .ok_or_else(|| Error::Format(format!("tensor {} outside data section", e.name)))?;
        let values = read_as::<T>(&e.dtype, raw)?;
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    Ok((header, out))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    n_layers_stored: usize,
    adapter: Option<SmolConfig>,
}

impl<T: Scalar> ElasticModel<T> {
    /// Serializes base weights and, when attached, the adapter bank.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ModelMeta {
            kind: "elastic-model".into(),
            config: self.config.clone(),
            n_layers_stored: self.weights.layers.len(),
            adapter: self.adapter.as_ref().map(|b| b.config.clone()),
        };
        let mut tensors: BTreeMap<String, &Tensor<T>> = self.weights.named().into_iter().collect();
        if let Some(bank) = &self.adapter {
            tensors.extend(bank.named());
        }
        encode(serde_json::to_value(meta)?, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Loads weights and adapter; the width plan is stored separately.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut tensors) = decode::<T>(bytes)?;
        let meta: ModelMeta = serde_json::from_value(header.metadata)?;
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")));
        let mut layers = Vec::with_capacity(meta.n_layers_stored);
        for i in 0..meta.n_layers_stored {
            let mut t = |n: &str| take(&format!("layers.{i}.{n}"));
            layers.push(LayerWeights {
                attn_norm: t("attn_norm")?,
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                bo: t("bo")?,
                ffn_norm: t("ffn_norm")?,
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
                b_down: t("b_down")?,
            });
        }
        let weights = ModelWeights {
            tok_emb: take("tok_emb")?,
            pos_emb: take("pos_emb")?,
            layers,
            final_norm: take("final_norm")?,
            head: take("head")?,
        };
        let mut model = ElasticModel::new(meta.config, weights)?;
        if let Some(cfg) = meta.adapter {
            let bank = SmolBank::from_named(cfg, &model.weights, &mut tensors)?;
            model = model.with_adapter(bank)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
