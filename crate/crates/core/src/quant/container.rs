//! `NTQ1` layout: magic, `u32` version, `u64` metadata length, metadata as
//! `(u32 len, key, u32 len, value)` UTF-8 records sorted by key, `u64` tensor
//! count, then tensor records sorted by name: `u32` name length, name, `u8`
//! scheme, `u32` rank, `u64` dims, `u64` payload length, payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::block::{BlockQ4, BlockQ8, Q4_BLOCK_BYTES, Q8_BLOCK_BYTES};
use super::{QuantData, QuantPolicy, QuantTensor, Scheme, BLOCK};
use crate::error::{ForgeError, Result};
use crate::model::checkpoint::{assemble, Reader};
use crate::model::{ModelConfig, Parameters};

pub const QUANT_MAGIC: &[u8; 4] = b"NTQ1";
pub const QUANT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    pub config: ModelConfig,
    tensors: BTreeMap<String, QuantTensor>,
}

fn padding(shape: &[usize], scheme: Scheme) -> usize {
    let n: usize = shape.iter().product();
    match scheme {
        Scheme::F32 => 0,
        _ => n.div_ceil(BLOCK) * BLOCK - n,
    }
}

fn metadata<'a>(cfg: &ModelConfig, items: impl Iterator<Item = (&'a str, &'a [usize], Scheme)>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for (k, v) in [
        ("hidden_size", cfg.hidden_size),
        ("intermediate_size", cfg.intermediate_size),
        ("max_position_embeddings", cfg.max_position_embeddings),
        ("num_attention_heads", cfg.num_attention_heads),
        ("num_hidden_layers", cfg.num_hidden_layers),
        ("vocab_size", cfg.vocab_size),
    ] {
        m.insert(format!("model.{k}"), v.to_string());
    }
    for (name, shape, scheme) in items {
        m.insert(format!("scheme.{name}"), scheme.name().to_string());
        let pad = padding(shape, scheme);
        if pad > 0 {
            m.insert(format!("pad.{name}"), pad.to_string());
        }
    }
    m
}

fn metadata_bytes(m: &BTreeMap<String, String>) -> Vec<u8> {
    let mut buf = Vec::new();
    for (k, v) in m {
        for s in [k, v] {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
    }
    buf
}

fn record_bytes(name: &str, shape: &[usize], scheme: Scheme) -> usize {
    4 + name.len() + 1 + 4 + 8 * shape.len() + 8 + scheme.payload_bytes(shape.iter().product())
}

/// Exact size in bytes of the container `quantize_model` writes for `cfg`.
pub fn estimate_size(cfg: &ModelConfig, policy: &QuantPolicy) -> Result<u64> {
    let plan = policy.plan(cfg)?;
    let meta = metadata_bytes(&metadata(cfg, plan.iter().map(|(n, s, k)| (n.as_str(), s.as_slice(), *k))));
    let records: usize = plan.iter().map(|(n, s, k)| record_bytes(n, s, *k)).sum();
    Ok((4 + 4 + 8 + meta.len() + 8 + records) as u64)
}

impl QuantModel {
    /// Requires exactly the tensors of `config`, with matching shapes.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, QuantTensor>) -> Result<Self> {
        let blank = Parameters::<f32>::zeros(&config);
        let expected = blank.tensors();
        if expected.len() != tensors.len() {
            return Err(ForgeError::Shape(format!("{} tensors, expected {}", tensors.len(), expected.len())));
        }
        for (name, t) in expected {
            let q = tensors.get(&name).ok_or_else(|| ForgeError::Shape(format!("missing tensor {name}")))?;
            if q.shape != t.shape {
                return Err(ForgeError::Shape(format!("{name}: shape {:?}, expected {:?}", q.shape, t.shape)));
            }
            let ok = match &q.data {
                QuantData::F32(v) => v.len() == t.len(),
                QuantData::Q8(b) => b.len() == t.len().div_ceil(BLOCK),
                QuantData::Q4(b) => b.len() == t.len().div_ceil(BLOCK),
            };
            if !ok {
                return Err(ForgeError::Shape(format!("{name}: payload does not match shape")));
            }
        }
        Ok(QuantModel { config, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&QuantTensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &QuantTensor)> {
        self.tensors.iter()
    }

    pub fn dequantize(&self) -> Parameters<f32> {
        let records = self.tensors.iter().map(|(n, t)| (n.clone(), t.dequantize())).collect();
        assemble(&self.config, records, "quantized model").expect("tensor set checked at construction")
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        metadata(&self.config, self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape.as_slice(), t.scheme())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = metadata_bytes(&self.metadata());
        let mut buf = Vec::new();
        buf.extend_from_slice(QUANT_MAGIC);
        buf.extend_from_slice(&QUANT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.scheme().id());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let mut payload = Vec::with_capacity(t.scheme().payload_bytes(t.len()));
            match &t.data {
                QuantData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                QuantData::Q8(b) => b.iter().for_each(|b| b.write(&mut payload)),
                QuantData::Q4(b) => b.iter().for_each(|b| b.write(&mut payload)),
            }
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(&payload);
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "quantized model");
        if r.take(4)? != QUANT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != QUANT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let mut mr = Reader::new(r.take(meta_len)?, "quantized model metadata");
        let mut meta = BTreeMap::new();
        while !mr.done() {
            let k = mr.string()?;
            let v = mr.string()?;
            if meta.insert(k.clone(), v).is_some() {
                return Err(mr.err(format!("duplicate metadata key {k}")));
            }
        }
        let field = |k: &str| -> Result<usize> {
            meta.get(&format!("model.{k}"))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ForgeError::format("quantized model metadata", 0, format!("missing or bad model.{k}")))
        };
        let config = ModelConfig {
            hidden_size: field("hidden_size")?,
            intermediate_size: field("intermediate_size")?,
            max_position_embeddings: field("max_position_embeddings")?,
            num_attention_heads: field("num_attention_heads")?,
            num_hidden_layers: field("num_hidden_layers")?,
            vocab_size: field("vocab_size")?,
        };
        config.validate()?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let id = r.take(1)?[0];
            let scheme = Scheme::from_id(id).ok_or_else(|| r.err(format!("{name}: unknown scheme id {id}")))?;
            let shape = r.dims()?;
            let n: usize = shape.iter().product();
            let len = r.u64()? as usize;
            if len != scheme.payload_bytes(n) {
                return Err(r.err(format!("{name}: payload of {len} bytes, expected {}", scheme.payload_bytes(n))));
            }
            let payload = r.take(len)?;
            let data = match scheme {
                Scheme::F32 => QuantData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                Scheme::Q8 => QuantData::Q8(payload.chunks_exact(Q8_BLOCK_BYTES).map(BlockQ8::read).collect()),
                Scheme::Q4 => QuantData::Q4(payload.chunks_exact(Q4_BLOCK_BYTES).map(BlockQ4::read).collect()),
            };
            if tensors.insert(name.clone(), QuantTensor { shape, data }).is_some() {
                return Err(r.err(format!("tensor {name} appears twice")));
            }
        }
        if !r.done() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        let model = QuantModel::new(config, tensors)?;
        if model.metadata() != meta {
            return Err(ForgeError::format("quantized model metadata", 0, "scheme or padding records disagree with tensors"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| ForgeError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ForgeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::super::quantize_model;
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_size: 24,
            intermediate_size: 40,
            max_position_embeddings: 7,
            num_attention_heads: 3,
            num_hidden_layers: 2,
            vocab_size: 37,
        }
    }

    #[test]
    fn round_trip_and_estimate() {
        let p = init_params::<f32>(&cfg(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for policy in [QuantPolicy::full(), QuantPolicy::q8(), QuantPolicy::q4()] {
            let q = quantize_model(&p, &policy).unwrap();
            let path = dir.path().join("m.ntq");
            q.save(&path).unwrap();
            let size = fs::metadata(&path).unwrap().len();
            assert_eq!(size, estimate_size(&cfg(), &policy).unwrap(), "{policy:?}");
            let back = QuantModel::load(&path).unwrap();
            assert_eq!(back, q);
            assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
        }
        let full = quantize_model(&p, &QuantPolicy::full()).unwrap();
        assert_eq!(full.dequantize(), p);
    }

    #[test]
    fn size_ordering() {
        for c in [cfg(), ModelConfig::base_1b()] {
            let s = |p: QuantPolicy| estimate_size(&c, &p).unwrap();
            assert!(s(QuantPolicy::q4()) < s(QuantPolicy::q8()));
            assert!(s(QuantPolicy::q8()) < s(QuantPolicy::full()));
        }
    }

    #[test]
    fn zero_layer_size_by_hand() {
        let c = ModelConfig { num_hidden_layers: 0, ..cfg() };
        // Tensors by name: ln_f.bias, ln_f.gain, position_embedding, token_embedding.
        let meta: usize = [
            ("model.hidden_size", "24"),
            ("model.intermediate_size", "40"),
            ("model.max_position_embeddings", "7"),
            ("model.num_attention_heads", "3"),
            ("model.num_hidden_layers", "0"),
            ("model.vocab_size", "37"),
            ("scheme.ln_f.bias", "f32"),
            ("scheme.ln_f.gain", "f32"),
            ("scheme.position_embedding", "f32"),
            ("scheme.token_embedding", "f32"),
        ]
        .iter()
        .map(|(k, v)| 8 + k.len() + v.len())
        .sum();
        let rec = |name: &str, dims: &[usize]| 4 + name.len() + 1 + 4 + 8 * dims.len() + 8 + 4 * dims.iter().product::<usize>();
        let want = 16 + meta + 8 + rec("ln_f.bias", &[24]) + rec("ln_f.gain", &[24]) + rec("position_embedding", &[7, 24])
            + rec("token_embedding", &[37, 24]);
        assert_eq!(estimate_size(&c, &QuantPolicy::full()).unwrap(), want as u64);
    }

    #[test]
    fn rejects_damage() {
        let p = init_params::<f32>(&cfg(), 3).unwrap();
        let bytes = quantize_model(&p, &QuantPolicy::q4()).unwrap().to_bytes();
        assert!(QuantModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(QuantModel::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(QuantModel::from_bytes(&bad).is_err());
    }
}
