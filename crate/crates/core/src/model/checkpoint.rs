//! `NTCKPT1\0` checkpoint files.
//!
//! Layout: magic, `u32` version, six `u64` config fields (hidden,
//! intermediate, positions, heads, layers, vocab), then tensor records until
//! end of file. A record is `u32` name length, name bytes, `u32` rank, `u64`
//! per dimension and the little-endian `f32` payload.

use std::fs;
use std::path::Path;

use super::params::{Parameters, Tensor};
use super::ModelConfig;
use crate::error::{ForgeError, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"NTCKPT1\0";
pub const CKPT_VERSION: u32 = 1;

pub fn write_tensor_record(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: impl Into<String>) -> Self {
        Reader { buf, pos: 0, what: what.into() }
    }

    pub fn err(&self, msg: impl Into<String>) -> ForgeError {
        ForgeError::format(self.what.clone(), self.pos, msg)
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| self.u64().map(|d| d as usize)).collect()
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Reads `(name, tensor)` records until the reader is exhausted.
pub fn read_tensor_records(buf: &[u8], what: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(buf, what);
    read_records(&mut r)
}

pub(crate) fn read_records(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    while !r.done() {
        let name = r.string()?;
        let shape = r.dims()?;
        let data = r.f32s(shape.iter().product())?;
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

pub(crate) fn write_config(buf: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.hidden_size,
        cfg.intermediate_size,
        cfg.max_position_embeddings,
        cfg.num_attention_heads,
        cfg.num_hidden_layers,
        cfg.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
}

pub(crate) fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let mut f = [0usize; 6];
    for x in f.iter_mut() {
        *x = r.u64()? as usize;
    }
    let cfg = ModelConfig {
        hidden_size: f[0],
        intermediate_size: f[1],
        max_position_embeddings: f[2],
        num_attention_heads: f[3],
        num_hidden_layers: f[4],
        vocab_size: f[5],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fills a parameter set from named records, requiring each tensor exactly once.
pub(crate) fn assemble(cfg: &ModelConfig, records: Vec<(String, Tensor<f32>)>, what: &str) -> Result<Parameters<f32>> {
    let mut params = Parameters::<f32>::zeros(cfg);
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> = std::collections::HashMap::new();
    for (name, t) in records {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(ForgeError::format(what, 0, format!("tensor {name} appears twice")));
        }
    }
    for (name, slot) in params.tensors_mut() {
        let t = by_name.remove(&name).ok_or_else(|| ForgeError::format(what, 0, format!("missing tensor {name}")))?;
        if t.shape != slot.shape {
            return Err(ForgeError::format(what, 0, format!("{name}: shape {:?}, expected {:?}", t.shape, slot.shape)));
        }
        *slot = t;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(ForgeError::format(what, 0, format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

/// Serialization of float parameters.
pub trait Checkpoint: Sized {
    fn to_checkpoint_bytes(&self) -> Vec<u8>;
    fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_checkpoint_bytes()).map_err(|e| ForgeError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ForgeError::io(path, e))
    }

    fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
        Self::from_checkpoint_bytes(&buf)
    }
}

impl Checkpoint for Parameters<f32> {
    fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.num_elements() * 4);
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        write_config(&mut buf, &self.config);
        for (name, t) in self.tensors() {
            write_tensor_record(&mut buf, &name, &t.shape, &t.data);
        }
        buf
    }

    fn from_checkpoint_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        if r.take(8)? != CKPT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let cfg = read_config(&mut r)?;
        let records = read_records(&mut r)?;
        assemble(&cfg, records, "checkpoint")
    }
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            intermediate_size: 32,
            max_position_embeddings: 8,
            num_attention_heads: 2,
            num_hidden_layers: 2,
            vocab_size: 30,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let p = init_params::<f32>(&cfg(), 9).unwrap();
        let bytes = p.to_checkpoint_bytes();
        let back = Parameters::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert_eq!(&bytes[..8], CKPT_MAGIC);
    }

    #[test]
    fn rejects_damage() {
        let p = init_params::<f32>(&cfg(), 9).unwrap();
        let bytes = p.to_checkpoint_bytes();
        assert!(Parameters::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(Parameters::<f32>::from_checkpoint_bytes(&bad).is_err());
        // Drop the last record (ln_f.bias: 4 + 9 + 4 + 8 + 16 · 4 bytes).
        let cut = bytes.len() - (4 + 9 + 4 + 8 + 64);
        let err = Parameters::<f32>::from_checkpoint_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.to_string().contains("missing tensor ln_f.bias"), "{err}");
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        assert_eq!(Parameters::<f32>::load(&path).unwrap(), p);
    }
}
