//! Weight-only block quantization (8- and 4-bit) and the `NTQ1` container.

mod block;
mod container;

use std::collections::BTreeMap;

pub use block::{BlockQ4, BlockQ8, BLOCK, Q4_BLOCK_BYTES, Q8_BLOCK_BYTES};
pub use container::{estimate_size, QuantModel, QUANT_MAGIC, QUANT_VERSION};

use crate::error::{ForgeError, Result};
use crate::model::{ModelConfig, Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    F32 = 0,
    Q8 = 1,
    Q4 = 2,
}

impl Scheme {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Scheme::F32),
            1 => Some(Scheme::Q8),
            2 => Some(Scheme::Q4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::F32 => "f32",
            Scheme::Q8 => "q8",
            Scheme::Q4 => "q4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Scheme::F32),
            "q8" => Some(Scheme::Q8),
            "q4" => Some(Scheme::Q4),
            _ => None,
        }
    }

    /// Stored bytes for `elements` values, padding included.
    pub fn payload_bytes(self, elements: usize) -> usize {
        let blocks = elements.div_ceil(BLOCK);
        match self {
            Scheme::F32 => elements * 4,
            Scheme::Q8 => blocks * Q8_BLOCK_BYTES,
            Scheme::Q4 => blocks * Q4_BLOCK_BYTES,
        }
    }
}

/// Which scheme each tensor gets. Vectors (norms and biases) are always f32.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantPolicy {
    pub matrices: Scheme,
    pub overrides: BTreeMap<String, Scheme>,
}

impl QuantPolicy {
    pub fn full() -> Self {
        QuantPolicy { matrices: Scheme::F32, overrides: BTreeMap::new() }
    }

    pub fn q8() -> Self {
        QuantPolicy { matrices: Scheme::Q8, overrides: BTreeMap::new() }
    }

    /// 4-bit matrices with the token embedding (also the output head) kept at 8 bits.
    pub fn q4() -> Self {
        QuantPolicy { matrices: Scheme::Q4, overrides: [("token_embedding".to_string(), Scheme::Q8)].into() }
    }

    pub fn for_scheme(s: Scheme) -> Self {
        match s {
            Scheme::F32 => Self::full(),
            Scheme::Q8 => Self::q8(),
            Scheme::Q4 => Self::q4(),
        }
    }

    pub fn with_override(mut self, name: &str, s: Scheme) -> Self {
        self.overrides.insert(name.to_string(), s);
        self
    }

    pub fn scheme_for(&self, name: &str, shape: &[usize]) -> Scheme {
        if shape.len() < 2 {
            return Scheme::F32;
        }
        self.overrides.get(name).copied().unwrap_or(self.matrices)
    }

    /// `(name, shape, scheme)` for every tensor of `cfg`, sorted by name.
    pub fn plan(&self, cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Scheme)>> {
        cfg.validate()?;
        let blank = Parameters::<f32>::zeros(cfg);
        let mut out: Vec<_> =
            blank.tensors().into_iter().map(|(n, t)| { let s = self.scheme_for(&n, &t.shape); (n, t.shape.clone(), s) }).collect();
        for name in self.overrides.keys() {
            if !out.iter().any(|(n, _, _)| n == name) {
                return Err(ForgeError::Config(format!("policy names unknown tensor {name}")));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantData {
    F32(Vec<f32>),
    Q8(Vec<BlockQ8>),
    Q4(Vec<BlockQ4>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub data: QuantData,
}

impl QuantTensor {
    pub fn quantize(t: &Tensor<f32>, scheme: Scheme) -> Result<Self> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(ForgeError::NonFinite("tensor to quantize".into()));
        }
        let blocks = || -> Vec<[f32; BLOCK]> {
            t.data
                .chunks(BLOCK)
                .map(|c| {
                    let mut b = [0.0f32; BLOCK];
                    b[..c.len()].copy_from_slice(c);
                    b
                })
                .collect()
        };
        let data = match scheme {
            Scheme::F32 => QuantData::F32(t.data.clone()),
            Scheme::Q8 => QuantData::Q8(blocks().iter().map(|b| BlockQ8::quantize(b)).collect::<Result<_>>()?),
            Scheme::Q4 => QuantData::Q4(blocks().iter().map(|b| BlockQ4::quantize(b)).collect::<Result<_>>()?),
        };
        Ok(QuantTensor { shape: t.shape.clone(), data })
    }

    pub fn scheme(&self) -> Scheme {
        match self.data {
            QuantData::F32(_) => Scheme::F32,
            QuantData::Q8(_) => Scheme::Q8,
            QuantData::Q4(_) => Scheme::Q4,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero values appended to fill the last block.
    pub fn padding(&self) -> usize {
        match self.scheme() {
            Scheme::F32 => 0,
            _ => self.len().div_ceil(BLOCK) * BLOCK - self.len(),
        }
    }

    /// Value at flat row-major index `k`.
    pub fn value(&self, k: usize) -> f32 {
        match &self.data {
            QuantData::F32(v) => v[k],
            QuantData::Q8(b) => b[k / BLOCK].value(k % BLOCK),
            QuantData::Q4(b) => b[k / BLOCK].value(k % BLOCK),
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let n = self.len();
        let data = match &self.data {
            QuantData::F32(v) => v.clone(),
            QuantData::Q8(b) => b.iter().flat_map(|b| b.dequantize()).take(n).collect(),
            QuantData::Q4(b) => b.iter().flat_map(|b| b.dequantize()).take(n).collect(),
        };
        Tensor { shape: self.shape.clone(), data }
    }

    /// Row `r` of a rank-2 tensor, dequantized.
    pub fn row(&self, r: usize) -> Vec<f32> {
        let cols = self.shape[1];
        (r * cols..(r + 1) * cols).map(|k| self.value(k)).collect()
    }
}

/// `y = x · W` for a `[in, out]` quantized matrix, decoding each block once.
pub fn dequantize_matmul(x: &[f32], w: &QuantTensor) -> Result<Vec<f32>> {
    if w.shape.len() != 2 || w.shape[0] != x.len() {
        return Err(ForgeError::Shape(format!("cannot multiply a length-{} row by {:?}", x.len(), w.shape)));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let n = rows * cols;
    let mut y = vec![0.0f32; cols];
    let mut fused = |base: usize, scale: f32, code: &dyn Fn(usize) -> f32| {
        let end = (base + BLOCK).min(n);
        let mut k = base;
        while k < end {
            let (r, c0) = (k / cols, k % cols);
            let run = (cols - c0).min(end - k);
            let xs = x[r] * scale;
            for j in 0..run {
                y[c0 + j] += xs * code(k - base + j);
            }
            k += run;
        }
    };
    match &w.data {
        QuantData::F32(v) => {
            for (r, &xr) in x.iter().enumerate() {
                for (yj, &wv) in y.iter_mut().zip(&v[r * cols..(r + 1) * cols]) {
                    *yj += xr * wv;
                }
            }
        }
        QuantData::Q8(blocks) => {
            for (b, blk) in blocks.iter().enumerate() {
                fused(b * BLOCK, blk.scale, &|i| blk.codes[i] as f32);
            }
        }
        QuantData::Q4(blocks) => {
            for (b, blk) in blocks.iter().enumerate() {
                fused(b * BLOCK, blk.scale, &|i| blk.code(i) as f32 - 8.0);
            }
        }
    }
    Ok(y)
}

/// `y = W · h` for a `[rows, cols]` quantized matrix, as in a tied output head.
pub fn dequantize_matvec_rows(w: &QuantTensor, h: &[f32]) -> Result<Vec<f32>> {
    if w.shape.len() != 2 || w.shape[1] != h.len() {
        return Err(ForgeError::Shape(format!("cannot multiply {:?} by a length-{} column", w.shape, h.len())));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    let n = rows * cols;
    let mut y = vec![0.0f32; rows];
    let mut fused = |base: usize, scale: f32, code: &dyn Fn(usize) -> f32| {
        let end = (base + BLOCK).min(n);
        let mut k = base;
        while k < end {
            let (r, c0) = (k / cols, k % cols);
            let run = (cols - c0).min(end - k);
            let mut acc = 0.0f32;
            for j in 0..run {
                acc += code(k - base + j) * h[c0 + j];
            }
            y[r] += scale * acc;
            k += run;
        }
    };
    match &w.data {
        QuantData::F32(v) => {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr = v[r * cols..(r + 1) * cols].iter().zip(h).map(|(a, b)| a * b).sum();
            }
        }
        QuantData::Q8(blocks) => {
            for (b, blk) in blocks.iter().enumerate() {
                fused(b * BLOCK, blk.scale, &|i| blk.codes[i] as f32);
            }
        }
        QuantData::Q4(blocks) => {
            for (b, blk) in blocks.iter().enumerate() {
                fused(b * BLOCK, blk.scale, &|i| blk.code(i) as f32 - 8.0);
            }
        }
    }
    Ok(y)
}

/// Quantizes every tensor of `params` per `policy`.
pub fn quantize_model(params: &Parameters<f32>, policy: &QuantPolicy) -> Result<QuantModel> {
    params.validate()?;
    let plan = policy.plan(&params.config)?;
    let by_name: BTreeMap<String, &Tensor<f32>> = params.tensors().into_iter().collect();
    let mut tensors = BTreeMap::new();
    for (name, _, scheme) in plan {
        let q = QuantTensor::quantize(by_name[&name], scheme)?;
        tensors.insert(name, q);
    }
    QuantModel::new(params.config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn dense(x: &[f32], w: &Tensor<f32>) -> Vec<f64> {
        let (r, c) = (w.shape[0], w.shape[1]);
        (0..c).map(|j| (0..r).map(|i| x[i] as f64 * w.data[i * c + j] as f64).sum()).collect()
    }

    #[test]
    fn identity_matmul() {
        let n = 32;
        let mut w = Tensor::<f32>::zeros(&[n, n]);
        for i in 0..n {
            w.data[i * n + i] = 127.0;
        }
        let q = QuantTensor::quantize(&w, Scheme::Q8).unwrap();
        let QuantData::Q8(blocks) = &q.data else { panic!() };
        assert!(blocks.iter().all(|b| b.scale == 1.0));
        let x: Vec<f32> = (0..n).map(|i| i as f32 - 4.5).collect();
        let y = dequantize_matmul(&x, &q).unwrap();
        let want: Vec<f32> = x.iter().map(|v| v * 127.0).collect();
        assert_eq!(y, want);
    }

    #[test]
    fn zero_matmul() {
        let q = QuantTensor::quantize(&Tensor::zeros(&[8, 12]), Scheme::Q4).unwrap();
        assert_eq!(dequantize_matmul(&[1.0; 8], &q).unwrap(), vec![0.0; 12]);
        assert!(dequantize_matmul(&[1.0; 7], &q).is_err());
    }

    #[test]
    fn fused_equals_unfused() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        // 64×64 spans whole rows per block; 10×7 makes blocks straddle rows and pad.
        for (r, c) in [(64, 64), (10, 7), (3, 40)] {
            let w = Tensor { shape: vec![r, c], data: (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let x: Vec<f32> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for s in [Scheme::F32, Scheme::Q8, Scheme::Q4] {
                let q = QuantTensor::quantize(&w, s).unwrap();
                let fused = dequantize_matmul(&x, &q).unwrap();
                let reference = dense(&x, &q.dequantize());
                let norm = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
                for (a, b) in fused.iter().zip(&reference) {
                    assert!((*a as f64 - b).abs() <= 1e-5 * norm.max(1.0), "{s:?} {a} {b}");
                }
                let hcol: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let rows = dequantize_matvec_rows(&q, &hcol).unwrap();
                let dq = q.dequantize();
                for (i, a) in rows.iter().enumerate() {
                    let b: f64 = (0..c).map(|j| dq.data[i * c + j] as f64 * hcol[j] as f64).sum();
                    assert!((*a as f64 - b).abs() <= 1e-5 * c as f64, "{s:?} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn padding_is_recorded_and_dropped() {
        let t = Tensor { shape: vec![5, 9], data: (0..45).map(|i| i as f32).collect() };
        let q = QuantTensor::quantize(&t, Scheme::Q8).unwrap();
        assert_eq!(q.padding(), 19);
        assert_eq!(q.dequantize().data.len(), 45);
        assert_eq!(QuantTensor::quantize(&t, Scheme::F32).unwrap().padding(), 0);
    }

    #[test]
    fn policy_schemes() {
        let cfg = ModelConfig {
            hidden_size: 32,
            intermediate_size: 64,
            max_position_embeddings: 8,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            vocab_size: 40,
        };
        let plan = QuantPolicy::q4().plan(&cfg).unwrap();
        let get = |n: &str| plan.iter().find(|p| p.0 == n).unwrap().2;
        assert_eq!(get("token_embedding"), Scheme::Q8);
        assert_eq!(get("position_embedding"), Scheme::Q4);
        assert_eq!(get("layers.0.w_up"), Scheme::Q4);
        assert_eq!(get("layers.0.b_up"), Scheme::F32);
        assert_eq!(get("ln_f.gain"), Scheme::F32);
        assert!(plan.windows(2).all(|w| w[0].0 < w[1].0));
        let bad = QuantPolicy::q8().with_override("layers.9.w_q", Scheme::Q4);
        assert!(bad.plan(&cfg).unwrap_err().to_string().contains("layers.9.w_q"));
        let p = init_params::<f32>(&cfg, 0).unwrap();
        assert!(quantize_model(&p, &bad).is_err());
    }
}
