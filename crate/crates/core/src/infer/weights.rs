use crate::error::Result;
use crate::model::{ModelConfig, Parameters, Tensor};
use crate::quant::{dequantize_matmul, dequantize_matvec_rows, QuantModel, QuantTensor};
use crate::scalar::{gemm, View, ViewMut};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linear {
    Q,
    Kv,
    Proj,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    Attn(usize),
    Mlp(usize),
    Final,
}

/// What one decode step needs from a model, whatever its storage.
pub trait DecoderWeights {
    fn config(&self) -> &ModelConfig;
    /// Token embedding plus position embedding.
    fn embed(&self, token: TokenId, pos: usize) -> Vec<f32>;
    /// `(gain, bias)`.
    fn norm(&self, which: Norm) -> (&[f32], &[f32]);
    /// `x · W + b` for one row.
    fn linear(&self, layer: usize, which: Linear, x: &[f32]) -> Result<Vec<f32>>;
    /// Tied output head: `E · h`.
    fn logits(&self, h: &[f32]) -> Result<Vec<f32>>;
}

fn dense_row(x: &[f32], w: &Tensor<f32>, b: &[f32]) -> Vec<f32> {
    let (inp, out) = (w.shape[0], w.shape[1]);
    let mut y = b.to_vec();
    gemm(1.0, View::rm(x, 1, inp), View::rm(&w.data, inp, out), 1.0, ViewMut::rm(&mut y, 1, out));
    y
}

impl DecoderWeights for Parameters<f32> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f32> {
        let h = self.config.hidden_size;
        let e = &self.token_embedding.data[token as usize * h..(token as usize + 1) * h];
        let p = &self.position_embedding.data[pos * h..(pos + 1) * h];
        e.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    fn norm(&self, which: Norm) -> (&[f32], &[f32]) {
        let n = match which {
            Norm::Attn(l) => &self.layers[l].ln1,
            Norm::Mlp(l) => &self.layers[l].ln2,
            Norm::Final => &self.ln_f,
        };
        (&n.gain.data, &n.bias.data)
    }

    fn linear(&self, layer: usize, which: Linear, x: &[f32]) -> Result<Vec<f32>> {
        let l = &self.layers[layer];
        let (w, b) = match which {
            Linear::Q => (&l.w_q, &l.b_q),
            Linear::Kv => (&l.w_kv, &l.b_kv),
            Linear::Proj => (&l.w_proj, &l.b_proj),
            Linear::Up => (&l.w_up, &l.b_up),
            Linear::Down => (&l.w_down, &l.b_down),
        };
        Ok(dense_row(x, w, &b.data))
    }

    fn logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        let (v, hs) = (self.config.vocab_size, self.config.hidden_size);
        let mut y = vec![0.0f32; v];
        gemm(1.0, View::rm(h, 1, hs), View::rm(&self.token_embedding.data, v, hs).t(), 0.0, ViewMut::rm(&mut y, 1, v));
        Ok(y)
    }
}

/// Quantized weights read through the fused block kernels.
pub struct QuantDecoder {
    model: QuantModel,
    /// Vector tensors, always stored in full precision.
    vectors: Parameters<f32>,
}

impl QuantDecoder {
    pub fn new(model: QuantModel) -> Self {
        let vectors = model.dequantize();
        QuantDecoder { model, vectors }
    }

    pub fn model(&self) -> &QuantModel {
        &self.model
    }

    fn matrix(&self, name: &str) -> &QuantTensor {
        self.model.tensor(name).expect("tensor set checked when the model was built")
    }
}

impl DecoderWeights for QuantDecoder {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f32> {
        let e = self.matrix("token_embedding").row(token as usize);
        let p = self.matrix("position_embedding").row(pos);
        e.iter().zip(&p).map(|(a, b)| a + b).collect()
    }

    fn norm(&self, which: Norm) -> (&[f32], &[f32]) {
        self.vectors.norm(which)
    }

    fn linear(&self, layer: usize, which: Linear, x: &[f32]) -> Result<Vec<f32>> {
        let l = &self.vectors.layers[layer];
        let (name, b) = match which {
            Linear::Q => ("w_q", &l.b_q),
            Linear::Kv => ("w_kv", &l.b_kv),
            Linear::Proj => ("w_proj", &l.b_proj),
            Linear::Up => ("w_up", &l.b_up),
            Linear::Down => ("w_down", &l.b_down),
        };
        let mut y = dequantize_matmul(x, self.matrix(&format!("layers.{layer}.{name}")))?;
        y.iter_mut().zip(&b.data).for_each(|(a, b)| *a += b);
        Ok(y)
    }

    fn logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        dequantize_matvec_rows(self.matrix("token_embedding"), h)
    }
}
