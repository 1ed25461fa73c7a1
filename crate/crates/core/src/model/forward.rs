use super::params::{LayerNormParams, Parameters, Tensor};
use crate::error::{ForgeError, Result};
use crate::scalar::{gemm, Scalar, View, ViewMut};
use crate::tokenizer::TokenId;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Debug)]
pub(crate) struct NormCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache<S> {
    pub ln1: NormCache<S>,
    pub h1: Vec<S>,
    pub q: Vec<S>,
    pub kv: Vec<S>,
    /// `[batch, seq · heads, seq]` softmax weights; row `t · heads + h`.
    pub att: Vec<S>,
    pub ctx: Vec<S>,
    pub ln2: NormCache<S>,
    pub h2: Vec<S>,
    pub u: Vec<S>,
    pub g: Vec<S>,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    pub batch: usize,
    pub seq: usize,
    pub(crate) inputs: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache<S>>,
    pub(crate) lnf: NormCache<S>,
    pub(crate) hf: Vec<S>,
    pub(crate) logits: Vec<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Attention weights of `layer` for batch row `b`, laid out `[seq · heads, seq]`.
    pub fn attention_weights(&self, layer: usize, b: usize) -> &[S] {
        let heads_rows = self.layers[layer].att.len() / (self.batch * self.seq);
        let per = heads_rows * self.seq;
        &self.layers[layer].att[b * per..(b + 1) * per]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    /// `[batch, seq, vocab]` row-major.
    pub logits: Vec<S>,
    pub cache: ForwardCache<S>,
}

pub(crate) fn layer_norm<S: Scalar>(x: &[S], p: &LayerNormParams<S>, width: usize) -> (Vec<S>, NormCache<S>) {
    let rows = x.len() / width;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / width as f64;
        let rs = S::of(1.0 / (var + LN_EPS).sqrt());
        let m = S::of(mean);
        rstd[r] = rs;
        for c in 0..width {
            let xh = (row[c] - m) * rs;
            xhat[r * width + c] = xh;
            y[r * width + c] = xh * p.gain.data[c] + p.bias.data[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// `x [rows, in] · w [in, out] + b`.
pub(crate) fn linear<S: Scalar>(x: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (inp, out) = (w.shape[0], w.shape[1]);
    let rows = x.len() / inp;
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(S::one(), View::rm(x, rows, inp), View::rm(&w.data, inp, out), S::one(), ViewMut::rm(&mut y, rows, out));
    y
}

pub(crate) fn gelu<S: Scalar>(u: S) -> S {
    let u = u.f64();
    S::of(0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh()))
}

pub(crate) fn gelu_grad<S: Scalar>(u: S) -> S {
    let u = u.f64();
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    S::of(0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u))
}

/// In-place softmax over the causal prefix of each row of one batch's scores.
fn causal_softmax<S: Scalar>(att: &mut [S], seq: usize, heads: usize) {
    for (r, row) in att.chunks_exact_mut(seq).enumerate() {
        let t = r / heads;
        let max = row[..=t].iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row[..=t].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        row[..=t].iter_mut().for_each(|v| *v *= inv);
        row[t + 1..].iter_mut().for_each(|v| *v = S::zero());
    }
}

/// Runs the decoder over `inputs`, a row-major `[batch, seq]` id matrix.
pub fn forward<S: Scalar>(params: &Parameters<S>, inputs: &[TokenId], batch: usize, seq: usize) -> Result<ForwardOutput<S>> {
    let cfg = &params.config;
    if batch == 0 || seq == 0 || inputs.len() != batch * seq {
        return Err(ForgeError::Shape(format!("inputs of length {} for batch {batch} × seq {seq}", inputs.len())));
    }
    if seq > cfg.max_position_embeddings {
        return Err(ForgeError::Shape(format!("sequence length {seq} exceeds {} positions", cfg.max_position_embeddings)));
    }
    if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ForgeError::UnknownTokenId(bad));
    }
    let (h, heads, d, v) = (cfg.hidden_size, cfg.num_attention_heads, cfg.head_dim(), cfg.vocab_size);
    let n = batch * seq;
    let scale = S::of(1.0 / (d as f64).sqrt());

    let mut x = vec![S::zero(); n * h];
    for (row, &tok) in inputs.iter().enumerate() {
        let t = row % seq;
        let e = &params.token_embedding.data[tok as usize * h..(tok as usize + 1) * h];
        let p = &params.position_embedding.data[t * h..(t + 1) * h];
        for c in 0..h {
            x[row * h + c] = e[c] + p[c];
        }
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (h1, ln1) = layer_norm(&x, &lp.ln1, h);
        let q = linear(&h1, &lp.w_q, &lp.b_q);
        let kv = linear(&h1, &lp.w_kv, &lp.b_kv);
        let mut att = vec![S::zero(); batch * seq * heads * seq];
        let mut ctx = vec![S::zero(); n * h];
        let block = seq * heads * seq;
        for b in 0..batch {
            let qb = View::rm(&q[b * seq * h..(b + 1) * seq * h], seq * heads, d);
            let kb = View::strided(&kv, b * seq * 2 * d, seq, d, 2 * d, 1);
            let vb = View::strided(&kv, b * seq * 2 * d + d, seq, d, 2 * d, 1);
            let ab = &mut att[b * block..(b + 1) * block];
            gemm(scale, qb, kb.t(), S::zero(), ViewMut::rm(ab, seq * heads, seq));
            causal_softmax(ab, seq, heads);
            gemm(
                S::one(),
                View::rm(ab, seq * heads, seq),
                vb,
                S::zero(),
                ViewMut::rm(&mut ctx[b * seq * h..(b + 1) * seq * h], seq * heads, d),
            );
        }
        let proj = linear(&ctx, &lp.w_proj, &lp.b_proj);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += *b);

        let (h2, ln2) = layer_norm(&x, &lp.ln2, h);
        let u = linear(&h2, &lp.w_up, &lp.b_up);
        let g: Vec<S> = u.iter().map(|&z| gelu(z)).collect();
        let down = linear(&g, &lp.w_down, &lp.b_down);
        x.iter_mut().zip(&down).for_each(|(a, b)| *a += *b);

        layers.push(LayerCache { ln1, h1, q, kv, att, ctx, ln2, h2, u, g });
    }

    let (hf, lnf) = layer_norm(&x, &params.ln_f, h);
    let mut logits = vec![S::zero(); n * v];
    gemm(
        S::one(),
        View::rm(&hf, n, h),
        View::rm(&params.token_embedding.data, v, h).t(),
        S::zero(),
        ViewMut::rm(&mut logits, n, v),
    );
    let cache = ForwardCache { batch, seq, inputs: inputs.to_vec(), layers, lnf, hf, logits: logits.clone() };
    Ok(ForwardOutput { logits, cache })
}

/// Mean token cross-entropy of `[rows, vocab]` logits, accumulated in f64.
pub fn cross_entropy<S: Scalar>(logits: &[S], targets: &[TokenId], vocab: usize) -> Result<f64> {
    if vocab == 0 || logits.len() != targets.len() * vocab || targets.is_empty() {
        return Err(ForgeError::Shape(format!("{} logits for {} targets over vocab {vocab}", logits.len(), targets.len())));
    }
    let mut total = 0.0f64;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t as usize >= vocab {
            return Err(ForgeError::UnknownTokenId(t));
        }
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize].f64();
    }
    Ok(total / targets.len() as f64)
}
