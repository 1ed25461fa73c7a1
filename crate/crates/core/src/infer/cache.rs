use super::weights::{DecoderWeights, Linear, Norm};
use crate::error::{ForgeError, Result};
use crate::model::{gelu, LN_EPS};
use crate::tokenizer::TokenId;

/// Keys and values for one shared attention head per layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    capacity: usize,
    head_dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    filled: usize,
}

impl KvCache {
    pub fn new(layers: usize, head_dim: usize, capacity: usize) -> Self {
        KvCache {
            capacity,
            head_dim,
            keys: vec![vec![0.0; capacity * head_dim]; layers],
            values: vec![vec![0.0; capacity * head_dim]; layers],
            filled: 0,
        }
    }

    /// A cache spanning every position of `model`.
    pub fn for_model<W: DecoderWeights + ?Sized>(model: &W) -> Self {
        let c = model.config();
        Self::new(c.num_hidden_layers, c.head_dim(), c.max_position_embeddings)
    }

    pub fn filled_length(&self) -> usize {
        self.filled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bytes_per_token_per_layer(&self) -> usize {
        2 * self.head_dim * std::mem::size_of::<f32>()
    }

    pub fn allocated_bytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|b| b.len() * std::mem::size_of::<f32>()).sum()
    }
}

fn layer_norm_row(x: &[f32], (gain, bias): (&[f32], &[f32])) -> Vec<f32> {
    let w = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / w;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w;
    let rs = (1.0 / (var + LN_EPS).sqrt()) as f32;
    let m = mean as f32;
    x.iter().zip(gain).zip(bias).map(|((&v, &g), &b)| (v - m) * rs * g + b).collect()
}

/// Feeds one token at the next free position and returns next-token logits.
pub fn decode_step<W: DecoderWeights + ?Sized>(model: &W, cache: &mut KvCache, token: TokenId) -> Result<Vec<f32>> {
    let cfg = *model.config();
    if cache.filled >= cache.capacity || cache.filled >= cfg.max_position_embeddings {
        return Err(ForgeError::ContextOverflow { capacity: cache.capacity });
    }
    if token as usize >= cfg.vocab_size {
        return Err(ForgeError::UnknownTokenId(token));
    }
    if cache.keys.len() != cfg.num_hidden_layers || cache.head_dim != cfg.head_dim() {
        return Err(ForgeError::Shape("cache built for another model".into()));
    }
    let (heads, d) = (cfg.num_attention_heads, cfg.head_dim());
    let pos = cache.filled;
    let scale = 1.0 / (d as f32).sqrt();
    let mut x = model.embed(token, pos);
    let mut scores = vec![0.0f32; pos + 1];
    for l in 0..cfg.num_hidden_layers {
        let h1 = layer_norm_row(&x, model.norm(Norm::Attn(l)));
        let q = model.linear(l, Linear::Q, &h1)?;
        let kv = model.linear(l, Linear::Kv, &h1)?;
        cache.keys[l][pos * d..(pos + 1) * d].copy_from_slice(&kv[..d]);
        cache.values[l][pos * d..(pos + 1) * d].copy_from_slice(&kv[d..]);
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let mut ctx = vec![0.0f32; cfg.hidden_size];
        for hh in 0..heads {
            let qh = &q[hh * d..(hh + 1) * d];
            for (t, s) in scores.iter_mut().enumerate() {
                *s = scale * qh.iter().zip(&keys[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum::<f32>();
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            scores.iter_mut().for_each(|s| {
                *s = (*s - max).exp();
                sum += *s;
            });
            let out = &mut ctx[hh * d..(hh + 1) * d];
            for (t, &s) in scores.iter().enumerate() {
                let w = s / sum;
                out.iter_mut().zip(&values[t * d..(t + 1) * d]).for_each(|(o, v)| *o += w * v);
            }
        }
        let proj = model.linear(l, Linear::Proj, &ctx)?;
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        let h2 = layer_norm_row(&x, model.norm(Norm::Mlp(l)));
        let mut u = model.linear(l, Linear::Up, &h2)?;
        u.iter_mut().for_each(|z| *z = gelu(*z));
        let down = model.linear(l, Linear::Down, &u)?;
        x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
    }
    cache.filled += 1;
    let hf = layer_norm_row(&x, model.norm(Norm::Final));
    model.logits(&hf)
}

/// Runs the prompt through the cache; returns it with the last position's logits.
pub fn prefill<W: DecoderWeights + ?Sized>(model: &W, prompt: &[TokenId]) -> Result<(KvCache, Vec<f32>)> {
    if prompt.is_empty() {
        return Err(ForgeError::EmptyPrompt);
    }
    let cap = model.config().max_position_embeddings;
    if prompt.len() > cap {
        return Err(ForgeError::ContextOverflow { capacity: cap });
    }
    let mut cache = KvCache::for_model(model);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decode_step(model, &mut cache, t)?;
    }
    Ok((cache, logits))
}
