use rand_distr::{Distribution, Normal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::ModelConfig;
use crate::error::{ForgeError, Result};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| T::of(x.f64())).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub ln1: LayerNormParams<S>,
    pub w_q: Tensor<S>,
    pub b_q: Tensor<S>,
    pub w_kv: Tensor<S>,
    pub b_kv: Tensor<S>,
    pub w_proj: Tensor<S>,
    pub b_proj: Tensor<S>,
    pub ln2: LayerNormParams<S>,
    pub w_up: Tensor<S>,
    pub b_up: Tensor<S>,
    pub w_down: Tensor<S>,
    pub b_down: Tensor<S>,
}

/// All trainable tensors. `token_embedding` doubles as the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub ln_f: LayerNormParams<S>,
}

/// Gradients share the parameter layout.
pub type GradientBuffers<S> = Parameters<S>;

impl<S: Scalar> Parameters<S> {
    /// Every tensor zeroed except layer-norm gains (one).
    fn blank(cfg: &ModelConfig, gain: S) -> Self {
        let (h, i, d) = (cfg.hidden_size, cfg.intermediate_size, cfg.head_dim());
        let ln = || LayerNormParams { gain: Tensor::filled(&[h], gain), bias: Tensor::zeros(&[h]) };
        let layer = || LayerParams {
            ln1: ln(),
            w_q: Tensor::zeros(&[h, h]),
            b_q: Tensor::zeros(&[h]),
            w_kv: Tensor::zeros(&[h, 2 * d]),
            b_kv: Tensor::zeros(&[2 * d]),
            w_proj: Tensor::zeros(&[h, h]),
            b_proj: Tensor::zeros(&[h]),
            ln2: ln(),
            w_up: Tensor::zeros(&[h, i]),
            b_up: Tensor::zeros(&[i]),
            w_down: Tensor::zeros(&[i, h]),
            b_down: Tensor::zeros(&[h]),
        };
        Parameters {
            config: *cfg,
            token_embedding: Tensor::zeros(&[cfg.vocab_size, h]),
            position_embedding: Tensor::zeros(&[cfg.max_position_embeddings, h]),
            layers: (0..cfg.num_hidden_layers).map(|_| layer()).collect(),
            ln_f: ln(),
        }
    }

    /// All-zero buffers congruent with a model of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::blank(cfg, S::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Tensors in canonical order, named by field path.
    pub fn tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (n, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{n}.{s}");
            out.extend([
                (p("ln1.gain"), &l.ln1.gain),
                (p("ln1.bias"), &l.ln1.bias),
                (p("w_q"), &l.w_q),
                (p("b_q"), &l.b_q),
                (p("w_kv"), &l.w_kv),
                (p("b_kv"), &l.b_kv),
                (p("w_proj"), &l.w_proj),
                (p("b_proj"), &l.b_proj),
                (p("ln2.gain"), &l.ln2.gain),
                (p("ln2.bias"), &l.ln2.bias),
                (p("w_up"), &l.w_up),
                (p("b_up"), &l.b_up),
                (p("w_down"), &l.w_down),
                (p("b_down"), &l.b_down),
            ]);
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (n, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{n}.{s}");
            out.extend([
                (p("ln1.gain"), &mut l.ln1.gain),
                (p("ln1.bias"), &mut l.ln1.bias),
                (p("w_q"), &mut l.w_q),
                (p("b_q"), &mut l.b_q),
                (p("w_kv"), &mut l.w_kv),
                (p("b_kv"), &mut l.b_kv),
                (p("w_proj"), &mut l.w_proj),
                (p("b_proj"), &mut l.b_proj),
                (p("ln2.gain"), &mut l.ln2.gain),
                (p("ln2.bias"), &mut l.ln2.bias),
                (p("w_up"), &mut l.w_up),
                (p("b_up"), &mut l.b_up),
                (p("w_down"), &mut l.w_down),
                (p("b_down"), &mut l.b_down),
            ]);
        }
        out.push(("ln_f.gain".to_string(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &mut self.ln_f.bias));
        out
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        let mut out = Parameters::<T>::zeros(&self.config);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Checks shapes against the config and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config);
        for ((name, t), (_, r)) in self.tensors().into_iter().zip(reference.tensors()) {
            if t.shape != r.shape || t.data.len() != r.data.len() {
                return Err(ForgeError::Shape(format!("{name}: shape {:?}, expected {:?}", t.shape, r.shape)));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(ForgeError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// N(0, 0.02) weights and embeddings, zero biases, unit norm gains; the two
/// residual output projections are further scaled by 1/sqrt(2·layers).
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<S>> {
    cfg.validate()?;
    let mut p = Parameters::<S>::blank(cfg, S::one());
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let residual_scale = 1.0 / (2.0 * cfg.num_hidden_layers.max(1) as f64).sqrt();
    for (name, t) in p.tensors_mut() {
        if t.shape.len() != 2 {
            continue;
        }
        let std = if name.ends_with("w_proj") || name.ends_with("w_down") { INIT_STD * residual_scale } else { INIT_STD };
        let normal = Normal::new(0.0, std).expect("positive std");
        for x in t.data.iter_mut() {
            *x = S::of(normal.sample(&mut rng));
        }
    }
    Ok(p)
}
