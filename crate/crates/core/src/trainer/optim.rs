use super::{lr_at, TrainConfig};
use crate::error::{ForgeError, Result};
use crate::model::Parameters;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper { beta1: cfg.beta1, beta2: cfg.beta2, epsilon: cfg.epsilon, weight_decay: cfg.weight_decay }
    }
}

/// Adam moments plus the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub step: u64,
    pub m: Parameters<S>,
    pub v: Parameters<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &Parameters<S>) -> Self {
        OptimizerState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// Only matrices decay; norms and biases are exempt.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() == 2
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_update<S: Scalar>(
    params: &mut Parameters<S>,
    grads: &Parameters<S>,
    state: &mut OptimizerState<S>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(ForgeError::Shape("optimizer buffers do not match parameters".into()));
    }
    let next_step = state.step + 1;
    for (name, g) in grads.tensors() {
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(ForgeError::Divergence { step: next_step, tensor: name });
        }
    }
    state.step = next_step;
    let bc1 = 1.0 - hyper.beta1.powi(next_step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(next_step as i32);
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors.zip(moments) {
        let decay = if decays(&p.shape) { 1.0 - lr * hyper.weight_decay } else { 1.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i].f64();
            let mi = hyper.beta1 * m.data[i].f64() + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data[i].f64() + (1.0 - hyper.beta2) * gi * gi;
            m.data[i] = S::of(mi);
            v.data[i] = S::of(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.epsilon);
            p.data[i] = S::of(p.data[i].f64() * decay - update);
        }
    }
    Ok(())
}

/// Update with the scheduled learning rate for the next step.
pub fn adamw_step<S: Scalar>(
    params: &mut Parameters<S>,
    grads: &Parameters<S>,
    state: &mut OptimizerState<S>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let lr = lr_at(cfg, state.step + 1);
    adamw_update(params, grads, state, &AdamHyper::from(cfg), lr)?;
    Ok(lr)
}

/// Rescales gradients to at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut Parameters<S>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::of(max_norm / norm);
        for (_, t) in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
