#![allow(dead_code)]

use forge_core::model::{cross_entropy, forward, Parameters};
use forge_core::tokenizer::TokenId;

use std::sync::atomic::{AtomicU8, Ordering};

// 0 = nothing reported, 1 = passed, 2 = failed.
static STATE: AtomicU8 = AtomicU8::new(0);

pub fn reset() {
    STATE.store(0, Ordering::SeqCst);
}

pub fn reported() -> bool {
    STATE.load(Ordering::SeqCst) != 0
}

pub fn passed() -> bool {
    STATE.load(Ordering::SeqCst) == 1
}

/// Prints one acceptance line and records the verdict.
pub fn criterion(id: u32, name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("[{}] criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    STATE.store(if pass { 1 } else { 2 }, Ordering::SeqCst);
}

pub fn loss_of(p: &Parameters<f64>, inputs: &[TokenId], targets: &[TokenId], batch: usize, seq: usize) -> f64 {
    let out = forward(p, inputs, batch, seq).unwrap();
    cross_entropy(&out.logits, targets, p.config.vocab_size).unwrap()
}

/// Central difference of the loss along one coordinate of tensor `ti`.
pub fn central_difference(
    p: &Parameters<f64>,
    ti: usize,
    idx: usize,
    step: f64,
    inputs: &[TokenId],
    targets: &[TokenId],
    batch: usize,
    seq: usize,
) -> f64 {
    let mut plus = p.clone();
    plus.tensors_mut()[ti].1.data[idx] += step;
    let mut minus = p.clone();
    minus.tensors_mut()[ti].1.data[idx] -= step;
    (loss_of(&plus, inputs, targets, batch, seq) - loss_of(&minus, inputs, targets, batch, seq)) / (2.0 * step)
}
