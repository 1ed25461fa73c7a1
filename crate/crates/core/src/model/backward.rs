use super::forward::{gelu_grad, ForwardCache, NormCache};
use super::params::{GradientBuffers, LayerNormParams, Parameters, Tensor};
use crate::error::{ForgeError, Result};
use crate::scalar::{gemm, Scalar, View, ViewMut};
use crate::tokenizer::TokenId;

/// Gradients of the mean cross-entropy against `targets`.
pub fn backward<S: Scalar>(params: &Parameters<S>, cache: &ForwardCache<S>, targets: &[TokenId]) -> Result<GradientBuffers<S>> {
    let mut grads = params.zeros_like();
    backward_accumulate(params, cache, targets, S::one(), &mut grads)?;
    Ok(grads)
}

/// Adds `scale ·` the gradient of the mean cross-entropy into `grads` and
/// returns that (unscaled) loss.
pub fn backward_accumulate<S: Scalar>(
    params: &Parameters<S>,
    cache: &ForwardCache<S>,
    targets: &[TokenId],
    scale: S,
    grads: &mut GradientBuffers<S>,
) -> Result<f64> {
    let cfg = &params.config;
    let (batch, seq) = (cache.batch, cache.seq);
    let n = batch * seq;
    if targets.len() != n || cache.layers.len() != params.layers.len() || cache.hf.len() != n * cfg.hidden_size {
        return Err(ForgeError::Shape("forward cache does not match parameters or targets".into()));
    }
    if grads.config != params.config {
        return Err(ForgeError::Shape("gradient buffers built for another config".into()));
    }
    let (h, heads, d, v, inter) =
        (cfg.hidden_size, cfg.num_attention_heads, cfg.head_dim(), cfg.vocab_size, cfg.intermediate_size);
    let att_scale = S::of(1.0 / (d as f64).sqrt());

    // Softmax minus one-hot, over the mean.
    let mut dlogits = cache.logits.clone();
    let mut loss = 0.0f64;
    let row_scale = scale / S::of(n as f64);
    for (row, &t) in dlogits.chunks_exact_mut(v).zip(targets) {
        if t as usize >= v {
            return Err(ForgeError::UnknownTokenId(t));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let target_logit = row[t as usize].f64();
        let mut sum = 0.0f64;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += z.f64();
        }
        loss += max.f64() + sum.ln() - target_logit;
        let inv = S::of(1.0 / sum);
        for z in row.iter_mut() {
            *z *= inv * row_scale;
        }
        row[t as usize] -= row_scale;
    }
    loss /= n as f64;

    // Tied head.
    gemm(
        S::one(),
        View::rm(&dlogits, n, v).t(),
        View::rm(&cache.hf, n, h),
        S::one(),
        ViewMut::rm(&mut grads.token_embedding.data, v, h),
    );
    let mut dhf = vec![S::zero(); n * h];
    gemm(
        S::one(),
        View::rm(&dlogits, n, v),
        View::rm(&params.token_embedding.data, v, h),
        S::zero(),
        ViewMut::rm(&mut dhf, n, h),
    );
    let mut dx = layer_norm_backward(&dhf, &cache.lnf, &params.ln_f, &mut grads.ln_f, h);

    for (l, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[l];

        // MLP branch: x += W_down · gelu(W_up · LN2(x)).
        let dg = linear_backward(&dx, &lc.g, &lp.w_down, &mut lg.w_down, &mut lg.b_down);
        let du: Vec<S> = dg.iter().zip(&lc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        debug_assert_eq!(du.len(), n * inter);
        let dh2 = linear_backward(&du, &lc.h2, &lp.w_up, &mut lg.w_up, &mut lg.b_up);
        let dres = layer_norm_backward(&dh2, &lc.ln2, &lp.ln2, &mut lg.ln2, h);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += *b);

        // Attention branch.
        let dctx = linear_backward(&dx, &lc.ctx, &lp.w_proj, &mut lg.w_proj, &mut lg.b_proj);
        let mut dq = vec![S::zero(); n * h];
        let mut dkv = vec![S::zero(); n * 2 * d];
        let block = seq * heads * seq;
        let mut datt = vec![S::zero(); block];
        for b in 0..batch {
            let att = &lc.att[b * block..(b + 1) * block];
            let dctx_b = View::rm(&dctx[b * seq * h..(b + 1) * seq * h], seq * heads, d);
            let vb = View::strided(&lc.kv, b * seq * 2 * d + d, seq, d, 2 * d, 1);
            let kb = View::strided(&lc.kv, b * seq * 2 * d, seq, d, 2 * d, 1);
            let qb = View::rm(&lc.q[b * seq * h..(b + 1) * seq * h], seq * heads, d);

            gemm(S::one(), dctx_b, vb.t(), S::zero(), ViewMut::rm(&mut datt, seq * heads, seq));
            gemm(
                S::one(),
                View::rm(att, seq * heads, seq).t(),
                dctx_b,
                S::zero(),
                ViewMut::strided(&mut dkv, b * seq * 2 * d + d, seq, d, 2 * d, 1),
            );
            // Softmax backward; masked entries have zero weight and stay zero.
            for (arow, drow) in att.chunks_exact(seq).zip(datt.chunks_exact_mut(seq)) {
                let dot: S = arow.iter().zip(drow.iter()).map(|(&a, &g)| a * g).sum();
                for (g, &a) in drow.iter_mut().zip(arow) {
                    *g = a * (*g - dot) * att_scale;
                }
            }
            gemm(
                S::one(),
                View::rm(&datt, seq * heads, seq),
                kb,
                S::zero(),
                ViewMut::rm(&mut dq[b * seq * h..(b + 1) * seq * h], seq * heads, d),
            );
            gemm(
                S::one(),
                View::rm(&datt, seq * heads, seq).t(),
                qb,
                S::zero(),
                ViewMut::strided(&mut dkv, b * seq * 2 * d, seq, d, 2 * d, 1),
            );
        }
        let mut dh1 = linear_backward(&dq, &lc.h1, &lp.w_q, &mut lg.w_q, &mut lg.b_q);
        let dh1_kv = linear_backward(&dkv, &lc.h1, &lp.w_kv, &mut lg.w_kv, &mut lg.b_kv);
        dh1.iter_mut().zip(&dh1_kv).for_each(|(a, b)| *a += *b);
        let dres = layer_norm_backward(&dh1, &lc.ln1, &lp.ln1, &mut lg.ln1, h);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += *b);
    }

    // Embedding gathers.
    for (row, &tok) in cache.inputs.iter().enumerate() {
        let t = row % seq;
        let g = &dx[row * h..(row + 1) * h];
        let te = &mut grads.token_embedding.data[tok as usize * h..(tok as usize + 1) * h];
        te.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        let pe = &mut grads.position_embedding.data[t * h..(t + 1) * h];
        pe.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
    }
    Ok(loss)
}

/// Backward of `y = x·w + b`: accumulates `dw`, `db`, returns `dx`.
fn linear_backward<S: Scalar>(dy: &[S], x: &[S], w: &Tensor<S>, dw: &mut Tensor<S>, db: &mut Tensor<S>) -> Vec<S> {
    let (inp, out) = (w.shape[0], w.shape[1]);
    let rows = dy.len() / out;
    gemm(S::one(), View::rm(x, rows, inp).t(), View::rm(dy, rows, out), S::one(), ViewMut::rm(&mut dw.data, inp, out));
    for c in 0..out {
        let s: f64 = (0..rows).map(|r| dy[r * out + c].f64()).sum();
        db.data[c] += S::of(s);
    }
    let mut dx = vec![S::zero(); rows * inp];
    gemm(S::one(), View::rm(dy, rows, out), View::rm(&w.data, inp, out).t(), S::zero(), ViewMut::rm(&mut dx, rows, inp));
    dx
}

fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &NormCache<S>,
    p: &LayerNormParams<S>,
    g: &mut LayerNormParams<S>,
    width: usize,
) -> Vec<S> {
    let rows = dy.len() / width;
    let mut dx = vec![S::zero(); dy.len()];
    let mut dgain = vec![0.0f64; width];
    let mut dbias = vec![0.0f64; width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let mut mean_d = 0.0f64;
        let mut mean_dx = 0.0f64;
        for c in 0..width {
            dgain[c] += (dyr[c] * xh[c]).f64();
            dbias[c] += dyr[c].f64();
            let dxh = (dyr[c] * p.gain.data[c]).f64();
            mean_d += dxh;
            mean_dx += dxh * xh[c].f64();
        }
        mean_d /= width as f64;
        mean_dx /= width as f64;
        let rstd = cache.rstd[r].f64();
        for c in 0..width {
            let dxh = (dyr[c] * p.gain.data[c]).f64();
            dx[r * width + c] = S::of(rstd * (dxh - mean_d - xh[c].f64() * mean_dx));
        }
    }
    for c in 0..width {
        g.gain.data[c] += S::of(dgain[c]);
        g.bias.data[c] += S::of(dbias[c]);
    }
    dx
}
