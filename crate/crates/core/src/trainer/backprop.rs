//! Reverse-mode gradients for the fixed block architecture.
//!
//! The forward here is a plain, hook-free evaluation of the same math as
//! [`crate::model::forward`], keeping every intermediate needed by the
//! backward pass. It doubles as the reference forward for hook tests.

use crate::model::{check_tokens, gather_head, scatter_head, ModelError, Params};
use crate::model::config::NORM_EPS;
use crate::tensor::{gelu, gelu_grad, gemm_into, inv_rms, rms_norm_row, rope_in_place, softmax_in_place, Scalar};

use super::TrainError;

/// Parameter-shaped gradient buffers.
pub type GradientSet<T> = Params<T>;

/// One training sequence and the positions whose next token is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// `(position, target id)`: logits at `position` should predict `target`.
    pub targets: Vec<(usize, u32)>,
}

struct LayerCache<T> {
    x: Vec<T>,
    r1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[H, N, N]`
    probs: Vec<T>,
    z: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    m: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    rf: Vec<T>,
    y: Vec<T>,
    /// `[N, vocab]`
    pub logits: Vec<T>,
}

fn norm_rows<T: Scalar>(x: &[T], gain: &[T], n: usize, d: usize, r: &mut [T], out: &mut [T]) {
    let eps = T::from_f64_lossy(NORM_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        r[i] = inv_rms(row, eps);
        rms_norm_row(row, gain, eps, &mut out[i * d..(i + 1) * d]);
    }
}

/// Backward of `y = gain * x * r` row by row. Adds into `dx` and `dgain`.
fn norm_rows_backward<T: Scalar>(
    x: &[T],
    r: &[T],
    gain: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let ri = r[i];
        let mut dot = T::zero();
        for j in 0..d {
            let gdy = gain[j] * dyr[j];
            dot = dot + gdy * xr[j];
            dgain[j] = dgain[j] + dyr[j] * xr[j] * ri;
        }
        let coef = ri * ri * ri * dot * inv_d;
        for j in 0..d {
            dx[i * d + j] = dx[i * d + j] + gain[j] * dyr[j] * ri - coef * xr[j];
        }
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// Plain forward pass keeping all intermediates.
    pub fn run(params: &Params<T>, tokens: &[u32]) -> Result<Self, ModelError> {
        let cfg = &params.config;
        check_tokens(cfg, tokens)?;
        let n = tokens.len();
        let (d, dh, nh, dm, vocab) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.vocab_size);
        let base = cfg.rope_base as f64;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        let mut x = vec![T::zero(); n * d];
        for (i, &t) in tokens.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(params.embed.row(t as usize));
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut zh = vec![T::zero(); n * dh];
        for layer in &params.layers {
            let mut r1 = vec![T::zero(); n];
            let mut a = vec![T::zero(); n * d];
            norm_rows(&x, layer.attn_norm.data(), n, d, &mut r1, &mut a);
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            gemm_into(n, d, d, &a, false, layer.wq.data(), false, &mut q, false);
            gemm_into(n, d, d, &a, false, layer.wk.data(), false, &mut k, false);
            gemm_into(n, d, d, &a, false, layer.wv.data(), false, &mut v, false);
            for i in 0..n {
                for h in 0..nh {
                    let r = i * d + h * dh..i * d + (h + 1) * dh;
                    rope_in_place(&mut q[r.clone()], i, base, false);
                    rope_in_place(&mut k[r], i, base, false);
                }
            }
            let mut probs = vec![T::zero(); nh * n * n];
            let mut z = vec![T::zero(); n * d];
            for h in 0..nh {
                gather_head(&q, n, d, dh, h, &mut qh);
                gather_head(&k, n, d, dh, h, &mut kh);
                gather_head(&v, n, d, dh, h, &mut vh);
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                gemm_into(n, dh, n, &qh, false, &kh, true, p, false);
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    for s in row[..=i].iter_mut() {
                        *s = *s * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|s| *s = T::zero());
                }
                gemm_into(n, n, dh, p, false, &vh, false, &mut zh, false);
                scatter_head(&zh, n, d, dh, h, &mut z);
            }
            let mut attn_out = vec![T::zero(); n * d];
            gemm_into(n, d, d, &z, false, layer.wo.data(), false, &mut attn_out, false);
            let mut x_mid = x.clone();
            for (xi, &oi) in x_mid.iter_mut().zip(&attn_out) {
                *xi = *xi + oi;
            }
            let mut r2 = vec![T::zero(); n];
            let mut m = vec![T::zero(); n * d];
            norm_rows(&x_mid, layer.mlp_norm.data(), n, d, &mut r2, &mut m);
            let mut u = vec![T::zero(); n * dm];
            gemm_into(n, d, dm, &m, false, layer.w_in.data(), false, &mut u, false);
            let g: Vec<T> = u.iter().map(|&ui| gelu(ui)).collect();
            let mut f = vec![T::zero(); n * d];
            gemm_into(n, dm, d, &g, false, layer.w_out.data(), false, &mut f, false);
            let mut x_next = x_mid.clone();
            for (xi, &fi) in x_next.iter_mut().zip(&f) {
                *xi = *xi + fi;
            }
            let x_in = std::mem::replace(&mut x, x_next);
            layers.push(LayerCache {
                x: x_in,
                r1,
                a,
                q,
                k,
                v,
                probs,
                z,
                x_mid,
                r2,
                m,
                u,
                g,
            });
        }
        let mut rf = vec![T::zero(); n];
        let mut y = vec![T::zero(); n * d];
        norm_rows(&x, params.final_norm.data(), n, d, &mut rf, &mut y);
        let mut logits = vec![T::zero(); n * vocab];
        gemm_into(n, d, vocab, &y, false, params.unembed.data(), false, &mut logits, false);
        Ok(Self {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            rf,
            y,
            logits,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Residual state entering block `layer` (or the final state at `L`).
    pub fn resid(&self, layer: usize) -> &[T] {
        if layer < self.layers.len() {
            &self.layers[layer].x
        } else {
            &self.x_final
        }
    }

    /// Backward pass from `dlogits` (`[N, vocab]`), adding into `grads`.
    pub fn backward(&self, params: &Params<T>, dlogits: &[T], grads: &mut GradientSet<T>) -> Result<(), TrainError> {
        let cfg = &params.config;
        let n = self.tokens.len();
        let (d, dh, nh, dm, vocab) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.vocab_size);
        let base = cfg.rope_base as f64;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        gemm_into(d, n, vocab, &self.y, true, dlogits, false, grads.unembed.data_mut(), true);
        let mut dy = vec![T::zero(); n * d];
        gemm_into(n, vocab, d, dlogits, false, params.unembed.data(), true, &mut dy, false);
        let mut dx = vec![T::zero(); n * d];
        norm_rows_backward(
            &self.x_final,
            &self.rf,
            params.final_norm.data(),
            &dy,
            n,
            d,
            &mut dx,
            grads.final_norm.data_mut(),
        );

        let mut dqh = vec![T::zero(); n * dh];
        let mut dkh = vec![T::zero(); n * dh];
        let mut dvh = vec![T::zero(); n * dh];
        let mut dzh = vec![T::zero(); n * dh];
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut dp = vec![T::zero(); n * n];
        for (l, (layer, cache)) in params.layers.iter().zip(&self.layers).enumerate().rev() {
            let g = &mut grads.layers[l];
            // MLP
            gemm_into(dm, n, d, &cache.g, true, &dx, false, g.w_out.data_mut(), true);
            let mut du = vec![T::zero(); n * dm];
            gemm_into(n, d, dm, &dx, false, layer.w_out.data(), true, &mut du, false);
            for (dui, &ui) in du.iter_mut().zip(&cache.u) {
                *dui = *dui * gelu_grad(ui);
            }
            gemm_into(d, n, dm, &cache.m, true, &du, false, g.w_in.data_mut(), true);
            let mut dmn = vec![T::zero(); n * d];
            gemm_into(n, dm, d, &du, false, layer.w_in.data(), true, &mut dmn, false);
            let mut dx_mid = dx.clone();
            norm_rows_backward(&cache.x_mid, &cache.r2, layer.mlp_norm.data(), &dmn, n, d, &mut dx_mid, g.mlp_norm.data_mut());

            // attention
            gemm_into(d, n, d, &cache.z, true, &dx_mid, false, g.wo.data_mut(), true);
            let mut dz = vec![T::zero(); n * d];
            gemm_into(n, d, d, &dx_mid, false, layer.wo.data(), true, &mut dz, false);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            for h in 0..nh {
                let p = &cache.probs[h * n * n..(h + 1) * n * n];
                gather_head(&dz, n, d, dh, h, &mut dzh);
                gather_head(&cache.q, n, d, dh, h, &mut qh);
                gather_head(&cache.k, n, d, dh, h, &mut kh);
                gather_head(&cache.v, n, d, dh, h, &mut vh);
                gemm_into(n, dh, n, &dzh, false, &vh, true, &mut dp, false);
                gemm_into(n, n, dh, p, true, &dzh, false, &mut dvh, false);
                for i in 0..n {
                    let prow = &p[i * n..(i + 1) * n];
                    let drow = &mut dp[i * n..(i + 1) * n];
                    let mut dot = T::zero();
                    for s in 0..=i {
                        dot = dot + drow[s] * prow[s];
                    }
                    for s in 0..=i {
                        drow[s] = prow[s] * (drow[s] - dot) * scale;
                    }
                    drow[i + 1..].iter_mut().for_each(|v| *v = T::zero());
                }
                gemm_into(n, n, dh, &dp, false, &kh, false, &mut dqh, false);
                gemm_into(n, n, dh, &dp, true, &qh, false, &mut dkh, false);
                scatter_head(&dqh, n, d, dh, h, &mut dq);
                scatter_head(&dkh, n, d, dh, h, &mut dk);
                scatter_head(&dvh, n, d, dh, h, &mut dv);
            }
            for i in 0..n {
                for h in 0..nh {
                    let r = i * d + h * dh..i * d + (h + 1) * dh;
                    rope_in_place(&mut dq[r.clone()], i, base, true);
                    rope_in_place(&mut dk[r], i, base, true);
                }
            }
            gemm_into(d, n, d, &cache.a, true, &dq, false, g.wq.data_mut(), true);
            gemm_into(d, n, d, &cache.a, true, &dk, false, g.wk.data_mut(), true);
            gemm_into(d, n, d, &cache.a, true, &dv, false, g.wv.data_mut(), true);
            let mut da = vec![T::zero(); n * d];
            gemm_into(n, d, d, &dq, false, layer.wq.data(), true, &mut da, false);
            gemm_into(n, d, d, &dk, false, layer.wk.data(), true, &mut da, true);
            gemm_into(n, d, d, &dv, false, layer.wv.data(), true, &mut da, true);
            dx = dx_mid;
            norm_rows_backward(&cache.x, &cache.r1, layer.attn_norm.data(), &da, n, d, &mut dx, g.attn_norm.data_mut());
            if dx.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { layer: l });
            }
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            let row = grads.embed.row_mut(t as usize);
            for (gv, &dv) in row.iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *gv = *gv + dv;
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over all targets of `examples`.
pub fn loss<T: Scalar>(params: &Params<T>, examples: &[Example]) -> Result<T, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ex in examples {
        let cache = ForwardCache::run(params, &ex.tokens)?;
        let v = params.config.vocab_size;
        for &(pos, target) in &ex.targets {
            total += cross_entropy(&cache.logits[pos * v..(pos + 1) * v], target as usize).as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(T::from_f64_lossy(total / count as f64))
}

/// `-log softmax(logits)[target]`, computed with max subtraction.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &z in logits {
        sum = sum + (z - max).exp();
    }
    sum.ln() + max - logits[target]
}

/// Loss and gradient of the mean cross-entropy over `examples`.
///
/// Examples are split into fixed chunks whose gradients are summed in order,
/// so the result does not depend on the number of worker threads.
pub fn loss_and_grad<T: Scalar>(params: &Params<T>, examples: &[Example]) -> Result<(T, GradientSet<T>), TrainError> {
    use rayon::prelude::*;

    let count: usize = examples.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let weight = T::one() / T::from_usize(count).unwrap();
    let v = params.config.vocab_size;
    const CHUNK: usize = 8;
    let partials: Vec<Result<(f64, GradientSet<T>), TrainError>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = GradientSet::<T>::zeros(&params.config);
            let mut total = 0.0f64;
            for ex in chunk {
                let cache = ForwardCache::run(params, &ex.tokens)?;
                let n = ex.tokens.len();
                let mut dlogits = vec![T::zero(); n * v];
                for &(pos, target) in &ex.targets {
                    let row = &cache.logits[pos * v..(pos + 1) * v];
                    total += cross_entropy(row, target as usize).as_f64();
                    let mut probs = row.to_vec();
                    softmax_in_place(&mut probs);
                    let drow = &mut dlogits[pos * v..(pos + 1) * v];
                    for (dz, p) in drow.iter_mut().zip(probs) {
                        *dz = *dz + p * weight;
                    }
                    drow[target as usize] = drow[target as usize] - weight;
                }
                cache.backward(params, &dlogits, &mut grads)?;
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0f64;
    let mut grads = GradientSet::<T>::zeros(&params.config);
    for part in partials {
        let (t, g) = part?;
        total += t;
        for (acc, gi) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a = *a + b;
            }
        }
    }
    Ok((T::from_f64_lossy(total / count as f64), grads))
}
