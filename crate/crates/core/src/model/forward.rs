use serde::{Deserialize, Serialize};

use crate::tensor::{gelu, gemm_into, rms_norm_row, rope_in_place, softmax_in_place, Scalar, Tensor};

use super::{config::NORM_EPS, AblationMode, HookSet, ModelError, Params, TokenSequence, Tokenizer};

/// Which intermediate tensors a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capture {
    pub resid: bool,
    pub attn: bool,
    /// Per-layer attention and MLP outputs (for residual accounting).
    pub components: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        resid: false,
        attn: false,
        components: false,
    };
    pub const ALL: Capture = Capture {
        resid: true,
        attn: true,
        components: true,
    };
    pub const RESID: Capture = Capture {
        resid: true,
        attn: false,
        components: false,
    };
}

/// An attention row whose renormalisation had no mass left and fell back to
/// the diagonal entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateRow {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
}

/// Everything observed during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T: Scalar = f32> {
    /// `h_0 ..= h_L`, each `[N, d_model]`, when captured.
    pub resid: Vec<Tensor<T>>,
    /// Per layer `[H, N, N]`, indexed `[head, dest, src]`, when captured.
    pub attn: Vec<Tensor<T>>,
    pub attn_out: Vec<Tensor<T>>,
    pub mlp_out: Vec<Tensor<T>>,
    /// `[N, vocab]`.
    pub logits: Tensor<T>,
    pub degenerate: Vec<DegenerateRow>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn n_tokens(&self) -> usize {
        self.logits.rows()
    }

    /// Residual vector `h_layer` at `position`.
    pub fn resid_at(&self, layer: usize, position: usize) -> Option<&[T]> {
        let t = self.resid.get(layer)?;
        (position < t.rows()).then(|| t.row(position))
    }

    /// `A[layer][head][dest][src]`.
    pub fn attn_at(&self, layer: usize, head: usize, dest: usize, src: usize) -> T {
        self.attn[layer].at(&[head, dest, src])
    }

    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Ids of the two answer tokens and the position where they are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokens {
    pub yes_id: u32,
    pub no_id: u32,
    pub answer_position: usize,
}

impl AnswerTokens {
    pub fn new(yes_id: u32, no_id: u32, answer_position: usize, vocab: usize) -> Result<Self, ModelError> {
        if yes_id == no_id {
            return Err(ModelError::Range("yes and no ids must differ".into()));
        }
        if yes_id as usize >= vocab || no_id as usize >= vocab {
            return Err(ModelError::Range(format!(
                "answer ids ({yes_id}, {no_id}) outside vocabulary of {vocab}"
            )));
        }
        Ok(Self {
            yes_id,
            no_id,
            answer_position,
        })
    }

    /// Yes/no answer ids of the tokenizer, read at the final token of `tokens`.
    pub fn at_end(tokenizer: &Tokenizer, tokens: &TokenSequence) -> Result<Self, ModelError> {
        let yes = tokenizer
            .yes()
            .ok_or_else(|| ModelError::Range("tokenizer has no <yes> token".into()))?;
        let no = tokenizer
            .no()
            .ok_or_else(|| ModelError::Range("tokenizer has no <no> token".into()))?;
        Self::new(yes, no, tokens.len() - 1, tokenizer.vocab_size())
    }
}

/// `(yes_logit, no_logit)` at the answer position.
pub fn answer_logit_pair<T: Scalar>(trace: &ForwardTrace<T>, answers: &AnswerTokens) -> (T, T) {
    let row = trace.logits.row(answers.answer_position);
    (row[answers.yes_id as usize], row[answers.no_id as usize])
}

pub(crate) fn check_tokens(config: &super::ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::Length("empty token sequence".into()));
    }
    if ids.len() > config.max_seq {
        return Err(ModelError::Length(format!(
            "{} tokens exceed max_seq {}",
            ids.len(),
            config.max_seq
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::Range(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Copies head `h` of a `[N, D]` buffer into a contiguous `[N, d_head]` buffer.
pub(crate) fn gather_head<T: Scalar>(src: &[T], n: usize, d: usize, dh: usize, h: usize, out: &mut [T]) {
    for i in 0..n {
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

pub(crate) fn scatter_head<T: Scalar>(src: &[T], n: usize, d: usize, dh: usize, h: usize, out: &mut [T]) {
    for i in 0..n {
        out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Zeroes `cols` in a causal probability row ending at `row` and renormalises.
/// Returns `false` when no mass remained and the row fell back to the diagonal.
fn renormalize_without<T: Scalar>(probs: &mut [T], row: usize, cols: &[usize]) -> bool {
    for &c in cols {
        if c <= row {
            probs[c] = T::zero();
        }
    }
    let mut sum = T::zero();
    for &p in &probs[..=row] {
        sum = sum + p;
    }
    if sum.as_f64() < 1e-12 {
        probs[..=row].iter_mut().for_each(|p| *p = T::zero());
        probs[row] = T::one();
        return false;
    }
    for p in &mut probs[..=row] {
        *p = *p / sum;
    }
    true
}

/// Runs the model on `tokens`, applying `hooks` at their sites.
pub fn forward<T: Scalar>(
    params: &Params<T>,
    tokens: &[u32],
    hooks: &HookSet,
    capture: Capture,
) -> Result<ForwardTrace<T>, ModelError> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    hooks.validate(cfg, tokens.len())?;

    let n = tokens.len();
    let (d, dh, nh, dm, v) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.vocab_size);
    let eps = T::from_f64_lossy(NORM_EPS);
    let base = cfg.rope_base as f64;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let mut x = vec![T::zero(); n * d];
    for (i, &tok) in tokens.iter().enumerate() {
        x[i * d..(i + 1) * d].copy_from_slice(params.embed.row(tok as usize));
    }

    let mut trace = ForwardTrace {
        resid: Vec::new(),
        attn: Vec::new(),
        attn_out: Vec::new(),
        mlp_out: Vec::new(),
        logits: Tensor::zeros(&[0, v]),
        degenerate: Vec::new(),
    };

    let write_resid = |x: &mut [T], layer: usize| {
        for (pos, value) in hooks.resid_writes_at(layer) {
            for (dst, &src) in x[pos * d..(pos + 1) * d].iter_mut().zip(value) {
                *dst = T::from_f64_lossy(src as f64);
            }
        }
    };

    let mut normed = vec![T::zero(); n * d];
    let mut q = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); n * d];
    let mut vv = vec![T::zero(); n * d];
    let mut z = vec![T::zero(); n * d];
    let mut qh = vec![T::zero(); n * dh];
    let mut kh = vec![T::zero(); n * dh];
    let mut vh = vec![T::zero(); n * dh];
    let mut zh = vec![T::zero(); n * dh];
    let mut probs = vec![T::zero(); n * n];
    let mut attn_out = vec![T::zero(); n * d];
    let mut hidden = vec![T::zero(); n * dm];
    let mut mlp_out = vec![T::zero(); n * d];

    for (l, layer) in params.layers.iter().enumerate() {
        write_resid(&mut x, l);
        if capture.resid {
            trace.resid.push(Tensor::new(vec![n, d], x.clone()).unwrap());
        }

        for i in 0..n {
            rms_norm_row(&x[i * d..(i + 1) * d], layer.attn_norm.data(), eps, &mut normed[i * d..(i + 1) * d]);
        }
        gemm_into(n, d, d, &normed, false, layer.wq.data(), false, &mut q, false);
        gemm_into(n, d, d, &normed, false, layer.wk.data(), false, &mut k, false);
        gemm_into(n, d, d, &normed, false, layer.wv.data(), false, &mut vv, false);
        for i in 0..n {
            for h in 0..nh {
                let r = i * d + h * dh..i * d + (h + 1) * dh;
                rope_in_place(&mut q[r.clone()], i, base, false);
                rope_in_place(&mut k[r], i, base, false);
            }
        }

        let edits: Vec<_> = hooks.attn_edits_at(l).collect();
        let mut layer_attn = if capture.attn {
            Some(vec![T::zero(); nh * n * n])
        } else {
            None
        };
        for h in 0..nh {
            gather_head(&q, n, d, dh, h, &mut qh);
            gather_head(&k, n, d, dh, h, &mut kh);
            gather_head(&vv, n, d, dh, h, &mut vh);
            gemm_into(n, dh, n, &qh, false, &kh, true, &mut probs, false);
            for i in 0..n {
                let row = &mut probs[i * n..(i + 1) * n];
                for s in row[..=i].iter_mut() {
                    *s = *s * scale;
                }
                for (rows, cols, mode) in &edits {
                    if *mode == AblationMode::PreSoftmaxMask && rows.contains(&i) {
                        for &c in cols.iter() {
                            if c <= i {
                                row[c] = T::neg_infinity();
                            }
                        }
                    }
                }
                let degenerate = softmax_in_place(&mut row[..=i]);
                if degenerate {
                    row[..=i].iter_mut().for_each(|p| *p = T::zero());
                    row[i] = T::one();
                    trace.degenerate.push(DegenerateRow { layer: l, head: h, row: i });
                }
                row[i + 1..].iter_mut().for_each(|p| *p = T::zero());
                for (rows, cols, mode) in &edits {
                    if *mode == AblationMode::Renormalize
                        && rows.contains(&i)
                        && !renormalize_without(row, i, cols)
                    {
                        trace.degenerate.push(DegenerateRow { layer: l, head: h, row: i });
                    }
                }
            }
            if let Some(a) = layer_attn.as_mut() {
                a[h * n * n..(h + 1) * n * n].copy_from_slice(&probs);
            }
            gemm_into(n, n, dh, &probs, false, &vh, false, &mut zh, false);
            scatter_head(&zh, n, d, dh, h, &mut z);
        }
        if let Some(a) = layer_attn {
            trace.attn.push(Tensor::new(vec![nh, n, n], a).unwrap());
        }

        gemm_into(n, d, d, &z, false, layer.wo.data(), false, &mut attn_out, false);
        for (xi, &ai) in x.iter_mut().zip(&attn_out) {
            *xi = *xi + ai;
        }

        for i in 0..n {
            rms_norm_row(&x[i * d..(i + 1) * d], layer.mlp_norm.data(), eps, &mut normed[i * d..(i + 1) * d]);
        }
        gemm_into(n, d, dm, &normed, false, layer.w_in.data(), false, &mut hidden, false);
        for u in hidden.iter_mut() {
            *u = gelu(*u);
        }
        gemm_into(n, dm, d, &hidden, false, layer.w_out.data(), false, &mut mlp_out, false);
        for (xi, &mi) in x.iter_mut().zip(&mlp_out) {
            *xi = *xi + mi;
        }

        if capture.components {
            trace.attn_out.push(Tensor::new(vec![n, d], attn_out.clone()).unwrap());
            trace.mlp_out.push(Tensor::new(vec![n, d], mlp_out.clone()).unwrap());
        }
    }

    write_resid(&mut x, cfg.n_layers);
    if capture.resid {
        trace.resid.push(Tensor::new(vec![n, d], x.clone()).unwrap());
    }
    for i in 0..n {
        rms_norm_row(&x[i * d..(i + 1) * d], params.final_norm.data(), eps, &mut normed[i * d..(i + 1) * d]);
    }
    let mut logits = vec![T::zero(); n * v];
    gemm_into(n, d, v, &normed, false, params.unembed.data(), false, &mut logits, false);
    trace.logits = Tensor::new(vec![n, v], logits).unwrap();
    Ok(trace)
}

/// Logit-lens projection of a single residual vector: `W_U · final_norm(h)`.
pub fn lens_logits<T: Scalar>(params: &Params<T>, h: &[T]) -> Vec<T> {
    let d = params.config.d_model;
    let v = params.config.vocab_size;
    let mut normed = vec![T::zero(); d];
    rms_norm_row(h, params.final_norm.data(), T::from_f64_lossy(NORM_EPS), &mut normed);
    let mut out = vec![T::zero(); v];
    gemm_into(1, d, v, &normed, false, params.unembed.data(), false, &mut out, false);
    out
}

/// Greedy decoding of `k` tokens after `prompt`. Hooks are addressed by
/// absolute token index and must fall inside the prompt; they apply at every
/// decoding step.
pub fn greedy_decode(
    params: &Params<f32>,
    prompt: &[u32],
    k: usize,
    hooks: &HookSet,
) -> Result<Vec<u32>, ModelError> {
    if k == 0 {
        return Err(ModelError::Length("must decode at least one token".into()));
    }
    if prompt.len() + k > params.config.max_seq {
        return Err(ModelError::Length(format!(
            "prompt of {} tokens plus {k} generated exceeds max_seq {}",
            prompt.len(),
            params.config.max_seq
        )));
    }
    hooks.validate(&params.config, prompt.len())?;
    let mut ids = prompt.to_vec();
    let mut generated = Vec::with_capacity(k);
    for _ in 0..k {
        let trace = forward(params, &ids, hooks, Capture::NONE)?;
        let next = argmax(trace.last_logits()) as u32;
        ids.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
