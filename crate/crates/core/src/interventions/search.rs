use serde::{Deserialize, Serialize};

use crate::datasets::{PromptSpec, Which};
use crate::metrics::{score_pair, score_question, PairOutcome, ScoreMode};
use crate::model::{forward, Capture, ForwardTrace, HookSet, ModelParams, Tokenizer};
use crate::tensor::RngStream;

use super::{even_layers, run_patch, InterventionError, PatchMode, PatchPlan, PreparedPair, SourceLocator, TargetLocator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    CrossPatch,
    Backpatch,
    FrozenBackpatch,
    Noise,
}

/// Outcome of one grid cell (and, for noise, one resample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub source_layer: usize,
    pub target_layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<usize>,
    pub yes_correct: bool,
    pub no_correct: bool,
    pub pair_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub pair_id: String,
    pub kind: SearchKind,
    /// The unpatched pair was already correct.
    pub baseline_correct: bool,
    /// Some cell made the pair correct.
    pub patched_success: bool,
    /// `baseline_correct || patched_success`.
    pub success: bool,
    /// Index into `cells` of the first success in search order.
    pub first_success: Option<usize>,
    /// Target subject index minus source subject index (cross-patching).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_offset: Option<i64>,
    pub cells: Vec<CellOutcome>,
}

impl SearchResult {
    fn new(pair_id: &str, kind: SearchKind, baseline_correct: bool, cells: Vec<CellOutcome>) -> Self {
        let first_success = cells.iter().position(|c| c.pair_correct);
        Self {
            pair_id: pair_id.to_string(),
            kind,
            baseline_correct,
            patched_success: first_success.is_some(),
            success: baseline_correct || first_success.is_some(),
            first_success,
            position_offset: None,
            cells,
        }
    }
}

/// Scores both questions of `pair`, each under its own hooks.
pub fn score_pair_with(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    pair: &PreparedPair,
    yes_hooks: &HookSet,
    no_hooks: &HookSet,
    mode: ScoreMode,
) -> Result<PairOutcome, InterventionError> {
    let q = |which: Which, hooks: &HookSet| {
        let p = pair.question(which);
        score_question(params, tokenizer, &p.ids, &p.answers, &pair.pair_id, which, mode, hooks)
    };
    Ok(score_pair(q(Which::Yes, yes_hooks)?, q(Which::No, no_hooks)?)?)
}

fn cell(source_layer: usize, target_layer: usize, o: &PairOutcome) -> CellOutcome {
    CellOutcome {
        source_layer,
        target_layer,
        noise_factor: None,
        resample: None,
        yes_correct: o.yes.correct,
        no_correct: o.no.correct,
        pair_correct: o.pair_correct,
    }
}

fn traces(params: &ModelParams, pair: &PreparedPair) -> Result<[ForwardTrace; 2], InterventionError> {
    Ok([
        forward(params, &pair.yes.ids, &HookSet::new(), Capture::RESID)?,
        forward(params, &pair.no.ids, &HookSet::new(), Capture::RESID)?,
    ])
}

fn baseline(params: &ModelParams, tokenizer: &Tokenizer, pair: &PreparedPair, mode: ScoreMode) -> Result<bool, InterventionError> {
    let none = HookSet::new();
    Ok(score_pair_with(params, tokenizer, pair, &none, &none, mode)?.pair_correct)
}

/// Source layers for cross-patching: even layers up to `L / 2`.
pub fn cross_patch_grid(n_layers: usize) -> Vec<usize> {
    even_layers(n_layers / 2)
}

/// `(source l, target l*)` cells: `l` from `L / 2` to `L` in steps of two,
/// `l*` over even layers up to `L / 2`.
pub fn backpatch_grid(n_layers: usize) -> Vec<(usize, usize)> {
    let m = n_layers / 2;
    (m..=n_layers)
        .step_by(2)
        .flat_map(|l| even_layers(m).into_iter().map(move |t| (l, t)))
        .collect()
}

/// Patches the clean prompt's last subject token state at `h_l` into the
/// corrupted prompt's last subject token at the same layer, for every grid
/// layer. Positions are aligned by role.
pub fn cross_patch_search(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    clean: &PromptSpec,
    corrupted: &PromptSpec,
    mode: ScoreMode,
) -> Result<SearchResult, InterventionError> {
    if clean.subject_entity != corrupted.subject_entity {
        return Err(InterventionError::Alignment(format!(
            "subjects differ: `{}` vs `{}`",
            clean.subject_entity, corrupted.subject_entity
        )));
    }
    let src = PreparedPair::new(clean, tokenizer)?;
    let dst = PreparedPair::new(corrupted, tokenizer)?;
    let base = baseline(params, tokenizer, &dst, mode)?;
    let [ty, tn] = traces(params, &src)?;
    let mut cells = Vec::new();
    for l in cross_patch_grid(params.config.n_layers) {
        let hooks = |which: Which, trace: &ForwardTrace| {
            run_patch(
                &PatchPlan {
                    source: SourceLocator {
                        position: src.question(which).roles.subject,
                        layer: l,
                    },
                    target: TargetLocator {
                        positions: vec![dst.question(which).roles.subject],
                        layer: l,
                    },
                    mode: PatchMode::Single,
                },
                trace,
            )
        };
        let o = score_pair_with(params, tokenizer, &dst, &hooks(Which::Yes, &ty)?, &hooks(Which::No, &tn)?, mode)?;
        cells.push(cell(l, l, &o));
    }
    let mut r = SearchResult::new(&corrupted.id, SearchKind::CrossPatch, base, cells);
    r.position_offset = Some(dst.yes.roles.subject as i64 - src.yes.roles.subject as i64);
    Ok(r)
}

/// Patches a later-layer subject state back into an earlier layer of the same
/// prompt, over the full backpatching grid.
pub fn backpatch_search(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    spec: &PromptSpec,
    patch: PatchMode,
    mode: ScoreMode,
) -> Result<SearchResult, InterventionError> {
    let pair = PreparedPair::new(spec, tokenizer)?;
    let base = baseline(params, tokenizer, &pair, mode)?;
    let [ty, tn] = traces(params, &pair)?;
    let mut cells = Vec::new();
    for (l, target) in backpatch_grid(params.config.n_layers) {
        let hooks = |which: Which, trace: &ForwardTrace| {
            let i = pair.question(which).roles.subject;
            run_patch(
                &PatchPlan {
                    source: SourceLocator { position: i, layer: l },
                    target: TargetLocator {
                        positions: vec![i],
                        layer: target,
                    },
                    mode: patch,
                },
                trace,
            )
        };
        let o = score_pair_with(params, tokenizer, &pair, &hooks(Which::Yes, &ty)?, &hooks(Which::No, &tn)?, mode)?;
        cells.push(cell(l, target, &o));
    }
    let kind = match patch {
        PatchMode::Single => SearchKind::Backpatch,
        PatchMode::Frozen => SearchKind::FrozenBackpatch,
    };
    Ok(SearchResult::new(&spec.id, kind, base, cells))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `sigma_d = factor * |h_d|`.
    #[default]
    PerDimension,
    /// `sigma = factor * ||h|| / sqrt(d)` for every dimension.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub factors: Vec<f64>,
    pub resamples: usize,
    #[serde(default)]
    pub scale: NoiseScale,
}

impl Default for NoisePlan {
    fn default() -> Self {
        Self {
            factors: vec![0.01, 0.05],
            resamples: 10,
            scale: NoiseScale::PerDimension,
        }
    }
}

impl NoisePlan {
    pub fn validate(&self) -> Result<(), InterventionError> {
        if self.resamples == 0 || self.factors.is_empty() || self.factors.iter().any(|&f| !(f >= 0.0)) {
            return Err(InterventionError::Plan(
                "noise plan needs at least one resample and non-negative factors".into(),
            ));
        }
        Ok(())
    }
}

/// `(layer, factor, resample)` attempts in search order.
pub fn noise_grid(n_layers: usize, plan: &NoisePlan) -> Vec<(usize, f64, usize)> {
    let mut out = Vec::new();
    for l in cross_patch_grid(n_layers) {
        for &f in &plan.factors {
            for r in 0..plan.resamples {
                out.push((l, f, r));
            }
        }
    }
    out
}

/// Adds Gaussian noise to the subject state at each cross-patching layer.
/// Both questions of an attempt share one noise draw.
pub fn noise_baseline(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    spec: &PromptSpec,
    plan: &NoisePlan,
    rng: &mut RngStream,
    mode: ScoreMode,
) -> Result<SearchResult, InterventionError> {
    plan.validate()?;
    let pair = PreparedPair::new(spec, tokenizer)?;
    let base = baseline(params, tokenizer, &pair, mode)?;
    let [ty, tn] = traces(params, &pair)?;
    let d = params.config.d_model;
    let mut cells = Vec::new();
    for (l, factor, r) in noise_grid(params.config.n_layers, plan) {
        let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let hooks = |which: Which, trace: &ForwardTrace| -> Result<HookSet, InterventionError> {
            let i = pair.question(which).roles.subject;
            let h = trace
                .resid_at(l, i)
                .ok_or_else(|| InterventionError::Plan(format!("no state at layer {l}, position {i}")))?;
            let norm_sigma = factor * h.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() / (d as f64).sqrt();
            let noisy = h
                .iter()
                .zip(&z)
                .map(|(&x, &e)| {
                    let sigma = match plan.scale {
                        NoiseScale::PerDimension => factor * (x as f64).abs(),
                        NoiseScale::Norm => norm_sigma,
                    };
                    (x as f64 + sigma * e) as f32
                })
                .collect();
            let mut hooks = HookSet::new();
            hooks.resid_write(l, i, noisy);
            Ok(hooks)
        };
        let o = score_pair_with(params, tokenizer, &pair, &hooks(Which::Yes, &ty)?, &hooks(Which::No, &tn)?, mode)?;
        let mut c = cell(l, l, &o);
        c.noise_factor = Some(factor);
        c.resample = Some(r);
        cells.push(c);
    }
    Ok(SearchResult::new(&spec.id, SearchKind::Noise, base, cells))
}
