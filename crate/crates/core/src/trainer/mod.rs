//! Training loop for the bundled toy model.

mod adam;
mod backprop;

pub use adam::{adam_step, global_norm, AdamState};
pub use backprop::{cross_entropy, loss, loss_and_grad, Example, ForwardCache, GradientSet};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{gen_toy_slice, gen_toy_task, toy_examples, DataError, PromptSpec, ToyTaskSpec};
use crate::model::{save_weights, ModelConfig, ModelError, ModelParams, Params, Tokenizer};
use crate::tensor::{stream_label, RngStream, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("batch has no scored positions")]
    EmptyBatch,
    #[error("config error: {0}")]
    Config(String),
    #[error("target unmet: eval accuracy {accuracy:.4} < {target:.4} after {steps} steps")]
    TargetUnmet {
        accuracy: f64,
        target: f64,
        steps: usize,
        curve: Vec<CurvePoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Prompts per step; each contributes its yes and no question.
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup steps, followed by cosine decay to `lr * min_lr_ratio`.
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    /// Required 0-distractor eval pair accuracy.
    pub target_accuracy: f64,
    /// Return the evaluated parameters with the best eval accuracy (earliest
    /// on ties) instead of the final ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 3e-3,
            warmup: 100,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 250,
            eval_pairs: 200,
            seed: 0,
            checkpoint: None,
            curve: None,
            target_accuracy: 0.95,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Everything `train_toy` needs: model shape, task and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub model: ModelConfig,
    pub task: ToyTaskSpec,
    pub train: TrainConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            task: ToyTaskSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// 0-distractor eval pair accuracy, on evaluation steps only.
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub eval_accuracy: f64,
}

/// Fraction of pairs where the yes-question prefers yes and the no-question
/// prefers no at the final token.
pub fn pair_accuracy<T: Scalar>(params: &Params<T>, prompts: &[PromptSpec], tokenizer: &Tokenizer) -> Result<f64, TrainError> {
    let yes = tokenizer.yes().ok_or(TrainError::Config("vocabulary lacks a yes token".into()))? as usize;
    let no = tokenizer.no().ok_or(TrainError::Config("vocabulary lacks a no token".into()))? as usize;
    let v = params.config.vocab_size;
    let correct = |text: &str, want_yes: bool| -> Result<bool, TrainError> {
        let seq = tokenizer.tokenize(text)?;
        let cache = ForwardCache::run(params, &seq.ids)?;
        let last = &cache.logits[(seq.len() - 1) * v..seq.len() * v];
        Ok((last[yes] > last[no]) == want_yes)
    };
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in prompts {
        if correct(&p.rendered_yes, true)? && correct(&p.rendered_no, false)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}

/// Trains `params` on examples drawn by `next_batch(step)`. `evaluate` runs on
/// evaluation steps and its value is recorded in the curve.
pub fn train<F, E>(
    params: &mut ModelParams,
    config: &TrainConfig,
    mut next_batch: F,
    mut evaluate: E,
) -> Result<Vec<CurvePoint>, TrainError>
where
    F: FnMut(usize) -> Result<Vec<Example>, TrainError>,
    E: FnMut(&ModelParams) -> Result<f64, TrainError>,
{
    config.validate()?;
    let mut state = AdamState::new(params);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = next_batch(step)?;
        let (loss, grads) = loss_and_grad(params, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { layer: params.config.n_layers });
        }
        let lr = config.lr_at(step);
        let grad_norm = adam_step(params, &grads, &mut state, config, lr);
        let last = step + 1 == config.steps;
        let eval_accuracy = if last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0) {
            Some(evaluate(params)?)
        } else {
            None
        };
        curve.push(CurvePoint {
            step,
            loss: loss as f64,
            grad_norm,
            lr,
            eval_accuracy,
        });
    }
    Ok(curve)
}

/// Trains the toy model on freshly sampled lookup prompts. Writes the
/// checkpoint and curve when configured; fails with the curve attached if the
/// 0-distractor eval accuracy misses the target.
pub fn train_toy(config: &ToyTrainConfig) -> Result<TrainOutcome, TrainError> {
    let tc = &config.train;
    config.model.validate()?;
    config.task.validate(config.task.max_distractors)?;
    let tokenizer = Tokenizer::Byte;
    let mut params = ModelParams::init_random(&config.model, tc.seed)?;
    let eval = gen_toy_slice(&config.task, 0, 0, tc.eval_pairs, tc.seed ^ 0x5eed)?.prompts;

    let mut rng = RngStream::new(tc.seed, stream_label("train/batches"));
    let task = &config.task;
    let mut best: Option<(f64, ModelParams)> = None;
    let curve = train(
        &mut params,
        tc,
        |_| {
            let (prompts, _) = gen_toy_task(task, tc.batch_size, 0, &mut rng)?;
            Ok(toy_examples(task, &prompts, &tokenizer)?)
        },
        |p| {
            let acc = pair_accuracy(p, &eval, &tokenizer)?;
            if tc.keep_best && best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, p.clone()));
            }
            Ok(acc)
        },
    )?;
    let mut eval_accuracy = curve.last().and_then(|c| c.eval_accuracy).unwrap_or(0.0);
    if let Some((acc, p)) = best {
        eval_accuracy = acc;
        params = p;
    }

    if let Some(path) = &tc.curve {
        write_curve(&curve, path)?;
    }
    if let Some(path) = &tc.checkpoint {
        save_weights(&params, path)?;
    }
    if eval_accuracy < tc.target_accuracy {
        return Err(TrainError::TargetUnmet {
            accuracy: eval_accuracy,
            target: tc.target_accuracy,
            steps: tc.steps,
            curve,
        });
    }
    Ok(TrainOutcome {
        params,
        curve,
        eval_accuracy,
    })
}

/// CSV with columns `step,loss,grad_norm,lr,eval_accuracy`.
pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,grad_norm,lr,eval_accuracy")?;
    for c in curve {
        let acc = c.eval_accuracy.map(|a| format!("{a}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", c.step, c.loss, c.grad_norm, c.lr, acc)?;
    }
    out.flush()?;
    Ok(())
}
