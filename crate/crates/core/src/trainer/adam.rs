use crate::model::Params;
use crate::tensor::Scalar;

use super::{GradientSet, TrainConfig};

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            step: 0,
            m: Params::zeros(&params.config),
            v: Params::zeros(&params.config),
        }
    }
}

/// Euclidean norm over every gradient entry, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &GradientSet<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with bias correction, after clipping the global gradient
/// norm to `config.grad_clip` (when positive). `lr` is the step's learning rate.
/// Returns the pre-clip gradient norm.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
    lr: f64,
) -> f64 {
    let norm = global_norm(grads);
    let clip = if config.grad_clip > 0.0 && norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let clip_t = T::from_f64_lossy(clip);
    let step_size = T::from_f64_lossy(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
    let eps = T::from_f64_lossy(config.eps);

    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi * clip_t;
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            *pi = *pi - step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    norm
}
