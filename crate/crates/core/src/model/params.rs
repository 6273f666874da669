use crate::tensor::{RngStream, Scalar, Tensor};

use super::{ModelConfig, ModelError};

/// Weights of one transformer block. Activations are row vectors, so every
/// projection maps `x [N, in] -> x · W [N, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Scalar = f32> {
    pub config: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `W_U`, `d_model x vocab`.
    pub unembed: Tensor<T>,
}

pub type ModelParams = Params<f32>;

/// Expected shape of every named tensor, in canonical order.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for l in 0..config.n_layers {
        for (name, shape) in [
            ("attn_norm", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("mlp_norm", vec![d]),
            ("w_in", vec![d, m]),
            ("w_out", vec![m, d]),
        ] {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, v]));
    out
}

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_in,
            &self.w_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_in,
            &mut self.w_out,
        ]
    }
}

impl<T: Scalar> Params<T> {
    /// All-zero parameters of the right shapes (also used as gradient buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let layer = || LayerParams {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            mlp_norm: Tensor::zeros(&[d]),
            w_in: Tensor::zeros(&[d, m]),
            w_out: Tensor::zeros(&[m, d]),
        };
        Self {
            config: config.clone(),
            embed: Tensor::zeros(&[v, d]),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_norm: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, v]),
        }
    }

    /// Tensors in canonical order (matches [`tensor_shapes`]).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        tensor_shapes(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Builds parameters from tensors given in canonical order, checking shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let expected = tensor_shapes(config);
        let mut out = Self::zeros(config);
        if tensors.len() != expected.len() {
            let missing = expected
                .iter()
                .find(|(n, _)| !tensors.iter().any(|(m, _)| m == n))
                .map(|(n, _)| n.clone());
            return Err(ModelError::Format(match missing {
                Some(name) => format!("tensor `{name}` missing"),
                None => format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            }));
        }
        for ((slot, (name, shape)), (got_name, tensor)) in
            out.tensors_mut().into_iter().zip(&expected).zip(tensors)
        {
            if &got_name != name {
                return Err(ModelError::Format(format!(
                    "tensor `{got_name}` found where `{name}` was expected"
                )));
            }
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::Format(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor;
        }
        Ok(out)
    }
}

impl Params<f32> {
    /// Scaled-normal initialisation: std 0.02, output projections scaled by
    /// `1/sqrt(2L)`, norm gains at one.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0);
        let std = 0.02f64;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = Self::zeros(config);
        let names: Vec<String> = tensor_shapes(config).into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            if name.ends_with("norm") {
                t.data_mut().iter_mut().for_each(|v| *v = 1.0);
                continue;
            }
            let s = if name.ends_with(".wo") || name.ends_with(".w_out") {
                out_std
            } else {
                std
            };
            for v in t.data_mut() {
                *v = (s * rng.standard_normal()) as f32;
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let c = ModelConfig::toy();
        let a = Params::init_random(&c, 7).unwrap();
        let b = Params::init_random(&c, 7).unwrap();
        assert_eq!(a, b);
        let d = Params::init_random(&c, 8).unwrap();
        assert_ne!(a.embed, d.embed);
    }

    #[test]
    fn embedding_std_close_to_target() {
        let mut c = ModelConfig::toy();
        c.d_model = 128;
        c.d_head = 32;
        c.vocab_size = 1024; // 1024 * 128 > 1e5 entries
        let p = Params::init_random(&c, 1).unwrap();
        let n = p.embed.len() as f64;
        assert!(n >= 1e5);
        let mean: f64 = p.embed.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = p.embed.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02).abs() < 0.02 * 0.05);
    }

    #[test]
    fn output_projections_are_scaled() {
        let c = ModelConfig::toy();
        let p = Params::init_random(&c, 3).unwrap();
        let std = |t: &Tensor| {
            let n = t.len() as f64;
            (t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n).sqrt()
        };
        let expected = 0.02 / (2.0 * c.n_layers as f64).sqrt();
        assert!((std(&p.layers[0].wo) - expected).abs() < expected * 0.1);
        assert!(p.final_norm.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn from_tensors_names_bad_shape() {
        let c = ModelConfig::toy();
        let p = Params::init_random(&c, 3).unwrap();
        let mut ts: Vec<(String, Tensor)> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        ts[3].1 = Tensor::zeros(&[2, 2]);
        let err = Params::from_tensors(&c, ts).unwrap_err().to_string();
        assert!(err.contains("layers.0.wk"), "{err}");
    }
}
