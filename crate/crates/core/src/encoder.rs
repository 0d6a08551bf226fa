//! A small rectifier MLP whose outputs are ℓ₂-normalized, with a
//! hand-written reverse pass.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::DEGENERATE_CENTROID_NORM;

/// Fully connected layer computing `x Wᵀ + b`; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    layers: Vec<DenseLayer>,
}

/// Intermediate values kept by [`MlpEncoder::forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    /// Layer inputs: the batch itself, then each hidden activation.
    pub layer_inputs: Vec<Array2<f64>>,
    /// `x Wᵀ + b` for every layer; the last one is the unnormalized output.
    pub pre_activations: Vec<Array2<f64>>,
    pub output_norms: Array1<f64>,
    pub normalized: Array2<f64>,
}

/// Parameter gradients in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseLayer>,
}

impl ParamGrads {
    /// Same ordering as [`MlpEncoder::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(|l| l.weight.len() + l.bias.len()).sum());
    for layer in layers {
        out.extend(layer.weight.iter());
        out.extend(layer.bias.iter());
    }
    out
}

impl MlpEncoder {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "need at least two positive layer dims, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("encoder needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(
                    format!("bias of length {} in layer {i}", layer.output_dim()),
                    layer.bias.len(),
                ));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.input_dim() != layer.output_dim() {
                    return Err(Error::shape(
                        format!("layer {} input width {}", i + 1, layer.output_dim()),
                        next.input_dim(),
                    ));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// `[input, hidden..., output]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(self.num_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Rows of `inputs` mapped to unit embeddings.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardTape)> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("input width {}", self.input_dim()),
                inputs.ncols(),
            ));
        }
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = current.dot(&layer.weight.t());
            pre += &layer.bias;
            let next = if i < last {
                pre.mapv(|a| a.max(0.0))
            } else {
                pre.clone()
            };
            layer_inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(pre);
        }
        let mut normalized = current;
        let mut output_norms = Array1::zeros(normalized.nrows());
        for (row, (mut v, norm)) in normalized
            .outer_iter_mut()
            .zip(output_norms.iter_mut())
            .enumerate()
        {
            let n = v.dot(&v).sqrt();
            if !(n >= DEGENERATE_CENTROID_NORM) {
                return Err(Error::ZeroNorm { row, norm: n });
            }
            v /= n;
            *norm = n;
        }
        let tape = ForwardTape {
            layer_inputs,
            pre_activations,
            output_norms,
            normalized: normalized.clone(),
        };
        Ok((normalized, tape))
    }

    /// Reverse pass from `dL/dz` on the normalized outputs. The normalization
    /// Jacobian `(I - z zᵀ) / ‖u‖` is applied here, so callers pass the raw
    /// (unprojected) embedding gradient.
    pub fn backward(&self, tape: &ForwardTape, grad_embeddings: ArrayView2<'_, f64>) -> Result<ParamGrads> {
        if grad_embeddings.dim() != tape.normalized.dim()
            || tape.pre_activations.len() != self.layers.len()
        {
            return Err(Error::shape(
                format!("{:?}", tape.normalized.dim()),
                format!("{:?}", grad_embeddings.dim()),
            ));
        }
        let mut upstream = grad_embeddings.to_owned();
        Zip::from(upstream.outer_iter_mut())
            .and(tape.normalized.outer_iter())
            .and(&tape.output_norms)
            .for_each(|mut g, z, &norm| {
                let along = g.dot(&z);
                g.scaled_add(-along, &z);
                g /= norm;
            });

        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                Zip::from(&mut upstream)
                    .and(&tape.pre_activations[i])
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let weight = upstream.t().dot(&tape.layer_inputs[i]);
            let bias = upstream.sum_axis(Axis(0));
            if i > 0 {
                upstream = upstream.dot(&self.layers[i].weight);
            }
            grads.push(DenseLayer { weight, bias });
        }
        grads.reverse();
        Ok(ParamGrads { layers: grads })
    }
}
