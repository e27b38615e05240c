//! Rotation-equivariant layers and stacks of them.
//!
//! A processing stack runs on a batch of d-ary tensors so that batch
//! normalization can see every sample. Forward passes record a
//! [`LayerCache`] per layer (the input plus any selection/dropout mask) which
//! the backward pass consumes.

mod ops;

pub use ops::{
    apply_dropout_mask, avgpool_backward, batchnorm_backward, batchnorm_divisors, batchnorm_forward, conv_backward,
    conv_forward, dropout_forward, dropout_mask, maxpool_backward, maxpool_selection, pool_forward, relu_backward,
    relu_forward, PoolMode,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Seed;
use crate::tensor::DAryTensor;

/// Default clamp for the norm ReLU when a model file leaves it unset.
pub const DEFAULT_RELU_C: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Bias-free linear map over elements, weights `out × in`.
    Conv {
        weights: Matrix,
    },
    Relu {
        c: f64,
    },
    BatchNorm {
        eps: f64,
    },
    AvgPool {
        window: usize,
    },
    MaxPool {
        window: usize,
    },
    Dropout {
        rate: f64,
    },
    /// `f + inner(f)`.
    Skip {
        inner: Vec<Layer>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    BatchNorm,
    AvgPool,
    MaxPool,
    Dropout,
    Skip,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Dropout => "dropout",
            LayerKind::Skip => "skip",
        }
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Dropout { .. } => LayerKind::Dropout,
            Layer::Skip { .. } => LayerKind::Skip,
        }
    }

    /// Checks the parameter invariants (positive C and eps, rate in [0,1), ...).
    pub fn validate(&self) -> Result<()> {
        match self {
            Layer::Conv { weights } => {
                if weights.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("conv weights must be finite"));
                }
            }
            Layer::Relu { c } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(Error::invalid(format!("relu C must be > 0, got {c}")));
                }
            }
            Layer::BatchNorm { eps } => {
                if !(*eps > 0.0 && eps.is_finite()) {
                    return Err(Error::invalid(format!("batchnorm eps must be > 0, got {eps}")));
                }
            }
            Layer::AvgPool { window } | Layer::MaxPool { window } => {
                if *window == 0 {
                    return Err(Error::invalid("pooling window must be >= 1"));
                }
            }
            Layer::Dropout { rate } => ops::check_rate(*rate)?,
            Layer::Skip { inner } => inner.iter().try_for_each(Layer::validate)?,
        }
        Ok(())
    }

    /// Element count produced from `n_in` input elements.
    pub fn output_len(&self, n_in: usize) -> Result<usize> {
        match self {
            Layer::Conv { weights } => {
                if weights.cols() != n_in {
                    return Err(Error::shape(format!(
                        "conv expects {} elements, got {n_in}",
                        weights.cols()
                    )));
                }
                Ok(weights.rows())
            }
            Layer::AvgPool { window } | Layer::MaxPool { window } => {
                if *window == 0 || !n_in.is_multiple_of(*window) {
                    return Err(Error::shape(format!("window {window} does not divide {n_in}")));
                }
                Ok(n_in / window)
            }
            Layer::Skip { inner } => {
                let out = stack_output_len(inner, n_in)?;
                if out != n_in {
                    return Err(Error::shape(format!("skip inner stack maps {n_in} elements to {out}")));
                }
                Ok(n_in)
            }
            _ => Ok(n_in),
        }
    }
}

pub fn stack_output_len(layers: &[Layer], n_in: usize) -> Result<usize> {
    layers.iter().try_fold(n_in, |n, l| l.output_len(n))
}

/// `f + apply(inner, f)` for a single tensor.
pub fn skip_forward(f: &DAryTensor, inner: &[Layer], seed: Seed, training: bool) -> Result<DAryTensor> {
    let out = apply_stack(inner, std::slice::from_ref(f), seed, training)?;
    let phi = out.into_iter().next().expect("batch of one");
    if !phi.same_shape(f) {
        return Err(Error::shape("skip inner stack changed the feature shape"));
    }
    f.add(&phi)
}

/// Per-layer data saved by the forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<DAryTensor>,
    pub mask: Option<LayerMask>,
}

#[derive(Debug, Clone)]
pub enum LayerMask {
    /// Selected input index per output element, per sample.
    Pool(Vec<Vec<usize>>),
    /// Keep flags per element, per sample.
    Dropout(Vec<Vec<bool>>),
    /// Dropout run in inference mode.
    Identity,
    /// Caches of the inner stack of a skip connection.
    Inner(Vec<LayerCache>),
}

/// Gradients of one layer: per-sample input gradients and parameter gradients
/// in [`param_slices`] order.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub input: Vec<DAryTensor>,
    pub params: Vec<Vec<f64>>,
}

/// Dropout masks derive from `(seed, sample index, element index)`.
pub fn layer_forward(
    layer: &Layer,
    batch: &[DAryTensor],
    seed: Seed,
    training: bool,
) -> Result<(Vec<DAryTensor>, LayerCache)> {
    ops::check_batch(batch)?;
    let (out, mask) = match layer {
        Layer::Conv { weights } => (
            batch.iter().map(|f| conv_forward(f, weights)).collect::<Result<_>>()?,
            None,
        ),
        Layer::Relu { c } => (batch.iter().map(|f| relu_forward(f, *c)).collect::<Result<_>>()?, None),
        Layer::BatchNorm { eps } => (batchnorm_forward(batch, *eps)?, None),
        Layer::AvgPool { window } => (
            batch
                .iter()
                .map(|f| pool_forward(f, *window, PoolMode::Avg))
                .collect::<Result<_>>()?,
            None,
        ),
        Layer::MaxPool { window } => {
            let sel: Vec<Vec<usize>> = batch
                .iter()
                .map(|f| maxpool_selection(f, *window))
                .collect::<Result<_>>()?;
            let out = batch.iter().zip(&sel).map(|(f, s)| ops::gather(f, s)).collect();
            (out, Some(LayerMask::Pool(sel)))
        }
        Layer::Dropout { rate } => {
            if training {
                let keep: Vec<Vec<bool>> = batch
                    .iter()
                    .enumerate()
                    .map(|(k, f)| dropout_mask(f.n(), *rate, seed.derive(k as u64)))
                    .collect::<Result<_>>()?;
                let out = batch
                    .iter()
                    .zip(&keep)
                    .map(|(f, m)| apply_dropout_mask(f, m, *rate))
                    .collect::<Result<_>>()?;
                (out, Some(LayerMask::Dropout(keep)))
            } else {
                ops::check_rate(*rate)?;
                (batch.to_vec(), Some(LayerMask::Identity))
            }
        }
        Layer::Skip { inner } => {
            let (phi, caches) = stack_forward(inner, batch, seed, training)?;
            let out = batch
                .iter()
                .zip(&phi)
                .map(|(f, p)| {
                    if !p.same_shape(f) {
                        return Err(Error::shape("skip inner stack changed the feature shape"));
                    }
                    f.add(p)
                })
                .collect::<Result<_>>()?;
            (out, Some(LayerMask::Inner(caches)))
        }
    };
    Ok((
        out,
        LayerCache {
            input: batch.to_vec(),
            mask,
        },
    ))
}

pub fn layer_backward(layer: &Layer, cache: &LayerCache, upstream: &[DAryTensor]) -> Result<LayerGrad> {
    if upstream.len() != cache.input.len() {
        return Err(Error::shape("upstream batch size differs from forward batch"));
    }
    let input = &cache.input;
    let grad = match layer {
        Layer::Conv { weights } => {
            let mut dw = vec![0.0; weights.data().len()];
            let mut dx = Vec::with_capacity(input.len());
            for (x, g) in input.iter().zip(upstream) {
                let (gx, gw) = conv_backward(x, weights, g)?;
                dw.iter_mut().zip(gw.data()).for_each(|(a, b)| *a += b);
                dx.push(gx);
            }
            LayerGrad {
                input: dx,
                params: vec![dw],
            }
        }
        Layer::Relu { c } => LayerGrad {
            input: input
                .iter()
                .zip(upstream)
                .map(|(x, g)| relu_backward(x, *c, g))
                .collect::<Result<_>>()?,
            params: vec![],
        },
        Layer::BatchNorm { eps } => LayerGrad {
            input: batchnorm_backward(input, *eps, upstream)?,
            params: vec![],
        },
        Layer::AvgPool { window } => LayerGrad {
            input: input
                .iter()
                .zip(upstream)
                .map(|(x, g)| avgpool_backward(x.n(), *window, g))
                .collect::<Result<_>>()?,
            params: vec![],
        },
        Layer::MaxPool { .. } => {
            let Some(LayerMask::Pool(sel)) = &cache.mask else {
                return Err(Error::MissingMask("maxpool"));
            };
            LayerGrad {
                input: input
                    .iter()
                    .zip(upstream)
                    .zip(sel)
                    .map(|((x, g), s)| maxpool_backward(x.n(), s, g))
                    .collect::<Result<_>>()?,
                params: vec![],
            }
        }
        Layer::Dropout { rate } => match &cache.mask {
            Some(LayerMask::Dropout(keep)) => LayerGrad {
                input: upstream
                    .iter()
                    .zip(keep)
                    .map(|(g, k)| apply_dropout_mask(g, k, *rate))
                    .collect::<Result<_>>()?,
                params: vec![],
            },
            Some(LayerMask::Identity) => LayerGrad {
                input: upstream.to_vec(),
                params: vec![],
            },
            _ => return Err(Error::MissingMask("dropout")),
        },
        Layer::Skip { inner } => {
            let Some(LayerMask::Inner(caches)) = &cache.mask else {
                return Err(Error::MissingMask("skip"));
            };
            let (inner_dx, params) = stack_backward(inner, caches, upstream)?;
            LayerGrad {
                input: upstream
                    .iter()
                    .zip(&inner_dx)
                    .map(|(g, h)| g.add(h))
                    .collect::<Result<_>>()?,
                params,
            }
        }
    };
    Ok(grad)
}

/// Runs `layers` in order. Layer `i` draws its randomness from `seed.derive(i)`.
pub fn stack_forward(
    layers: &[Layer],
    batch: &[DAryTensor],
    seed: Seed,
    training: bool,
) -> Result<(Vec<DAryTensor>, Vec<LayerCache>)> {
    let mut current = batch.to_vec();
    let mut caches = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (out, cache) = layer_forward(layer, &current, seed.derive(i as u64), training)?;
        caches.push(cache);
        current = out;
    }
    Ok((current, caches))
}

pub fn apply_stack(layers: &[Layer], batch: &[DAryTensor], seed: Seed, training: bool) -> Result<Vec<DAryTensor>> {
    stack_forward(layers, batch, seed, training).map(|(out, _)| out)
}

/// Returns input gradients and parameter gradients in [`param_slices`] order.
pub fn stack_backward(
    layers: &[Layer],
    caches: &[LayerCache],
    upstream: &[DAryTensor],
) -> Result<(Vec<DAryTensor>, Vec<Vec<f64>>)> {
    if caches.len() != layers.len() {
        return Err(Error::shape("cache count differs from layer count"));
    }
    let mut grad = upstream.to_vec();
    let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(layers.len());
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let g = layer_backward(layer, cache, &grad)?;
        grad = g.input;
        per_layer.push(g.params);
    }
    per_layer.reverse();
    Ok((grad, per_layer.into_iter().flatten().collect()))
}

/// Trainable parameter buffers, depth first.
pub fn param_slices(layers: &[Layer]) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            Layer::Conv { weights } => out.push(weights.data()),
            Layer::Skip { inner } => out.extend(param_slices(inner)),
            _ => {}
        }
    }
    out
}

pub fn param_slices_mut(layers: &mut [Layer]) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            Layer::Conv { weights } => out.push(weights.data_mut()),
            Layer::Skip { inner } => out.extend(param_slices_mut(inner)),
            _ => {}
        }
    }
    out
}
