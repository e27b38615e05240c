//! Central finite-difference checks of the analytic gradients.

use crate::dense::DenseStack;
use crate::error::{Error, Result};
use crate::layers::{self, layer_backward, layer_forward, Layer};
use crate::linalg::dot;
use crate::pipeline::ModelSpec;
use crate::rng::Seed;
use crate::rotation::RotationMatrix;
use crate::tensor::DAryTensor;

use super::cross_entropy;
use super::grads::{forward_batch, model_param_slices, model_param_slices_mut, task_gradients};

pub const FD_STEP: f64 = 1e-5;
/// Points closer than this to a kink (relu norm at C, pooling tie, dense
/// ReLU at zero) are rejected.
pub const BOUNDARY_MARGIN: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Default)]
struct Tally {
    rel: f64,
    abs: f64,
    checked: usize,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.rel = self.rel.max(relative_error(analytic, numeric));
        self.abs = self.abs.max((analytic - numeric).abs());
        self.checked += 1;
    }

    fn report(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.rel,
            max_abs_error: self.abs,
            checked: self.checked,
            tol,
            passed: self.rel <= tol,
        }
    }
}

fn central(mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP))
}

fn near(what: String) -> Error {
    Error::NearBoundary(what)
}

/// Rejects inputs within [`BOUNDARY_MARGIN`] of a non-differentiable point of
/// `layer`.
pub fn check_layer_boundaries(layer: &Layer, batch: &[DAryTensor], seed: Seed) -> Result<()> {
    match layer {
        Layer::Relu { c } => {
            for (s, f) in batch.iter().enumerate() {
                for (v, r) in f.element_norms().into_iter().enumerate() {
                    if (r - c).abs() < BOUNDARY_MARGIN {
                        return Err(near(format!(
                            "relu: sample {s} element {v} has norm {r} within margin of C={c}"
                        )));
                    }
                    if r < BOUNDARY_MARGIN {
                        return Err(near(format!("relu: sample {s} element {v} has norm {r} near zero")));
                    }
                }
            }
        }
        Layer::MaxPool { window } => {
            for (s, f) in batch.iter().enumerate() {
                let norms = f.element_norms();
                for (w, chunk) in norms.chunks(*window).enumerate() {
                    let mut sorted = chunk.to_vec();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    if sorted.len() > 1 && sorted[0] - sorted[1] < BOUNDARY_MARGIN {
                        return Err(near(format!("max pool: sample {s} window {w} has a near tie")));
                    }
                }
            }
        }
        Layer::Skip { inner } => {
            let mut current = batch.to_vec();
            for (i, l) in inner.iter().enumerate() {
                let s = seed.derive(i as u64);
                check_layer_boundaries(l, &current, s)?;
                current = layer_forward(l, &current, s, true)?.0;
            }
        }
        _ => {}
    }
    Ok(())
}

fn random_like(batch: &[DAryTensor], seed: Seed) -> Vec<DAryTensor> {
    batch
        .iter()
        .enumerate()
        .map(|(s, t)| {
            let m = crate::linalg::Matrix::random_normal(t.n(), t.d(), 1.0, seed.derive(s as u64));
            DAryTensor::new(t.n(), t.d(), m.into_data()).expect("shape from existing tensor")
        })
        .collect()
}

fn pairing(a: &[DAryTensor], b: &[DAryTensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dot(x.data(), y.data())).sum()
}

/// Checks input and parameter gradients of one layer for the scalar
/// `Σ ⟨u, layer(batch)⟩` with a random upstream `u`. Dropout masks are fixed
/// by `seed`.
pub fn grad_check_layer(layer: &Layer, batch: &[DAryTensor], seed: Seed, tol: f64) -> Result<GradCheckReport> {
    check_layer_boundaries(layer, batch, seed)?;
    let (out, cache) = layer_forward(layer, batch, seed, true)?;
    let upstream = random_like(&out, seed.derive(u64::MAX));
    let grad = layer_backward(layer, &cache, &upstream)?;
    let loss =
        |l: &Layer, b: &[DAryTensor]| -> Result<f64> { Ok(pairing(&layer_forward(l, b, seed, true)?.0, &upstream)) };

    let mut tally = Tally::default();
    for s in 0..batch.len() {
        for i in 0..batch[s].data().len() {
            let numeric = central(|h| {
                let mut b = batch.to_vec();
                b[s].data_mut()[i] += h;
                loss(layer, &b)
            })?;
            tally.add(grad.input[s].data()[i], numeric);
        }
    }
    let n_buf = layers::param_slices(std::slice::from_ref(layer)).len();
    for (b, g) in (0..n_buf).zip(&grad.params) {
        for (j, &analytic) in g.iter().enumerate() {
            let numeric = central(|h| {
                let mut l = layer.clone();
                layers::param_slices_mut(std::slice::from_mut(&mut l))[b][j] += h;
                loss(&l, batch)
            })?;
            tally.add(analytic, numeric);
        }
    }
    Ok(tally.report(tol))
}

/// Same check for an ordinary dense stack at input `x`.
pub fn grad_check_dense(stack: &DenseStack, x: &[f64], seed: Seed, tol: f64) -> Result<GradCheckReport> {
    let (y, cache) = stack.forward_cached(x)?;
    let margin = cache.relu_margin(stack);
    if margin < BOUNDARY_MARGIN {
        return Err(near(format!("dense relu pre-activation {margin} near zero")));
    }
    let mut rng_seed = seed.rng();
    let upstream: Vec<f64> = (0..y.len())
        .map(|_| rand::Rng::sample::<f64, _>(&mut rng_seed, rand_distr::StandardNormal))
        .collect();
    let (dx, grads) = stack.backward(&cache, &upstream)?;
    let loss = |s: &DenseStack, x: &[f64]| -> Result<f64> { Ok(dot(&s.forward(x)?, &upstream)) };
    let mut tally = Tally::default();
    for i in 0..x.len() {
        let numeric = central(|h| {
            let mut xp = x.to_vec();
            xp[i] += h;
            loss(stack, &xp)
        })?;
        tally.add(dx[i], numeric);
    }
    for (b, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.iter().enumerate() {
            let numeric = central(|h| {
                let mut s = stack.clone();
                s.param_slices_mut()[b][j] += h;
                loss(&s, x)
            })?;
            tally.add(analytic, numeric);
        }
    }
    Ok(tally.report(tol))
}

/// Checks the task-loss gradient of every model parameter (fooling heads
/// included) for one batch with fixed keys.
pub fn grad_check_pipeline(
    model: &ModelSpec,
    inputs: &[&[f64]],
    labels: &[usize],
    keys: &[RotationMatrix],
    seed: Seed,
    tol: f64,
) -> Result<GradCheckReport> {
    let fwd = forward_batch(model, inputs, keys, seed, true)?;
    let margin = fwd.dense_relu_margin(model);
    if margin < BOUNDARY_MARGIN {
        return Err(near(format!("dense relu pre-activation {margin} near zero")));
    }
    for (i, (layer, cache)) in model.processing.iter().zip(fwd.processing_caches()).enumerate() {
        check_layer_boundaries(layer, &cache.input, seed.derive(i as u64))
            .map_err(|e| near(format!("processing layer {i} ({}): {e}", layer.kind().name())))?;
    }
    let (_, grads, _) = task_gradients(model, &fwd, labels, true)?;
    let loss = |m: &ModelSpec| -> Result<f64> {
        let f = forward_batch(m, inputs, keys, seed, true)?;
        let mut total = 0.0;
        for (s, &l) in f.scores.iter().zip(labels) {
            total += cross_entropy(s, l)?;
        }
        Ok(total / labels.len() as f64)
    };
    let mut tally = Tally::default();
    for (b, g) in grads.iter().enumerate() {
        debug_assert_eq!(g.len(), model_param_slices(model)[b].len());
        for (j, &analytic) in g.iter().enumerate() {
            let numeric = central(|h| {
                let mut m = model.clone();
                model_param_slices_mut(&mut m)[b][j] += h;
                loss(&m)
            })?;
            tally.add(analytic, numeric);
        }
    }
    Ok(tally.report(tol))
}
