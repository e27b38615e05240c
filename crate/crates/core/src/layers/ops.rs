//! Forward and backward kernels for the six equivariant operations.
//!
//! Every forward op acts on whole d-vectors (or on each component with the same
//! real weights), so applying a rotation before or after gives the same result.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::rng::Seed;
use crate::tensor::DAryTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

fn check_finite(f: &DAryTensor) -> Result<()> {
    if f.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("d-ary tensor entry".into()))
    }
}

/// Bias-free linear map applied to each component: `out[o] = Σ_i W[o,i]·f[i]`.
pub fn conv_forward(f: &DAryTensor, weights: &Matrix) -> Result<DAryTensor> {
    if weights.cols() != f.n() {
        return Err(Error::shape(format!(
            "conv weights have {} columns but the feature has {} elements",
            weights.cols(),
            f.n()
        )));
    }
    check_finite(f)?;
    let d = f.d();
    let mut out = DAryTensor::zeros(weights.rows(), d);
    for o in 0..weights.rows() {
        let dst = out.element_mut(o);
        for (i, &w) in weights.row(o).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (acc, &x) in dst.iter_mut().zip(f.element(i)) {
                *acc += w * x;
            }
        }
    }
    Ok(out)
}

/// Returns `(input_grad, weight_grad)`.
pub fn conv_backward(input: &DAryTensor, weights: &Matrix, upstream: &DAryTensor) -> Result<(DAryTensor, Matrix)> {
    if upstream.n() != weights.rows() || upstream.d() != input.d() || weights.cols() != input.n() {
        return Err(Error::shape("conv backward shapes do not chain"));
    }
    let d = input.d();
    let mut dx = DAryTensor::zeros(input.n(), d);
    let mut dw = Matrix::zeros(weights.rows(), weights.cols());
    for o in 0..weights.rows() {
        let g = upstream.element(o);
        for i in 0..weights.cols() {
            let w = weights.get(o, i);
            for (acc, &gv) in dx.element_mut(i).iter_mut().zip(g) {
                *acc += w * gv;
            }
            dw.set(o, i, dot(g, input.element(i)));
        }
    }
    Ok((dx, dw))
}

fn check_c(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("relu clamp C must be positive, got {c}")))
    }
}

/// `f_v ↦ ‖f_v‖ / max(‖f_v‖, C) · f_v`, with factor 0 at `f_v = 0`.
pub fn relu_forward(f: &DAryTensor, c: f64) -> Result<DAryTensor> {
    check_c(c)?;
    check_finite(f)?;
    let mut out = f.clone();
    for v in 0..f.n() {
        let e = out.element_mut(v);
        let r = norm(e);
        let factor = if r == 0.0 { 0.0 } else { r / r.max(c) };
        e.iter_mut().for_each(|x| *x *= factor);
    }
    Ok(out)
}

/// Exact derivative of the norm clamp. For `‖f‖ >= C` it is the identity; below
/// it, `y = (r/C)·f` has Jacobian `(r·I + f·fᵀ/r)/C`, which is symmetric.
pub fn relu_backward(input: &DAryTensor, c: f64, upstream: &DAryTensor) -> Result<DAryTensor> {
    check_c(c)?;
    if !input.same_shape(upstream) {
        return Err(Error::shape("relu backward upstream shape"));
    }
    let mut dx = upstream.clone();
    for v in 0..input.n() {
        let f = input.element(v);
        let r = norm(f);
        if r >= c {
            continue;
        }
        let g = dx.element_mut(v);
        if r == 0.0 {
            g.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let fg = dot(f, g);
        for (gi, &fi) in g.iter_mut().zip(f) {
            *gi = (r * *gi + fi * fg / r) / c;
        }
    }
    Ok(dx)
}

pub(crate) fn check_batch(batch: &[DAryTensor]) -> Result<(usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (n, d) = (first.n(), first.d());
    if batch.iter().any(|t| t.n() != n || t.d() != d) {
        return Err(Error::shape("batch members differ in shape"));
    }
    Ok((n, d))
}

/// Per element index `v`, the divisor `√(mean_k ‖f_v^(k)‖² + ε)`.
pub fn batchnorm_divisors(batch: &[DAryTensor], eps: f64) -> Result<Vec<f64>> {
    if eps.is_nan() || eps < 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("batchnorm eps must be >= 0, got {eps}")));
    }
    let (n, _) = check_batch(batch)?;
    let k = batch.len() as f64;
    Ok((0..n)
        .map(|v| {
            let ms = batch.iter().map(|t| dot(t.element(v), t.element(v))).sum::<f64>() / k;
            (ms + eps).sqrt()
        })
        .collect())
}

/// Scale-only batch normalization: `f_v^(k) / √(E_k'[‖f_v^(k')‖²] + ε)`.
/// Element indices whose divisor is zero (all-zero column with `ε = 0`) stay zero.
pub fn batchnorm_forward(batch: &[DAryTensor], eps: f64) -> Result<Vec<DAryTensor>> {
    let div = batchnorm_divisors(batch, eps)?;
    batch.iter().try_for_each(check_finite)?;
    Ok(batch
        .iter()
        .map(|t| {
            let mut out = t.clone();
            for (v, &s) in div.iter().enumerate() {
                let inv = if s > 0.0 { 1.0 / s } else { 0.0 };
                out.element_mut(v).iter_mut().for_each(|x| *x *= inv);
            }
            out
        })
        .collect())
}

pub fn batchnorm_backward(batch: &[DAryTensor], eps: f64, upstream: &[DAryTensor]) -> Result<Vec<DAryTensor>> {
    let div = batchnorm_divisors(batch, eps)?;
    if upstream.len() != batch.len() || upstream.iter().zip(batch).any(|(u, b)| !u.same_shape(b)) {
        return Err(Error::shape("batchnorm backward upstream shape"));
    }
    let k = batch.len() as f64;
    let mut grads: Vec<DAryTensor> = upstream.to_vec();
    for (v, &s) in div.iter().enumerate() {
        if s == 0.0 {
            grads
                .iter_mut()
                .for_each(|g| g.element_mut(v).iter_mut().for_each(|x| *x = 0.0));
            continue;
        }
        let cross: f64 = batch
            .iter()
            .zip(upstream)
            .map(|(x, g)| dot(x.element(v), g.element(v)))
            .sum();
        let coef = cross / (k * s * s * s);
        for (g, x) in grads.iter_mut().zip(batch) {
            for (gi, &xi) in g.element_mut(v).iter_mut().zip(x.element(v)) {
                *gi = *gi / s - coef * xi;
            }
        }
    }
    Ok(grads)
}

fn check_window(n: usize, window: usize) -> Result<()> {
    if window == 0 || !n.is_multiple_of(window) {
        return Err(Error::shape(format!(
            "pooling window {window} does not divide element count {n}"
        )));
    }
    Ok(())
}

/// Index of the largest-norm element in each window (lowest index on ties).
pub fn maxpool_selection(f: &DAryTensor, window: usize) -> Result<Vec<usize>> {
    check_window(f.n(), window)?;
    let norms = f.element_norms();
    Ok(norms
        .chunks_exact(window)
        .enumerate()
        .map(|(w, chunk)| {
            let mut best = 0;
            for (i, &nv) in chunk.iter().enumerate() {
                if nv > chunk[best] {
                    best = i;
                }
            }
            w * window + best
        })
        .collect())
}

pub fn pool_forward(f: &DAryTensor, window: usize, mode: PoolMode) -> Result<DAryTensor> {
    check_window(f.n(), window)?;
    check_finite(f)?;
    match mode {
        PoolMode::Max => {
            let sel = maxpool_selection(f, window)?;
            Ok(gather(f, &sel))
        }
        PoolMode::Avg => {
            let d = f.d();
            let mut out = DAryTensor::zeros(f.n() / window, d);
            for w in 0..out.n() {
                let dst = out.element_mut(w);
                for i in w * window..(w + 1) * window {
                    for (acc, &x) in dst.iter_mut().zip(f.element(i)) {
                        *acc += x;
                    }
                }
                dst.iter_mut().for_each(|x| *x /= window as f64);
            }
            Ok(out)
        }
    }
}

pub(crate) fn gather(f: &DAryTensor, selection: &[usize]) -> DAryTensor {
    let mut out = DAryTensor::zeros(selection.len(), f.d());
    for (w, &i) in selection.iter().enumerate() {
        out.element_mut(w).copy_from_slice(f.element(i));
    }
    out
}

pub fn avgpool_backward(n_in: usize, window: usize, upstream: &DAryTensor) -> Result<DAryTensor> {
    check_window(n_in, window)?;
    if upstream.n() * window != n_in {
        return Err(Error::shape("avgpool backward upstream shape"));
    }
    let mut dx = DAryTensor::zeros(n_in, upstream.d());
    for i in 0..n_in {
        let g = upstream.element(i / window);
        for (a, &gv) in dx.element_mut(i).iter_mut().zip(g) {
            *a = gv / window as f64;
        }
    }
    Ok(dx)
}

pub fn maxpool_backward(n_in: usize, selection: &[usize], upstream: &DAryTensor) -> Result<DAryTensor> {
    if selection.len() != upstream.n() || selection.iter().any(|&i| i >= n_in) {
        return Err(Error::shape("maxpool selection does not match upstream"));
    }
    let mut dx = DAryTensor::zeros(n_in, upstream.d());
    for (w, &i) in selection.iter().enumerate() {
        dx.element_mut(i).copy_from_slice(upstream.element(w));
    }
    Ok(dx)
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Keep flags for `n` elements; element `v` survives iff its uniform draw is `>= rate`.
pub fn dropout_mask(n: usize, rate: f64, seed: Seed) -> Result<Vec<bool>> {
    check_rate(rate)?;
    Ok((0..n as u64).map(|v| seed.unit_at(v) >= rate).collect())
}

pub fn apply_dropout_mask(f: &DAryTensor, keep: &[bool], rate: f64) -> Result<DAryTensor> {
    check_rate(rate)?;
    if keep.len() != f.n() {
        return Err(Error::shape("dropout mask length"));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = f.clone();
    for (v, &k) in keep.iter().enumerate() {
        let s = if k { scale } else { 0.0 };
        out.element_mut(v).iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}

/// Whole-element inverted dropout; identity when `training` is false.
pub fn dropout_forward(f: &DAryTensor, rate: f64, seed: Seed, training: bool) -> Result<DAryTensor> {
    check_rate(rate)?;
    check_finite(f)?;
    if !training {
        return Ok(f.clone());
    }
    let keep = dropout_mask(f.n(), rate, seed)?;
    apply_dropout_mask(f, &keep, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, d: usize, data: &[f64]) -> DAryTensor {
        DAryTensor::new(n, d, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let f = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(conv_forward(&f, &Matrix::identity(2)).unwrap(), f);
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(conv_forward(&f, &w).unwrap(), t(1, 2, &[1.0, 1.0]));
        assert!(conv_forward(&f, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn conv_weight_grad_by_hand() {
        // dW[0][i] = Σ_c up[0][c]·f[i][c]: element 0 is (1,0), element 1 is (0,1).
        let f = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let up = t(1, 2, &[1.0, 1.0]);
        let (dx, dw) = conv_backward(&f, &w, &up).unwrap();
        assert_eq!(dw.data(), &[1.0, 1.0]);
        assert_eq!(dx, t(2, 2, &[1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_forward(&t(1, 3, &[0.0; 3]), 1.0).unwrap(), t(1, 3, &[0.0; 3]));
        let y = relu_forward(&t(1, 2, &[0.3, 0.4]), 1.0).unwrap();
        assert!(y.max_abs_diff(&t(1, 2, &[0.15, 0.2])) < 1e-15);
        assert_eq!(relu_forward(&t(1, 2, &[3.0, 4.0]), 1.0).unwrap(), t(1, 2, &[3.0, 4.0]));
        assert!(relu_forward(&t(1, 2, &[1.0, 0.0]), 0.0).is_err());
        assert!(relu_forward(&t(1, 2, &[1.0, 0.0]), -1.0).is_err());
    }

    #[test]
    fn relu_identity_branch_gradient() {
        let up = t(1, 2, &[0.7, -0.2]);
        assert_eq!(relu_backward(&t(1, 2, &[3.0, 4.0]), 1.0, &up).unwrap(), up);
    }

    #[test]
    fn batchnorm_examples() {
        let b = vec![t(1, 2, &[1.0, 0.0]), t(1, 2, &[0.0, 1.0])];
        assert_eq!(batchnorm_forward(&b, 0.0).unwrap(), b);

        let b = vec![t(1, 2, &[2.0, 0.0]), t(1, 2, &[0.0, 0.0])];
        let y = batchnorm_forward(&b, 0.0).unwrap();
        assert!((y[0].element(0)[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(y[1], t(1, 2, &[0.0, 0.0]));

        let z = vec![t(2, 3, &[0.0; 6]); 3];
        assert_eq!(batchnorm_forward(&z, 1e-5).unwrap(), z);
        assert!(batchnorm_forward(&[], 1e-5).is_err());
    }

    #[test]
    fn pool_examples() {
        let f = t(2, 2, &[1.0, 1.0, 2.0, 0.0]);
        assert_eq!(pool_forward(&f, 2, PoolMode::Max).unwrap(), t(1, 2, &[2.0, 0.0]));
        assert_eq!(pool_forward(&f, 2, PoolMode::Avg).unwrap(), t(1, 2, &[1.5, 0.5]));
        let tie = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pool_forward(&tie, 2, PoolMode::Max).unwrap(), t(1, 2, &[1.0, 0.0]));
        assert!(pool_forward(&t(3, 2, &[0.0; 6]), 2, PoolMode::Avg).is_err());
    }

    #[test]
    fn dropout_examples() {
        let f = t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(dropout_forward(&f, 0.0, Seed(1), true).unwrap(), f);
        assert_eq!(dropout_forward(&f, 0.9, Seed(1), false).unwrap(), f);
        let a = dropout_forward(&f, 0.5, Seed(5), true).unwrap();
        let b = dropout_forward(&f, 0.5, Seed(5), true).unwrap();
        assert_eq!(a, b);
        for v in 0..4 {
            let e = a.element(v);
            assert!(e == [0.0, 0.0] || e.iter().zip(f.element(v)).all(|(y, x)| *y == 2.0 * x));
        }
        assert!(dropout_forward(&f, 1.0, Seed(1), true).is_err());
        assert!(dropout_forward(&f, -0.1, Seed(1), true).is_err());
    }
}
