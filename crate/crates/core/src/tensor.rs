//! d-ary feature tensors.
//!
//! A [`DAryTensor`] holds `n` elements, each a `d`-component real vector,
//! stored element-major: the `d` components of element `v` are contiguous.
//! Component 0 is the slot that carries the real feature before encryption;
//! components `1..d` carry the fooling counterparts.

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::rotation::RotationMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DAryTensor {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl DAryTensor {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::shape("tensor must have at least one element"));
        }
        if d < 2 {
            return Err(Error::invalid(format!("d-ary tensors need d >= 2, got {d}")));
        }
        if data.len() != n * d {
            return Err(Error::shape(format!(
                "tensor with n={n}, d={d} needs {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor values".into()));
        }
        Ok(DAryTensor { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        DAryTensor {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    /// Builds a tensor from `d` component vectors of equal length `n`.
    pub fn from_components(components: &[Vec<f64>]) -> Result<Self> {
        let d = components.len();
        let n = components.first().map_or(0, Vec::len);
        if components.iter().any(|c| c.len() != n) {
            return Err(Error::shape("component vectors differ in length"));
        }
        let mut data = vec![0.0; n * d];
        for (k, comp) in components.iter().enumerate() {
            for (v, &x) in comp.iter().enumerate() {
                data[v * d + k] = x;
            }
        }
        DAryTensor::new(n, d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn element(&self, v: usize) -> &[f64] {
        &self.data[v * self.d..(v + 1) * self.d]
    }

    #[inline]
    pub fn element_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.data[v * self.d..(v + 1) * self.d]
    }

    pub fn elements(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    /// Real vector of length `n` holding component `k` of every element.
    pub fn component(&self, k: usize) -> Vec<f64> {
        assert!(k < self.d, "component {k} out of range for d={}", self.d);
        self.elements().map(|e| e[k]).collect()
    }

    /// L2 norm of every element.
    pub fn element_norms(&self) -> Vec<f64> {
        self.elements().map(norm).collect()
    }

    pub fn same_shape(&self, other: &DAryTensor) -> bool {
        self.n == other.n && self.d == other.d
    }

    pub fn max_abs_diff(&self, other: &DAryTensor) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add(&self, other: &DAryTensor) -> Result<DAryTensor> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "cannot add ({}, {}) and ({}, {})",
                self.n, self.d, other.n, other.d
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DAryTensor {
            n: self.n,
            d: self.d,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> DAryTensor {
        DAryTensor {
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Applies `rotation` to every element: `v ↦ R·v`.
pub fn rotate(f: &DAryTensor, rotation: &RotationMatrix) -> Result<DAryTensor> {
    let d = f.d();
    if rotation.d() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: rotation.d(),
        });
    }
    let r = rotation.entries();
    let mut out = DAryTensor::zeros(f.n(), d);
    for (src, dst) in f.elements().zip(out.data.chunks_exact_mut(d)) {
        for (i, o) in dst.iter_mut().enumerate() {
            let row = &r[i * d..(i + 1) * d];
            *o = row.iter().zip(src).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Applies `Rᵀ` to every element, the inverse of [`rotate`].
pub fn rotate_inverse(f: &DAryTensor, rotation: &RotationMatrix) -> Result<DAryTensor> {
    rotate(f, &rotation.transpose())
}

/// Zero-pads every element from `d'` to `d` components.
pub fn embed_feature(low: &DAryTensor, d: usize) -> Result<DAryTensor> {
    if d <= low.d() {
        return Err(Error::invalid(format!(
            "target dimension {d} must exceed source dimension {}",
            low.d()
        )));
    }
    let mut out = DAryTensor::zeros(low.n(), d);
    for (src, dst) in low.elements().zip(out.data.chunks_exact_mut(d)) {
        dst[..src.len()].copy_from_slice(src);
    }
    Ok(out)
}

/// Keeps only the first `d` components of every element.
pub fn project_feature(high: &DAryTensor, d: usize) -> Result<DAryTensor> {
    if d < 2 || d > high.d() {
        return Err(Error::invalid(format!(
            "cannot project d={} onto {d} components",
            high.d()
        )));
    }
    let data = high.elements().flat_map(|e| e[..d].iter().copied()).collect();
    DAryTensor::new(high.n(), d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use crate::rotation::sample_rotation;

    fn t(n: usize, d: usize, data: &[f64]) -> DAryTensor {
        DAryTensor::new(n, d, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DAryTensor::new(1, 1, vec![0.0]).is_err());
        assert!(DAryTensor::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DAryTensor::new(1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn component_views() {
        let f = DAryTensor::from_components(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(f.n(), 2);
        assert_eq!(f.d(), 3);
        assert_eq!(f.element(1), &[2.0, 4.0, 6.0]);
        assert_eq!(f.component(2), vec![5.0, 6.0]);
    }

    #[test]
    fn rotate_identity_and_quarter_turn() {
        let f = t(1, 2, &[1.0, 0.0]);
        assert_eq!(rotate(&f, &RotationMatrix::identity(2)).unwrap(), f);
        let quarter = RotationMatrix::from_angle_2d(std::f64::consts::FRAC_PI_2);
        let g = rotate(&f, &quarter).unwrap();
        assert!(g.max_abs_diff(&t(1, 2, &[0.0, 1.0])) < 1e-15);
    }

    #[test]
    fn rotate_preserves_norm_of_three_four() {
        let f = t(1, 2, &[3.0, 4.0]);
        for s in 0..50 {
            let r = sample_rotation(2, Seed(s)).unwrap();
            let g = rotate(&f, &r).unwrap();
            assert!((g.element_norms()[0] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_rejects_dimension_mismatch() {
        let f = t(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            rotate(&f, &RotationMatrix::identity(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rotate_composes() {
        let f = DAryTensor::new(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let r1 = sample_rotation(3, Seed(1)).unwrap();
        let r2 = sample_rotation(3, Seed(2)).unwrap();
        let two_step = rotate(&rotate(&f, &r1).unwrap(), &r2).unwrap();
        let composed = rotate(&f, &r2.compose(&r1).unwrap()).unwrap();
        assert!(two_step.max_abs_diff(&composed) < 1e-12);
    }

    #[test]
    fn embed_feature_pads_with_zeros() {
        let low = t(1, 2, &[3.0, 4.0]);
        let high = embed_feature(&low, 5).unwrap();
        assert_eq!(high.element(0), &[3.0, 4.0, 0.0, 0.0, 0.0]);
        assert_eq!(project_feature(&high, 2).unwrap(), low);
        assert_eq!(high.element_norms(), low.element_norms());
        assert!(embed_feature(&low, 2).is_err());
    }
}
