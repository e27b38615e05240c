//! Unit quaternions and the pure-quaternion (d = 3) special case.
//!
//! A 3-ary element `(a, b, c)` is the pure quaternion `a·i + b·j + c·k`;
//! encryption by `q` is the sandwich product `q·x·q̄`.

use std::ops::Mul;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Seed;
use crate::rotation::{RotationMatrix, ROTATION_TOLERANCE};
use crate::tensor::DAryTensor;

/// Plain quaternion `w + x·i + y·j + z·k`, used for intermediate products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub const fn pure(x: f64, y: f64, z: f64) -> Self {
        Quaternion { w: 0.0, x, y, z }
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm_squared(self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }
}

/// Hamilton product with `i² = j² = k² = ijk = −1`.
impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }
}

/// Quaternion with unit norm (within 1e-10).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion(Quaternion);

impl UnitQuaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n2 = q.norm_squared();
        if !n2.is_finite() || (n2 - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!("quaternion norm² {n2} is not 1")));
        }
        Ok(UnitQuaternion(q))
    }

    pub fn identity() -> Self {
        UnitQuaternion(Quaternion::new(1.0, 0.0, 0.0, 0.0))
    }

    /// `e^{o·θ/2} = cos(θ/2) + sin(θ/2)·(o₁i + o₂j + o₃k)` for a unit axis `o`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n.is_nan() || n <= 0.0 || !n.is_finite() {
            return Err(Error::invalid("rotation axis must be a non-zero finite vector"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        UnitQuaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Uniform draw on the 3-sphere (normalized Gaussian 4-vector).
    pub fn random(seed: Seed) -> Self {
        let mut rng = seed.rng();
        loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if n > 1e-12 {
                return UnitQuaternion(Quaternion::new(v[0] / n, v[1] / n, v[2] / n, v[3] / n));
            }
        }
    }

    pub fn quaternion(self) -> Quaternion {
        self.0
    }

    pub fn w(self) -> f64 {
        self.0.w
    }
    pub fn x(self) -> f64 {
        self.0.x
    }
    pub fn y(self) -> f64 {
        self.0.y
    }
    pub fn z(self) -> f64 {
        self.0.z
    }

    /// `q·(a·i + b·j + c·k)·q̄` as a 3-vector.
    pub fn rotate_vector(self, v: [f64; 3]) -> [f64; 3] {
        let p = self.0 * Quaternion::pure(v[0], v[1], v[2]) * self.0.conjugate();
        [p.x, p.y, p.z]
    }
}

/// Sandwich-product rotation of every element of a 3-ary tensor.
pub fn quat_rotate(x: &DAryTensor, q: UnitQuaternion) -> Result<DAryTensor> {
    if x.d() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: x.d(),
        });
    }
    let mut out = DAryTensor::zeros(x.n(), 3);
    for v in 0..x.n() {
        let e = x.element(v);
        let r = q.rotate_vector([e[0], e[1], e[2]]);
        out.element_mut(v).copy_from_slice(&r);
    }
    Ok(out)
}

/// The 3×3 rotation matrix acting on `(i, j, k)` coordinates the same way as
/// [`quat_rotate`].
pub fn quat_to_matrix(q: UnitQuaternion) -> Result<RotationMatrix> {
    let (w, x, y, z) = (q.w(), q.x(), q.y(), q.z());
    let m = Matrix::from_rows(&[
        vec![
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        vec![
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        vec![
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ])?;
    RotationMatrix::from_matrix(m)
}
