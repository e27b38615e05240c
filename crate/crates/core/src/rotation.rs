//! Rotation keys: SO(d) matrices, their validation, Haar sampling, the phase
//! vector `θ = R·ρ` and angles between phases.

use crate::error::{Error, Result};
use std::f64::consts::PI;

use crate::linalg::{norm, Matrix};
use crate::rng::Seed;

/// Tolerance for orthogonality and determinant checks on freshly built keys.
pub const ROTATION_TOLERANCE: f64 = 1e-10;

/// A `d×d` special orthogonal matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    d: usize,
    entries: Vec<f64>,
}

/// Outcome of [`validate_rotation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationReport {
    /// Max absolute entry of `RᵀR − I`.
    pub orthogonality_error: f64,
    /// `|det(R) − 1|`.
    pub determinant_error: f64,
}

impl RotationReport {
    pub fn passed(&self) -> bool {
        self.orthogonality_error <= ROTATION_TOLERANCE && self.determinant_error <= ROTATION_TOLERANCE
    }
}

/// Checks that a square matrix is a rotation.
pub fn validate_rotation(m: &Matrix) -> Result<RotationReport> {
    if m.rows() != m.cols() {
        return Err(Error::shape(format!("{}x{} matrix is not square", m.rows(), m.cols())));
    }
    let gram = m.transpose().matmul(m)?;
    let orthogonality_error = gram.max_abs_diff(&Matrix::identity(m.rows()));
    let determinant_error = (m.determinant()? - 1.0).abs();
    Ok(RotationReport {
        orthogonality_error,
        determinant_error,
    })
}

impl RotationMatrix {
    /// Wraps a matrix after checking it lies in SO(d).
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        let d = m.rows();
        if d < 2 {
            return Err(Error::invalid(format!("rotation dimension must be >= 2, got {d}")));
        }
        let report = validate_rotation(&m)?;
        if !report.passed() {
            return Err(Error::invalid(format!(
                "not a rotation: orthogonality error {:.3e}, determinant error {:.3e}",
                report.orthogonality_error, report.determinant_error
            )));
        }
        Ok(RotationMatrix {
            d,
            entries: m.into_data(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        RotationMatrix::from_matrix(Matrix::from_rows(rows)?)
    }

    pub fn identity(d: usize) -> Self {
        RotationMatrix {
            d,
            entries: Matrix::identity(d).into_data(),
        }
    }

    /// Planar rotation by `angle` radians (counter-clockwise).
    pub fn from_angle_2d(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix {
            d: 2,
            entries: vec![c, -s, s, c],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.d + c]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(self.d, self.d, self.entries.clone()).expect("rotation entries are finite")
    }

    /// `Rᵀ = R⁻¹`.
    pub fn transpose(&self) -> RotationMatrix {
        RotationMatrix {
            d: self.d,
            entries: self.to_matrix().transpose().into_data(),
        }
    }

    /// `self · other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RotationMatrix) -> Result<RotationMatrix> {
        let m = self.to_matrix().matmul(&other.to_matrix())?;
        Ok(RotationMatrix {
            d: self.d,
            entries: m.into_data(),
        })
    }

    pub fn report(&self) -> RotationReport {
        validate_rotation(&self.to_matrix()).expect("square by construction")
    }
}

/// Haar-uniform draw from SO(d).
///
/// A `d×d` standard normal matrix is QR-factored, each column of `Q` is
/// multiplied by the sign of the matching diagonal entry of `R` (giving a
/// Haar-distributed element of O(d)) and the last column is negated when the
/// determinant is −1.
pub fn sample_rotation(d: usize, seed: Seed) -> Result<RotationMatrix> {
    if d < 2 {
        return Err(Error::invalid(format!("rotation dimension must be >= 2, got {d}")));
    }
    let gaussian = Matrix::random_normal(d, d, 1.0, seed);
    let (mut q, r, reflections) = gaussian.householder_qr()?;
    let mut negative = reflections % 2 == 1;
    for c in 0..d {
        if r.get(c, c) < 0.0 {
            negative = !negative;
            for row in 0..d {
                let v = q.get(row, c);
                q.set(row, c, -v);
            }
        }
    }
    if negative {
        for row in 0..d {
            let v = q.get(row, d - 1);
            q.set(row, d - 1, -v);
        }
    }
    Ok(RotationMatrix {
        d,
        entries: q.into_data(),
    })
}

/// Unit vector `θ = R·ρ`, `ρ = [1, 0, …, 0]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseVector(Vec<f64>);

impl PhaseVector {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.len()
    }

    /// Angle to another phase in `[0, π]`.
    pub fn angle_to(&self, other: &PhaseVector) -> Result<f64> {
        if self.d() != other.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: other.d(),
            });
        }
        // Same value as arccos of the clamped inner product for unit vectors,
        // without the loss of precision near 0 and π.
        let diff: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect();
        let sum: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect();
        Ok((2.0 * norm(&diff).atan2(norm(&sum))).clamp(0.0, PI))
    }
}

/// The first column of `R`.
pub fn phase_of(rotation: &RotationMatrix) -> PhaseVector {
    PhaseVector((0..rotation.d()).map(|r| rotation.get(r, 0)).collect())
}

/// `Δθ = arccos⟨R·ρ, R′·ρ⟩` in `[0, π]`.
pub fn angle_between(a: &RotationMatrix, b: &RotationMatrix) -> Result<f64> {
    phase_of(a).angle_to(&phase_of(b))
}

/// Embeds a `d′`-dimensional rotation into SO(d) as `diag(R′, I)`.
pub fn embed_rotation(low: &RotationMatrix, d: usize) -> Result<RotationMatrix> {
    let dl = low.d();
    if d <= dl {
        return Err(Error::invalid(format!(
            "target dimension {d} must exceed source dimension {dl}"
        )));
    }
    let mut m = Matrix::identity(d);
    for r in 0..dl {
        for c in 0..dl {
            m.set(r, c, low.get(r, c));
        }
    }
    Ok(RotationMatrix {
        d,
        entries: m.into_data(),
    })
}
