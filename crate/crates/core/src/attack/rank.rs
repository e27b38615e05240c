//! Rank of an estimated phase: how many "distinct" phases (caps of angular
//! radius π/36) fit inside the cap of radius Δθ around the true phase.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Seed;

/// Phases closer than this are treated as the same entity.
pub const SAME_ENTITY_ANGLE: f64 = PI / 36.0;
/// Sample count used when a dimension has no closed form.
pub const FALLBACK_SAMPLES: usize = 200_000;
/// Number of reference poles averaged in the Monte Carlo estimate.
pub const MONTE_CARLO_POLES: usize = 512;
const MIN_SAMPLES: usize = 10_000;

fn check_angle(delta_theta: f64) -> Result<()> {
    if !(0.0..=PI).contains(&delta_theta) {
        return Err(Error::invalid(format!("angle {delta_theta} outside [0, π]")));
    }
    Ok(())
}

/// Closed-form rank for `d ∈ {2, 3, 5}`; other dimensions use
/// [`rank_monte_carlo`] with [`FALLBACK_SAMPLES`] points and a fixed seed.
pub fn rank_of_estimate(delta_theta: f64, d: usize) -> Result<f64> {
    check_angle(delta_theta)?;
    let c = delta_theta.cos();
    let c0 = SAME_ENTITY_ANGLE.cos();
    match d {
        2 => Ok(delta_theta / SAME_ENTITY_ANGLE),
        3 => Ok((1.0 - c) / (1.0 - c0)),
        5 => Ok((2.0 - 3.0 * c + c.powi(3)) / (2.0 - 3.0 * c0 + c0.powi(3))),
        _ => rank_monte_carlo(delta_theta, d, FALLBACK_SAMPLES, Seed(0)),
    }
}

pub fn rank_monte_carlo(delta_theta: f64, d: usize, samples: usize, seed: Seed) -> Result<f64> {
    Ok(rank_monte_carlo_many(&[delta_theta], d, samples, seed)?[0])
}

fn unit_points(d: usize, count: usize, seed: Seed) -> Vec<f64> {
    let mut rng = seed.rng();
    let mut out = Vec::with_capacity(count * d);
    let mut p = vec![0.0; d];
    for _ in 0..count {
        let r = loop {
            p.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r > 0.0 {
                break r;
            }
        };
        out.extend(p.iter().map(|v| v / r));
    }
    out
}

/// Monte Carlo rank for several angles at once. Uniform points on
/// `S^{d-1}` (normalised Gaussians) are compared against
/// [`MONTE_CARLO_POLES`] random poles; the rank is the number of
/// (pole, point) pairs within `Δθ` divided by the number within π/36, both
/// counted over the same pairs.
pub fn rank_monte_carlo_many(deltas: &[f64], d: usize, samples: usize, seed: Seed) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(format!("sphere dimension d must be >= 2, got {d}")));
    }
    if samples < MIN_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "{samples} samples requested, at least {MIN_SAMPLES} needed"
        )));
    }
    deltas.iter().try_for_each(|&t| check_angle(t))?;
    let points = unit_points(d, samples, seed.derive(0));
    let poles = unit_points(d, MONTE_CARLO_POLES, seed.derive(1));
    // Reference threshold goes last.
    let thresholds: Vec<f64> = deltas
        .iter()
        .chain(std::iter::once(&SAME_ENTITY_ANGLE))
        .map(|t| t.cos())
        .collect();
    let counts = poles
        .par_chunks_exact(d)
        .map(|pole| {
            let mut c = vec![0u64; thresholds.len()];
            for x in points.chunks_exact(d) {
                let dot = x.iter().zip(pole).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
                for (ci, &t) in c.iter_mut().zip(&thresholds) {
                    *ci += u64::from(dot >= t);
                }
            }
            c
        })
        .reduce(
            || vec![0u64; thresholds.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let reference = *counts.last().expect("reference threshold");
    if reference == 0 {
        return Err(Error::InsufficientSamples(
            "no sample fell inside the π/36 reference cap; use more samples".into(),
        ));
    }
    Ok(counts[..deltas.len()]
        .iter()
        .map(|&c| c as f64 / reference as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_angle_has_rank_one() {
        for d in [2, 3, 5] {
            assert!((rank_of_estimate(SAME_ENTITY_ANGLE, d).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(rank_monte_carlo(SAME_ENTITY_ANGLE, 3, 10_000, Seed(1)).unwrap(), 1.0);
    }

    #[test]
    fn closed_form_values() {
        assert!((rank_of_estimate(PI, 2).unwrap() - 36.0).abs() < 1e-12);
        let d3 = rank_of_estimate(PI, 3).unwrap();
        assert!((d3 - 2.0 / (1.0 - (5.0f64).to_radians().cos())).abs() < 1e-9);
        assert!((d3 - 525.6).abs() < 0.1);
        let d5 = rank_of_estimate(PI, 5).unwrap();
        assert!(d5 > 9.0e4 && d5 < 9.6e4, "{d5}");
    }

    #[test]
    fn monotone_and_range_checked() {
        for d in [2, 3, 5] {
            let mut prev = -1.0;
            for i in 0..100 {
                let r = rank_of_estimate(i as f64 / 99.0 * PI, d).unwrap();
                assert!(r >= prev);
                prev = r;
            }
        }
        assert!(rank_of_estimate(-0.1, 3).is_err());
        assert!(rank_of_estimate(3.2, 3).is_err());
        assert!(rank_monte_carlo(0.5, 3, 100, Seed(0)).is_err());
    }
}
