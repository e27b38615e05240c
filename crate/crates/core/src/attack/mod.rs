//! Attackers and privacy metrics.
//!
//! The inversion attacker does not know the key. It samples candidate
//! rotations, decrypts component 0 under each, and keeps the candidate its
//! scorer likes best. Scorers are pluggable so the same search can be driven
//! by a trained critic, by an oracle that knows the true feature, or by
//! nothing at all.

mod rank;
mod report;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::rng::Seed;
use crate::rotation::{sample_rotation, RotationMatrix};
use crate::tensor::DAryTensor;
use crate::training::Critic;

pub use rank::{
    rank_monte_carlo, rank_monte_carlo_many, rank_of_estimate, FALLBACK_SAMPLES, MONTE_CARLO_POLES, SAME_ENTITY_ANGLE,
};
pub use report::{
    evaluate_privacy, read_rows_csv, summarize, write_rows_csv, write_summary_json, AggregateStats, AttackConfig,
    AttackReport, AttackerKind, ReportRow,
};

/// Default number of candidate rotations per attack.
pub const DEFAULT_CANDIDATES: usize = 1000;

/// Scores a candidate decryption; higher means more plausible.
pub trait Scorer {
    fn score(&self, candidate: &[f64]) -> Result<f64>;
}

impl Scorer for Critic {
    fn score(&self, candidate: &[f64]) -> Result<f64> {
        Critic::score(self, candidate)
    }
}

/// Knows the true feature: `-‖a′ − a‖`. Only for testing the search.
#[derive(Debug, Clone)]
pub struct CheatingScorer {
    pub truth: Vec<f64>,
}

impl Scorer for CheatingScorer {
    fn score(&self, candidate: &[f64]) -> Result<f64> {
        if candidate.len() != self.truth.len() {
            return Err(Error::DimensionMismatch {
                expected: self.truth.len(),
                found: candidate.len(),
            });
        }
        let diff: Vec<f64> = candidate.iter().zip(&self.truth).map(|(a, b)| a - b).collect();
        Ok(-norm(&diff))
    }
}

/// Uninformed baseline: every candidate looks the same.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _candidate: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub rotation: RotationMatrix,
    pub estimate: Vec<f64>,
    pub score: f64,
    /// Position of the winner in the candidate list.
    pub index: usize,
}

/// The `j`-th candidate key of an attack seeded with `seed`.
pub fn attack_candidate(d: usize, j: usize, seed: Seed) -> Result<RotationMatrix> {
    sample_rotation(d, seed.derive(j as u64))
}

/// Component 0 of `Rᵀ∘f` without forming the other components.
fn first_component_under(f: &DAryTensor, r: &RotationMatrix) -> Vec<f64> {
    let column: Vec<f64> = (0..r.d()).map(|j| r.get(j, 0)).collect();
    f.elements().map(|e| dot(e, &column)).collect()
}

/// Tries `n` random keys on `f` and returns the best-scoring decryption.
/// Ties go to the earliest candidate.
pub fn inversion_attack(f: &DAryTensor, scorer: &dyn Scorer, n: usize, seed: Seed) -> Result<AttackOutcome> {
    if n == 0 {
        return Err(Error::invalid("inversion attack needs at least one candidate"));
    }
    let mut best: Option<AttackOutcome> = None;
    for j in 0..n {
        let r = attack_candidate(f.d(), j, seed)?;
        let estimate = first_component_under(f, &r);
        let score = scorer.score(&estimate)?;
        if score.is_nan() {
            return Err(Error::NonFinite(format!("scorer output for candidate {j}")));
        }
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(AttackOutcome {
                rotation: r,
                estimate,
                score,
                index: j,
            });
        }
    }
    Ok(best.expect("n >= 1"))
}

/// Majority label of the `k` nearest training features (L2). Distance ties go
/// to the lower training index; vote ties go to the label whose first voter
/// is nearest.
pub fn knn_infer(train_feats: &[Vec<f64>], train_attrs: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if train_feats.is_empty() {
        return Err(Error::invalid("k-NN needs a non-empty training set"));
    }
    if train_feats.len() != train_attrs.len() {
        return Err(Error::shape("k-NN features and labels differ in count"));
    }
    if k == 0 || k.is_multiple_of(2) || k > train_feats.len() {
        return Err(Error::invalid(format!(
            "k must be odd and in 1..={}, got {k}",
            train_feats.len()
        )));
    }
    let mut dist = Vec::with_capacity(train_feats.len());
    for (i, t) in train_feats.iter().enumerate() {
        if t.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                found: t.len(),
            });
        }
        let d2: f64 = t.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        dist.push((d2, i));
    }
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: Vec<(usize, usize)> = Vec::new();
    for &(_, i) in &dist[..k] {
        let label = train_attrs[i];
        match votes.iter_mut().find(|(l, _)| *l == label) {
            Some(v) => v.1 += 1,
            None => votes.push((label, 1)),
        }
    }
    let top = votes.iter().map(|v| v.1).max().expect("k >= 1");
    Ok(votes.iter().find(|v| v.1 == top).expect("max exists").0)
}

/// Mean absolute per-coordinate difference.
pub fn reconstruction_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("reconstruction error of empty vectors"));
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64)
}

/// `a + γ·ε` with `ε` standard normal per coordinate.
pub fn noisy_baseline(a: &[f64], gamma: f64, seed: Seed) -> Result<Vec<f64>> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::invalid(format!("noise scale must be >= 0, got {gamma}")));
    }
    let mut rng = seed.rng();
    Ok(a.iter()
        .map(|v| v + gamma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}
