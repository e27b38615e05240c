use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dary::write_atomic;
use crate::error::{Error, Result};
use crate::pipeline::{encode, ModelSpec};
use crate::rng::Seed;
use crate::rotation::{angle_between, sample_rotation};
use crate::training::Critic;

use super::rank::{rank_monte_carlo_many, rank_of_estimate, FALLBACK_SAMPLES};
use super::{inversion_attack, reconstruction_error, CheatingScorer, ConstantScorer, Scorer, DEFAULT_CANDIDATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    /// Trained critic as scorer.
    Critic,
    /// Oracle scorer that knows the true feature.
    Cheating,
    /// Uninformed baseline.
    Constant,
}

impl fmt::Display for AttackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackerKind::Critic => "critic",
            AttackerKind::Cheating => "cheating",
            AttackerKind::Constant => "constant",
        })
    }
}

fn default_candidates() -> usize {
    DEFAULT_CANDIDATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub attacker: AttackerKind,
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    pub seed: u64,
    /// Dimension the attacker assumes; must match the model when given.
    #[serde(default)]
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub sample_id: usize,
    pub attacker: AttackerKind,
    pub delta_theta: f64,
    pub rank: f64,
    pub recon_error: f64,
    pub samples_used: usize,
    pub seed: u64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: usize,
    pub attacker: String,
    pub delta_theta: f64,
    pub rank: f64,
    pub recon_error: f64,
    pub seed: u64,
}

impl From<&AttackReport> for ReportRow {
    fn from(r: &AttackReport) -> Self {
        ReportRow {
            sample_id: r.sample_id,
            attacker: r.attacker.to_string(),
            delta_theta: r.delta_theta,
            rank: r.rank,
            recon_error: r.recon_error,
            seed: r.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub count: usize,
    pub mean_delta_theta: f64,
    /// Sample standard deviation (n − 1); zero for a single row.
    pub std_delta_theta: f64,
    pub mean_rank: f64,
    pub mean_recon_error: f64,
}

/// Attacks every input under its own random key. The attack sees only the
/// encrypted feature; the truth used for scoring the result is the
/// encoder output.
pub fn evaluate_privacy(
    model: &ModelSpec,
    inputs: &[Vec<f64>],
    cfg: &AttackConfig,
    critic: Option<&Critic>,
) -> Result<Vec<AttackReport>> {
    if inputs.is_empty() {
        return Err(Error::invalid("privacy evaluation needs at least one input"));
    }
    if let Some(d) = cfg.d {
        if d != model.d {
            return Err(Error::DimensionMismatch {
                expected: model.d,
                found: d,
            });
        }
    }
    if cfg.candidates == 0 {
        return Err(Error::Config("candidates: must be >= 1".into()));
    }
    let critic = match (cfg.attacker, critic) {
        (AttackerKind::Critic, None) => return Err(Error::Config("critic attacker requires a critic".into())),
        (AttackerKind::Critic, Some(c)) => {
            if c.net().input_len() != model.feature_len() {
                return Err(Error::DimensionMismatch {
                    expected: model.feature_len(),
                    found: c.net().input_len(),
                });
            }
            Some(c)
        }
        _ => None,
    };
    let seed = Seed(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let key = sample_rotation(model.d, seed.derive_path(&[0, i as u64]))?;
        let f = encode(input, model, &key, seed.derive_path(&[1, i as u64]))?;
        let truth = model.encoder.forward(input)?;
        let attack_seed = seed.derive_path(&[2, i as u64]);
        let cheat = CheatingScorer { truth: truth.clone() };
        let scorer: &dyn Scorer = match cfg.attacker {
            AttackerKind::Critic => critic.expect("checked above"),
            AttackerKind::Cheating => &cheat,
            AttackerKind::Constant => &ConstantScorer(0.0),
        };
        let out = inversion_attack(&f, scorer, cfg.candidates, attack_seed)?;
        reports.push(AttackReport {
            sample_id: i,
            attacker: cfg.attacker,
            delta_theta: angle_between(&out.rotation, &key)?,
            rank: 0.0,
            recon_error: reconstruction_error(&out.estimate, &truth)?,
            samples_used: cfg.candidates,
            seed: attack_seed.value(),
        });
    }
    let deltas: Vec<f64> = reports.iter().map(|r| r.delta_theta).collect();
    let ranks = match model.d {
        2 | 3 | 5 => deltas
            .iter()
            .map(|&t| rank_of_estimate(t, model.d))
            .collect::<Result<Vec<_>>>()?,
        d => rank_monte_carlo_many(&deltas, d, FALLBACK_SAMPLES, Seed(0))?,
    };
    reports.iter_mut().zip(ranks).for_each(|(r, k)| r.rank = k);
    Ok(reports)
}

/// Per-attacker means, keyed by attacker name.
pub fn summarize(rows: &[ReportRow]) -> BTreeMap<String, AggregateStats> {
    let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.attacker.clone()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(name, rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_dt = mean(|r| r.delta_theta);
            let std = if rs.len() > 1 {
                (rs.iter().map(|r| (r.delta_theta - mean_dt).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (
                name,
                AggregateStats {
                    count: rs.len(),
                    mean_delta_theta: mean_dt,
                    std_delta_theta: std,
                    mean_rank: mean(|r| r.rank),
                    mean_recon_error: mean(|r| r.recon_error),
                },
            )
        })
        .collect()
}

pub fn write_rows_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_summary_json(path: &Path, summary: &BTreeMap<String, AggregateStats>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{FoolingHead, ToyShape};

    fn model(d: usize) -> ModelSpec {
        ModelSpec::toy(
            d,
            ToyShape {
                input_dim: 2,
                hidden: 4,
                features: 3,
                class_count: 2,
                relu_c: 1.0,
            },
            Seed(1),
        )
        .unwrap()
    }

    fn inputs(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05]).collect()
    }

    #[test]
    fn one_row_per_input() {
        let cfg = AttackConfig {
            attacker: AttackerKind::Constant,
            candidates: 10,
            seed: 3,
            d: None,
        };
        let reports = evaluate_privacy(&model(3), &inputs(7), &cfg, None).unwrap();
        assert_eq!(reports.len(), 7);
        assert!(reports
            .iter()
            .all(|r| (0.0..=std::f64::consts::PI).contains(&r.delta_theta)));
        assert!(reports.iter().all(|r| r.rank >= 0.0 && r.recon_error >= 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = AttackConfig {
            attacker: AttackerKind::Cheating,
            candidates: 10,
            seed: 3,
            d: Some(5),
        };
        assert!(matches!(
            evaluate_privacy(&model(3), &inputs(2), &cfg, None),
            Err(Error::DimensionMismatch { .. })
        ));
        let critic_cfg = AttackConfig {
            attacker: AttackerKind::Critic,
            d: None,
            ..cfg
        };
        assert!(evaluate_privacy(&model(3), &inputs(2), &critic_cfg, None).is_err());
        let wrong = Critic::new(7, 3, 0.1, Seed(0)).unwrap();
        assert!(evaluate_privacy(&model(3), &inputs(2), &critic_cfg, Some(&wrong)).is_err());
    }

    #[test]
    fn cheating_beats_constant_on_zero_heads() {
        let mut m = model(3);
        m.fooling_heads = vec![FoolingHead::Zero; 2];
        let run = |attacker| {
            let cfg = AttackConfig {
                attacker,
                candidates: 200,
                seed: 9,
                d: None,
            };
            let rows: Vec<ReportRow> = evaluate_privacy(&m, &inputs(20), &cfg, None)
                .unwrap()
                .iter()
                .map(ReportRow::from)
                .collect();
            summarize(&rows)[&attacker.to_string()].clone()
        };
        let cheat = run(AttackerKind::Cheating);
        let blind = run(AttackerKind::Constant);
        assert!(cheat.mean_delta_theta < 0.3, "{cheat:?}");
        assert!(cheat.mean_recon_error < blind.mean_recon_error);
    }

    #[test]
    fn csv_roundtrip_reproduces_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AttackConfig {
            attacker: AttackerKind::Constant,
            candidates: 5,
            seed: 1,
            d: None,
        };
        let rows: Vec<ReportRow> = evaluate_privacy(&model(2), &inputs(5), &cfg, None)
            .unwrap()
            .iter()
            .map(ReportRow::from)
            .collect();
        let p = dir.path().join("rows.csv");
        write_rows_csv(&p, &rows).unwrap();
        let back = read_rows_csv(&p).unwrap();
        assert_eq!(back, rows);
        assert_eq!(summarize(&back), summarize(&rows));
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("sample_id,attacker,delta_theta,rank,recon_error,seed\n"));
    }

    #[test]
    fn summary_statistics() {
        let row = |a: &str, dt: f64| ReportRow {
            sample_id: 0,
            attacker: a.into(),
            delta_theta: dt,
            rank: 2.0,
            recon_error: 0.5,
            seed: 0,
        };
        let s = summarize(&[row("x", 1.0), row("x", 3.0), row("y", 2.0)]);
        assert_eq!(s["x"].count, 2);
        assert_eq!(s["x"].mean_delta_theta, 2.0);
        assert!((s["x"].std_delta_theta - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s["y"].std_delta_theta, 0.0);
    }
}
