//! Toy-scale training: cross-entropy task loss plus a WGAN term that pushes
//! the encoder to make the true feature indistinguishable from features
//! decrypted with wrong keys.

mod critic;
mod gradcheck;
mod grads;
mod trainer;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dense::softmax;
use crate::error::{Error, Result};
use crate::rng::Seed;

pub use critic::{sample_wrong_key, wgan_loss, wgan_loss_with_keys, Critic, WRONG_KEY_MIN_ANGLE};
pub use gradcheck::{
    check_layer_boundaries, grad_check_dense, grad_check_layer, grad_check_pipeline, relative_error, GradCheckReport,
    BOUNDARY_MARGIN, FD_STEP,
};
pub use grads::{
    forward_batch, model_param_names, model_param_slices, model_param_slices_mut, task_gradients, BatchForward,
};
pub use trainer::{
    evaluate_accuracy, evaluate_scores, parameter_touch_audit, train_toy, write_log_csv, EpochLog, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "defaults::critic_steps")]
    pub critic_steps: usize,
    #[serde(default = "defaults::clip_c")]
    pub clip_c: f64,
    #[serde(default = "defaults::attacker_samples")]
    pub attacker_samples: usize,
    pub seed: u64,
    /// Weight on the adversarial term in the total loss.
    #[serde(default = "defaults::one")]
    pub gan_weight: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Also pass task-loss gradients into the fooling heads.
    #[serde(default)]
    pub joint_fooling: bool,
    #[serde(default = "defaults::critic_hidden")]
    pub critic_hidden: usize,
}

mod defaults {
    pub fn critic_steps() -> usize {
        5
    }
    pub fn clip_c() -> f64 {
        0.01
    }
    pub fn attacker_samples() -> usize {
        4
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn critic_hidden() -> usize {
        16
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 30,
            critic_steps: defaults::critic_steps(),
            clip_c: defaults::clip_c(),
            attacker_samples: defaults::attacker_samples(),
            seed: 0,
            gan_weight: 1.0,
            momentum: 0.0,
            joint_fooling: false,
            critic_hidden: defaults::critic_hidden(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.critic_steps == 0 {
            return bad("critic_steps", "must be positive");
        }
        if !(self.clip_c.is_finite() && self.clip_c > 0.0) {
            return bad("clip_c", "must be > 0");
        }
        if self.attacker_samples == 0 {
            return bad("attacker_samples", "must be >= 1");
        }
        if !(self.gan_weight.is_finite() && self.gan_weight >= 0.0) {
            return bad("gan_weight", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.critic_hidden == 0 {
            return bad("critic_hidden", "must be positive");
        }
        Ok(())
    }
}

/// Labelled real vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "dataset needs matching non-empty inputs and labels ({} vs {})",
                inputs.len(),
                labels.len()
            )));
        }
        let dim = inputs[0].len();
        if inputs
            .iter()
            .any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::shape("dataset rows differ in length or are non-finite"));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }
}

/// Two isotropic Gaussian blobs in the plane centred at ±(1.5, 1.5) with unit
/// standard deviation. Labels alternate so both splits are balanced.
pub fn two_blobs(n_train: usize, n_test: usize, seed: Seed) -> Result<(Dataset, Dataset)> {
    let make = |count: usize, s: Seed| {
        let mut rng = s.rng();
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % 2;
            let centre = if label == 0 { -1.5 } else { 1.5 };
            inputs.push(vec![
                centre + rng.sample::<f64, _>(StandardNormal),
                centre + rng.sample::<f64, _>(StandardNormal),
            ]);
            labels.push(label);
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        Dataset::new(
            order.iter().map(|&i| inputs[i].clone()).collect(),
            order.iter().map(|&i| labels[i]).collect(),
        )
    };
    Ok((make(n_train, seed.derive(0))?, make(n_test, seed.derive(1))?))
}

/// `-log softmax(scores)[label]`, computed stably.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("class scores".into()));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - scores[label])
}

/// Gradient of [`cross_entropy`] with respect to the scores.
pub fn cross_entropy_grad(scores: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(scores);
    g[label] -= 1.0;
    g
}

/// Task cross-entropy plus the adversarial loss, unit weighted.
pub fn total_loss(scores: &[f64], label: usize, gan_loss: f64) -> Result<f64> {
    if !gan_loss.is_finite() {
        return Err(Error::NonFinite("adversarial loss".into()));
    }
    Ok(cross_entropy(scores, label)? + gan_loss)
}
