use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dary::write_atomic;
use crate::dense::argmax;
use crate::error::{Error, Result};
use crate::pipeline::ModelSpec;
use crate::rng::Seed;
use crate::rotation::{sample_rotation, RotationMatrix};

use super::critic::{sample_wrong_key, Critic};
use super::grads::{
    critic_gradients, forward_batch, gan_generator_gradients, model_param_names, model_param_slices,
    model_param_slices_mut, task_gradients, zero_grads,
};
use super::{Dataset, TrainConfig};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub gan_loss: f64,
    pub critic_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelSpec,
    pub critic: Critic,
    pub log: Vec<EpochLog>,
}

fn draw_keys(d: usize, count: usize, seed: Seed) -> Result<Vec<RotationMatrix>> {
    (0..count as u64).map(|i| sample_rotation(d, seed.derive(i))).collect()
}

fn draw_wrong_keys(keys: &[RotationMatrix], k: usize, seed: Seed) -> Result<Vec<Vec<RotationMatrix>>> {
    keys.iter()
        .enumerate()
        .map(|(i, key)| {
            (0..k as u64)
                .map(|j| sample_wrong_key(key, seed.derive_path(&[i as u64, j])))
                .collect()
        })
        .collect()
}

/// Class scores for every row of `data`, each encrypted under its own key
/// drawn from `seed`. Runs as one inference-mode batch.
pub fn evaluate_scores(model: &ModelSpec, data: &Dataset, seed: Seed) -> Result<Vec<Vec<f64>>> {
    let keys = draw_keys(model.d, data.len(), seed)?;
    let inputs: Vec<&[f64]> = data.inputs.iter().map(|v| v.as_slice()).collect();
    Ok(forward_batch(model, &inputs, &keys, seed.derive(u64::MAX), false)?.scores)
}

pub fn evaluate_accuracy(model: &ModelSpec, data: &Dataset, seed: Seed) -> Result<f64> {
    let scores = evaluate_scores(model, data, seed)?;
    let correct = scores.iter().zip(&data.labels).filter(|(s, &l)| argmax(s) == l).count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            detail: format!("{what} became {value}"),
        })
    }
}

/// Alternating WGAN training. Each minibatch step runs `critic_steps` ascent
/// updates of the critic (clipped after each), then one descent step on
/// cross-entropy plus the weighted adversarial loss. Every sample gets a
/// fresh key at every step.
pub fn train_toy(
    train: &Dataset,
    test: &Dataset,
    mut model: ModelSpec,
    mut critic: Critic,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.input_dim() != model.input_len() || test.input_dim() != model.input_len() {
        return Err(Error::DimensionMismatch {
            expected: model.input_len(),
            found: train.input_dim(),
        });
    }
    if train.labels.iter().chain(&test.labels).any(|&l| l >= model.class_count) {
        return Err(Error::invalid("dataset label exceeds model class count"));
    }
    if critic.net().input_len() != model.feature_len() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_len(),
            found: critic.net().input_len(),
        });
    }
    let seed = Seed(cfg.seed);
    let lr = cfg.learning_rate;
    let mut velocity = zero_grads(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed.derive_path(&[0, epoch as u64]).rng());
        let (mut task_sum, mut gan_sum, mut critic_sum) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let s = seed.derive_path(&[1, epoch as u64, step as u64]);
            let step_result = (|| -> Result<(f64, f64, f64)> {
                let inputs: Vec<&[f64]> = chunk.iter().map(|&i| train.inputs[i].as_slice()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let keys = draw_keys(model.d, chunk.len(), s.derive(0))?;
                let fwd = forward_batch(&model, &inputs, &keys, s.derive(1), true)?;
                if let Some(bad) = fwd.scores.iter().flatten().find(|v| !v.is_finite()) {
                    check_finite(*bad, "class scores", epoch, step)?;
                }

                let mut critic_loss = 0.0;
                for c in 0..cfg.critic_steps {
                    let wrong = draw_wrong_keys(&keys, cfg.attacker_samples, s.derive_path(&[2, c as u64]))?;
                    let (l, g) = critic_gradients(&fwd, &critic, &wrong)?;
                    check_finite(l, "critic loss", epoch, step)?;
                    critic.ascend(&g, lr);
                    critic_loss = -l;
                }

                let wrong = draw_wrong_keys(&keys, cfg.attacker_samples, s.derive(3))?;
                let (task, mut grads, _) = task_gradients(&model, &fwd, &labels, cfg.joint_fooling)?;
                let (gan, gan_grads) = gan_generator_gradients(&model, &fwd, &critic, &wrong, cfg.gan_weight)?;
                check_finite(task + cfg.gan_weight * gan, "total loss", epoch, step)?;
                for (g, extra) in grads.iter_mut().zip(&gan_grads) {
                    g.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
                for ((p, v), g) in model_param_slices_mut(&mut model)
                    .into_iter()
                    .zip(&mut velocity)
                    .zip(&grads)
                {
                    for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vi = cfg.momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
                if let Some(bad) = model_param_slices(&model)
                    .into_iter()
                    .flatten()
                    .find(|v| !v.is_finite())
                {
                    check_finite(*bad, "a model parameter", epoch, step)?;
                }

                Ok((task, gan, critic_loss))
            })();
            let (task, gan, critic_loss) = step_result.map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
            task_sum += task;
            gan_sum += gan;
            critic_sum += critic_loss;
            steps += 1;
        }
        let train_acc = evaluate_accuracy(&model, train, seed.derive_path(&[4, epoch as u64]))?;
        let test_acc = evaluate_accuracy(&model, test, seed.derive_path(&[5, epoch as u64]))?;
        log.push(EpochLog {
            epoch,
            task_loss: task_sum / steps as f64,
            gan_loss: gan_sum / steps as f64,
            critic_loss: critic_sum / steps as f64,
            train_acc,
            test_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { model, critic, log })
}

/// Largest absolute gradient seen by each parameter buffer over `steps`
/// minibatches, for the combined task and adversarial objective.
pub fn parameter_touch_audit(
    model: &ModelSpec,
    critic: &Critic,
    data: &Dataset,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<(String, f64)>> {
    cfg.validate()?;
    let names = model_param_names(model);
    let mut peak = vec![0.0f64; names.len()];
    let seed = Seed(cfg.seed).derive(7);
    let rows: Vec<usize> = (0..data.len()).collect();
    for (step, chunk) in rows.chunks(cfg.batch_size).take(steps).enumerate() {
        let s = seed.derive(step as u64);
        let inputs: Vec<&[f64]> = chunk.iter().map(|&i| data.inputs[i].as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let keys = draw_keys(model.d, chunk.len(), s.derive(0))?;
        let fwd = forward_batch(model, &inputs, &keys, s.derive(1), true)?;
        let (_, task, _) = task_gradients(model, &fwd, &labels, cfg.joint_fooling)?;
        let wrong = draw_wrong_keys(&keys, cfg.attacker_samples, s.derive(2))?;
        let (_, gan) = gan_generator_gradients(model, &fwd, critic, &wrong, cfg.gan_weight)?;
        for (i, (t, g)) in task.iter().zip(&gan).enumerate() {
            let m = t.iter().zip(g).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            peak[i] = peak[i].max(m);
        }
    }
    Ok(names.into_iter().zip(peak).collect())
}

/// Writes the log as CSV. Without `with_wall_time` the timing column is
/// zeroed so that identical runs produce identical bytes.
pub fn write_log_csv(path: &Path, log: &[EpochLog], with_wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        let mut row = row.clone();
        if !with_wall_time {
            row.wall_seconds = 0.0;
        }
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}
