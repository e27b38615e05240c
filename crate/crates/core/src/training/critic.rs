use crate::dense::DenseStack;
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::rotation::{angle_between, sample_rotation, RotationMatrix};
use crate::tensor::{rotate_inverse, DAryTensor};

/// Candidate wrong keys closer than this to the true key are redrawn.
pub const WRONG_KEY_MIN_ANGLE: f64 = 1e-6;

/// WGAN critic: a small MLP from a length-`n` feature to one score, with all
/// parameters kept inside `[-clip, clip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    net: DenseStack,
    clip: f64,
}

impl Critic {
    pub fn new(feature_len: usize, hidden: usize, clip: f64, seed: Seed) -> Result<Self> {
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::invalid(format!("critic clip must be > 0, got {clip}")));
        }
        let mut net = DenseStack::mlp(&[feature_len, hidden, 1], seed)?;
        net.reinit_uniform(clip, seed.derive(1));
        Ok(Critic { net, clip })
    }

    /// Wraps an existing stack; parameters are clipped immediately.
    pub fn from_stack(mut net: DenseStack, clip: f64) -> Result<Self> {
        if net.output_len() != 1 {
            return Err(Error::shape(format!(
                "critic must emit one score, emits {}",
                net.output_len()
            )));
        }
        if !(clip.is_finite() && clip > 0.0) {
            return Err(Error::invalid(format!("critic clip must be > 0, got {clip}")));
        }
        net.clip(clip);
        Ok(Critic { net, clip })
    }

    pub fn net(&self) -> &DenseStack {
        &self.net
    }

    pub fn clip_value(&self) -> f64 {
        self.clip
    }

    pub fn score(&self, a: &[f64]) -> Result<f64> {
        Ok(self.net.forward(a)?[0])
    }

    /// Score, gradient with respect to the input, and parameter gradients.
    pub(crate) fn score_grad(&self, a: &[f64]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let (y, cache) = self.net.forward_cached(a)?;
        let (dx, dp) = self.net.backward(&cache, &[1.0])?;
        Ok((y[0], dx, dp))
    }

    /// Gradient ascent step followed by clipping.
    pub(crate) fn ascend(&mut self, grads: &[Vec<f64>], lr: f64) {
        for (p, g) in self.net.param_slices_mut().into_iter().zip(grads) {
            p.iter_mut().zip(g).for_each(|(v, gv)| *v += lr * gv);
        }
        self.net.clip(self.clip);
    }
}

/// Draws a rotation at least [`WRONG_KEY_MIN_ANGLE`] away from `key`.
pub fn sample_wrong_key(key: &RotationMatrix, seed: Seed) -> Result<RotationMatrix> {
    for attempt in 0..64 {
        let r = sample_rotation(key.d(), seed.derive(attempt))?;
        if angle_between(&r, key)? >= WRONG_KEY_MIN_ANGLE {
            return Ok(r);
        }
    }
    Err(Error::invalid("could not draw a wrong key after 64 attempts"))
}

/// `D(a) − mean_k D(a′_k)` with `a′_k` the component-0 decryption of `f`
/// under the given wrong keys.
pub fn wgan_loss_with_keys(critic: &Critic, a: &[f64], f: &DAryTensor, wrong_keys: &[RotationMatrix]) -> Result<f64> {
    if wrong_keys.is_empty() {
        return Err(Error::invalid("adversarial loss needs at least one wrong key"));
    }
    let mut fake = 0.0;
    for r in wrong_keys {
        fake += critic.score(&rotate_inverse(f, r)?.component(0))?;
    }
    Ok(critic.score(a)? - fake / wrong_keys.len() as f64)
}

/// Adversarial loss with `k` freshly drawn wrong keys (distinct from `key`).
pub fn wgan_loss(
    critic: &Critic,
    a: &[f64],
    f: &DAryTensor,
    key: &RotationMatrix,
    k: usize,
    seed: Seed,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("attacker sample count K must be >= 1"));
    }
    let keys = (0..k as u64)
        .map(|i| sample_wrong_key(key, seed.derive(i)))
        .collect::<Result<Vec<_>>>()?;
    wgan_loss_with_keys(critic, a, f, &keys)
}
