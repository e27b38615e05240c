//! Batched forward pass with caches and the two gradient paths: task
//! cross-entropy through the whole pipeline, and the adversarial term into
//! the encoder side only.

use crate::dense::{DenseCache, DenseStack};
use crate::error::{Error, Result};
use crate::layers::{self, stack_backward, stack_forward, LayerCache};
use crate::pipeline::{fooling_component, FoolingHead, ModelSpec};
use crate::rng::Seed;
use crate::rotation::RotationMatrix;
use crate::tensor::{rotate, rotate_inverse, DAryTensor};

use super::critic::Critic;
use super::{cross_entropy, cross_entropy_grad};

/// Everything the backward passes need from one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub keys: Vec<RotationMatrix>,
    /// Unencrypted features `[a, b_1, …]`.
    pub x: Vec<DAryTensor>,
    /// Encrypted features `R∘x`.
    pub f: Vec<DAryTensor>,
    pub h: Vec<DAryTensor>,
    pub scores: Vec<Vec<f64>>,
    encoder: Vec<DenseCache>,
    heads: Vec<Vec<Option<DenseCache>>>,
    processing: Vec<LayerCache>,
    decoder: Vec<DenseCache>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Smallest distance of any dense ReLU pre-activation from zero.
    pub(crate) fn dense_relu_margin(&self, model: &ModelSpec) -> f64 {
        let mut m = f64::INFINITY;
        for s in 0..self.len() {
            m = m.min(self.encoder[s].relu_margin(&model.encoder));
            m = m.min(self.decoder[s].relu_margin(&model.decoder));
            for (head, cache) in model.fooling_heads.iter().zip(&self.heads[s]) {
                if let (FoolingHead::Learned(st), Some(c)) = (head, cache) {
                    m = m.min(c.relu_margin(st));
                }
            }
        }
        m
    }

    pub(crate) fn processing_caches(&self) -> &[LayerCache] {
        &self.processing
    }
}

/// Runs the pipeline over a batch; sample `s` is encrypted with `keys[s]`.
pub fn forward_batch(
    model: &ModelSpec,
    inputs: &[&[f64]],
    keys: &[RotationMatrix],
    seed: Seed,
    training: bool,
) -> Result<BatchForward> {
    if inputs.is_empty() || inputs.len() != keys.len() {
        return Err(Error::shape(format!("{} inputs but {} keys", inputs.len(), keys.len())));
    }
    let mut encoder = Vec::with_capacity(inputs.len());
    let mut heads = Vec::with_capacity(inputs.len());
    let mut x = Vec::with_capacity(inputs.len());
    let mut f = Vec::with_capacity(inputs.len());
    for (s, (input, key)) in inputs.iter().zip(keys).enumerate() {
        if key.d() != model.d {
            return Err(Error::DimensionMismatch {
                expected: model.d,
                found: key.d(),
            });
        }
        let (a, enc_cache) = model.encoder.forward_cached(input)?;
        let mut comps = vec![a];
        let mut head_caches = Vec::with_capacity(model.d - 1);
        for (i, head) in model.fooling_heads.iter().enumerate() {
            match head {
                FoolingHead::Learned(st) => {
                    let (b, c) = st.forward_cached(input)?;
                    comps.push(b);
                    head_caches.push(Some(c));
                }
                other => {
                    comps.push(fooling_component(
                        other,
                        i + 1,
                        input,
                        &comps[0],
                        seed.derive(s as u64),
                    )?);
                    head_caches.push(None);
                }
            }
        }
        let xs = DAryTensor::from_components(&comps)?;
        f.push(rotate(&xs, key)?);
        x.push(xs);
        encoder.push(enc_cache);
        heads.push(head_caches);
    }
    let (h, processing) = stack_forward(&model.processing, &f, seed, training)?;
    let mut scores = Vec::with_capacity(h.len());
    let mut decoder = Vec::with_capacity(h.len());
    for (hs, key) in h.iter().zip(keys) {
        let (y, c) = model.decoder.forward_cached(&rotate_inverse(hs, key)?.component(0))?;
        scores.push(y);
        decoder.push(c);
    }
    Ok(BatchForward {
        keys: keys.to_vec(),
        x,
        f,
        h,
        scores,
        encoder,
        heads,
        processing,
        decoder,
    })
}

/// Parameter buffers in the canonical order: encoder, learned fooling heads,
/// processing, decoder.
pub fn model_param_slices(model: &ModelSpec) -> Vec<&[f64]> {
    let mut out = model.encoder.param_slices();
    for h in &model.fooling_heads {
        if let FoolingHead::Learned(s) = h {
            out.extend(s.param_slices());
        }
    }
    out.extend(layers::param_slices(&model.processing));
    out.extend(model.decoder.param_slices());
    out
}

pub fn model_param_slices_mut(model: &mut ModelSpec) -> Vec<&mut [f64]> {
    let mut out = model.encoder.param_slices_mut();
    for h in &mut model.fooling_heads {
        if let FoolingHead::Learned(s) = h {
            out.extend(s.param_slices_mut());
        }
    }
    out.extend(layers::param_slices_mut(&mut model.processing));
    out.extend(model.decoder.param_slices_mut());
    out
}

fn dense_names(prefix: &str, stack: &DenseStack, out: &mut Vec<String>) {
    for j in 0..stack.param_slices().len() / 2 {
        out.push(format!("{prefix}.linear{j}.weights"));
        out.push(format!("{prefix}.linear{j}.bias"));
    }
}

/// Human-readable names aligned with [`model_param_slices`].
pub fn model_param_names(model: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    dense_names("encoder", &model.encoder, &mut out);
    for (i, h) in model.fooling_heads.iter().enumerate() {
        if let FoolingHead::Learned(s) = h {
            dense_names(&format!("fooling_head{}", i + 1), s, &mut out);
        }
    }
    for j in 0..layers::param_slices(&model.processing).len() {
        out.push(format!("processing.conv{j}.weights"));
    }
    dense_names("decoder", &model.decoder, &mut out);
    out
}

/// Offsets of each parameter group inside the canonical order.
struct Layout {
    encoder: usize,
    heads: Vec<Option<usize>>,
    processing: usize,
    decoder: usize,
    total: usize,
}

impl Layout {
    fn of(model: &ModelSpec) -> Layout {
        let mut at = model.encoder.param_slices().len();
        let heads = model
            .fooling_heads
            .iter()
            .map(|h| match h {
                FoolingHead::Learned(s) => {
                    let start = at;
                    at += s.param_slices().len();
                    Some(start)
                }
                _ => None,
            })
            .collect();
        let processing = at;
        at += layers::param_slices(&model.processing).len();
        let decoder = at;
        at += model.decoder.param_slices().len();
        Layout {
            encoder: 0,
            heads,
            processing,
            decoder,
            total: at,
        }
    }
}

pub(crate) fn zero_grads(model: &ModelSpec) -> Vec<Vec<f64>> {
    model_param_slices(model).iter().map(|p| vec![0.0; p.len()]).collect()
}

fn accumulate(into: &mut [Vec<f64>], offset: usize, grads: &[Vec<f64>]) {
    for (dst, src) in into[offset..].iter_mut().zip(grads) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    }
}

/// Back-propagates a gradient on the unencrypted feature `x` into the encoder
/// and, when `heads_too`, into learned fooling heads.
fn encoder_side_backward(
    model: &ModelSpec,
    fwd: &BatchForward,
    s: usize,
    dx: &DAryTensor,
    heads_too: bool,
    layout: &Layout,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    let (_, g) = model.encoder.backward(&fwd.encoder[s], &dx.component(0))?;
    accumulate(grads, layout.encoder, &g);
    if heads_too {
        for (i, head) in model.fooling_heads.iter().enumerate() {
            if let (FoolingHead::Learned(st), Some(cache), Some(off)) = (head, &fwd.heads[s][i], layout.heads[i]) {
                let (_, g) = st.backward(cache, &dx.component(i + 1))?;
                accumulate(grads, off, &g);
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy over the batch, its gradient for every parameter in
/// canonical order, and the number of correct predictions.
pub fn task_gradients(
    model: &ModelSpec,
    fwd: &BatchForward,
    labels: &[usize],
    joint_fooling: bool,
) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    if labels.len() != fwd.len() {
        return Err(Error::shape("label count differs from batch size"));
    }
    let layout = Layout::of(model);
    let mut grads = zero_grads(model);
    let scale = 1.0 / fwd.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut dh = Vec::with_capacity(fwd.len());
    for s in 0..fwd.len() {
        let scores = &fwd.scores[s];
        loss += cross_entropy(scores, labels[s])?;
        if crate::dense::argmax(scores) == labels[s] {
            correct += 1;
        }
        let dscores: Vec<f64> = cross_entropy_grad(scores, labels[s])
            .iter()
            .map(|g| g * scale)
            .collect();
        let (dz, g) = model.decoder.backward(&fwd.decoder[s], &dscores)?;
        accumulate(&mut grads, layout.decoder, &g);
        let mut comps = vec![dz];
        comps.resize(model.d, vec![0.0; comps[0].len()]);
        dh.push(rotate(&DAryTensor::from_components(&comps)?, &fwd.keys[s])?);
    }
    let (df, g) = stack_backward(&model.processing, &fwd.processing, &dh)?;
    accumulate(&mut grads, layout.processing, &g);
    for (s, dfs) in df.iter().enumerate() {
        let dx = rotate_inverse(dfs, &fwd.keys[s])?;
        encoder_side_backward(model, fwd, s, &dx, joint_fooling, &layout, &mut grads)?;
    }
    debug_assert_eq!(grads.len(), layout.total);
    Ok((loss * scale, grads, correct))
}

/// Decryptions of sample `s` under each wrong key, with the mixing row
/// `(R′ᵀR)[0, ·]` that expresses them as combinations of the components of `x`.
fn fakes(fwd: &BatchForward, s: usize, wrong: &[RotationMatrix]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    wrong
        .iter()
        .map(|r| {
            let a_fake = rotate_inverse(&fwd.f[s], r)?.component(0);
            let mix = r.transpose().compose(&fwd.keys[s])?;
            let row = (0..mix.d()).map(|j| mix.get(0, j)).collect();
            Ok((a_fake, row))
        })
        .collect()
}

/// Mean adversarial loss and its gradient for encoder-side parameters,
/// scaled by `weight`. Other parameter groups get zeros.
pub(crate) fn gan_generator_gradients(
    model: &ModelSpec,
    fwd: &BatchForward,
    critic: &Critic,
    wrong: &[Vec<RotationMatrix>],
    weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let layout = Layout::of(model);
    let mut grads = zero_grads(model);
    let scale = 1.0 / fwd.len() as f64;
    let mut loss = 0.0;
    for s in 0..fwd.len() {
        let n = fwd.x[s].n();
        let a = fwd.x[s].component(0);
        let (real, d_real, _) = critic.score_grad(&a)?;
        let mut comps = vec![vec![0.0; n]; model.d];
        comps[0] = d_real.iter().map(|g| g * weight * scale).collect();
        let k = wrong[s].len() as f64;
        let mut fake_mean = 0.0;
        for (a_fake, row) in fakes(fwd, s, &wrong[s])? {
            let (score, d_fake, _) = critic.score_grad(&a_fake)?;
            fake_mean += score / k;
            for (j, comp) in comps.iter_mut().enumerate() {
                let c = row[j] * weight * scale / k;
                comp.iter_mut().zip(&d_fake).for_each(|(v, g)| *v -= c * g);
            }
        }
        loss += real - fake_mean;
        let dx = DAryTensor::from_components(&comps)?;
        encoder_side_backward(model, fwd, s, &dx, true, &layout, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

/// Mean adversarial loss and its gradient for the critic parameters.
pub(crate) fn critic_gradients(
    fwd: &BatchForward,
    critic: &Critic,
    wrong: &[Vec<RotationMatrix>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let scale = 1.0 / fwd.len() as f64;
    let mut grads: Vec<Vec<f64>> = critic.net().param_slices().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss = 0.0;
    for s in 0..fwd.len() {
        let (real, _, g) = critic.score_grad(&fwd.x[s].component(0))?;
        loss += real;
        for (dst, src) in grads.iter_mut().zip(&g) {
            dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * scale);
        }
        let k = wrong[s].len() as f64;
        for (a_fake, _) in fakes(fwd, s, &wrong[s])? {
            let (score, _, g) = critic.score_grad(&a_fake)?;
            loss -= score / k;
            for (dst, src) in grads.iter_mut().zip(&g) {
                dst.iter_mut().zip(src).for_each(|(d, v)| *d -= v * scale / k);
            }
        }
    }
    Ok((loss * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{infer, ToyShape};
    use crate::rotation::sample_rotation;
    use crate::training::critic::{sample_wrong_key, wgan_loss_with_keys};

    fn model() -> ModelSpec {
        let mut m = ModelSpec::toy(
            3,
            ToyShape {
                input_dim: 2,
                hidden: 6,
                features: 4,
                class_count: 2,
                relu_c: 1.0,
            },
            Seed(11),
        )
        .unwrap();
        m.encoder.perturb(0.05, Seed(12));
        m.decoder.perturb(0.05, Seed(13));
        m
    }

    #[test]
    fn batch_forward_matches_single_inference() {
        let m = model();
        let inputs = [vec![0.3, -0.2], vec![1.1, 0.4]];
        let keys: Vec<_> = (0..2).map(|s| sample_rotation(3, Seed(s)).unwrap()).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let fwd = forward_batch(&m, &refs, &keys, Seed(0), false).unwrap();
        for s in 0..2 {
            let p = infer(&inputs[s], &m, &keys[s], Seed(0)).unwrap();
            for (a, b) in p.scores.iter().zip(&fwd.scores[s]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn names_align_with_slices() {
        let m = model();
        assert_eq!(model_param_names(&m).len(), model_param_slices(&m).len());
        assert_eq!(Layout::of(&m).total, model_param_slices(&m).len());
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut m = model();
        m.fooling_heads.iter_mut().for_each(|h| {
            if let FoolingHead::Learned(s) = h {
                s.perturb(0.05, Seed(3));
            }
        });
        let critic = Critic::new(4, 5, 1.0, Seed(21)).unwrap();
        let input = [0.7, -0.4];
        let key = sample_rotation(3, Seed(5)).unwrap();
        let wrong: Vec<RotationMatrix> = (0..3).map(|i| sample_wrong_key(&key, Seed(100 + i)).unwrap()).collect();
        let loss_of = |m: &ModelSpec| {
            let fwd = forward_batch(m, &[&input], std::slice::from_ref(&key), Seed(0), true).unwrap();
            wgan_loss_with_keys(&critic, &fwd.x[0].component(0), &fwd.f[0], &wrong).unwrap()
        };
        let fwd = forward_batch(&m, &[&input], std::slice::from_ref(&key), Seed(0), true).unwrap();
        let (loss, grads) = gan_generator_gradients(&m, &fwd, &critic, std::slice::from_ref(&wrong), 1.0).unwrap();
        assert!((loss - loss_of(&m)).abs() < 1e-12);
        let h = 1e-6;
        for b in 0..grads.len() {
            for j in 0..grads[b].len() {
                let mut mp = m.clone();
                model_param_slices_mut(&mut mp)[b][j] += h;
                let mut mm = m.clone();
                model_param_slices_mut(&mut mm)[b][j] -= h;
                let fd = (loss_of(&mp) - loss_of(&mm)) / (2.0 * h);
                assert!(
                    (fd - grads[b][j]).abs() < 1e-6,
                    "buffer {b} index {j}: fd {fd} vs {}",
                    grads[b][j]
                );
            }
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let m = model();
        let critic = Critic::new(4, 3, 1.0, Seed(2)).unwrap();
        let key = sample_rotation(3, Seed(8)).unwrap();
        let input = [0.2, 0.9];
        let wrong: Vec<RotationMatrix> = (0..2).map(|i| sample_wrong_key(&key, Seed(40 + i)).unwrap()).collect();
        let fwd = forward_batch(&m, &[&input], std::slice::from_ref(&key), Seed(0), true).unwrap();
        let (_, grads) = critic_gradients(&fwd, &critic, std::slice::from_ref(&wrong)).unwrap();
        let a = fwd.x[0].component(0);
        let h = 1e-6;
        for b in 0..grads.len() {
            for j in 0..grads[b].len() {
                let bump = |delta: f64| {
                    let mut net = critic.net().clone();
                    net.param_slices_mut()[b][j] += delta;
                    let c = Critic::from_stack(net, 10.0).unwrap();
                    wgan_loss_with_keys(&c, &a, &fwd.f[0], &wrong).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grads[b][j]).abs() < 1e-7);
            }
        }
    }
}
