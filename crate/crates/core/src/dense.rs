//! Ordinary real-valued MLPs used for the encoder trunk, fooling heads,
//! decoder and critic. These sit outside the encrypted region and carry biases
//! and the standard ReLU.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Seed;

#[derive(Debug, Clone, PartialEq)]
pub enum DenseLayer {
    Linear { weights: Matrix, bias: Vec<f64> },
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    layers: Vec<DenseLayer>,
}

/// Inputs to every layer, recorded by [`DenseStack::forward_cached`].
#[derive(Debug, Clone)]
pub struct DenseCache {
    inputs: Vec<Vec<f64>>,
}

impl DenseCache {
    /// Smallest |pre-activation| seen by any ReLU; distance to the kink.
    pub fn relu_margin(&self, stack: &DenseStack) -> f64 {
        stack
            .layers
            .iter()
            .zip(&self.inputs)
            .filter(|(l, _)| matches!(l, DenseLayer::Relu))
            .flat_map(|(_, x)| x.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

impl DenseStack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let stack = DenseStack { layers };
        stack.check()?;
        Ok(stack)
    }

    /// Linear layers of the given widths with ReLU between them (none after
    /// the last). Weights are He-scaled normals, biases start at zero.
    pub fn mlp(sizes: &[usize], seed: Seed) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad MLP widths {sizes:?}")));
        }
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let scale = (2.0 / w[0] as f64).sqrt();
            layers.push(DenseLayer::Linear {
                weights: Matrix::random_normal(w[1], w[0], scale, seed.derive(i as u64)),
                bias: vec![0.0; w[1]],
            });
            if i + 2 < sizes.len() {
                layers.push(DenseLayer::Relu);
            }
        }
        DenseStack::new(layers)
    }

    fn check(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        let mut any_linear = false;
        for l in &self.layers {
            if let DenseLayer::Linear { weights, bias } = l {
                any_linear = true;
                if bias.len() != weights.rows() {
                    return Err(Error::shape("bias length differs from weight rows"));
                }
                if let Some(w) = width {
                    if w != weights.cols() {
                        return Err(Error::shape(format!(
                            "dense layer expects {} inputs but previous layer gives {w}",
                            weights.cols()
                        )));
                    }
                }
                width = Some(weights.rows());
            }
        }
        if !any_linear {
            return Err(Error::shape("dense stack needs at least one linear layer"));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                DenseLayer::Linear { weights, .. } => Some(weights.cols()),
                DenseLayer::Relu => None,
            })
            .expect("checked non-empty")
    }

    pub fn output_len(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                DenseLayer::Linear { weights, .. } => Some(weights.rows()),
                DenseLayer::Relu => None,
            })
            .expect("checked non-empty")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        if x.len() != self.input_len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_len(),
                found: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for l in &self.layers {
            let next = match l {
                DenseLayer::Linear { weights, bias } => {
                    let mut y = weights.matvec(&cur)?;
                    y.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
                    y
                }
                DenseLayer::Relu => cur.iter().map(|v| v.max(0.0)).collect(),
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Ok((cur, DenseCache { inputs }))
    }

    /// Returns `(input_grad, param_grads)` with param grads in
    /// [`DenseStack::param_slices`] order (weights then bias per linear layer).
    pub fn backward(&self, cache: &DenseCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if upstream.len() != self.output_len() || cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("dense backward shapes"));
        }
        let mut g = upstream.to_vec();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for (l, x) in self.layers.iter().zip(&cache.inputs).rev() {
            match l {
                DenseLayer::Linear { weights, .. } => {
                    let mut dw = vec![0.0; weights.rows() * weights.cols()];
                    for (r, &gr) in g.iter().enumerate() {
                        for (c, &xc) in x.iter().enumerate() {
                            dw[r * weights.cols() + c] = gr * xc;
                        }
                    }
                    let dx: Vec<f64> = (0..weights.cols())
                        .map(|c| (0..weights.rows()).map(|r| weights.get(r, c) * g[r]).sum())
                        .collect();
                    grads.push(g.clone());
                    grads.push(dw);
                    g = dx;
                }
                DenseLayer::Relu => {
                    g.iter_mut().zip(x).for_each(|(gv, &xv)| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                }
            }
        }
        grads.reverse();
        Ok((g, grads))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let DenseLayer::Linear { weights, bias } = l {
                out.push(weights.data());
                out.push(bias.as_slice());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let DenseLayer::Linear { weights, bias } = l {
                out.push(weights.data_mut());
                out.push(bias.as_mut_slice());
            }
        }
        out
    }

    /// Clamps every weight and bias into `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        for p in self.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    /// Re-draws every parameter uniformly in `[-c, c]`.
    pub fn reinit_uniform(&mut self, c: f64, seed: Seed) {
        let mut rng = seed.rng();
        for p in self.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = rng.random_range(-c..=c));
        }
    }

    /// Adds N(0, scale²) noise to every parameter; used by tests to move off
    /// the zero-bias initial point.
    pub fn perturb(&mut self, scale: f64, seed: Seed) {
        let mut rng = seed.rng();
        for p in self.param_slices_mut() {
            p.iter_mut()
                .for_each(|v| *v += scale * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    #[test]
    fn mlp_shapes() {
        let s = DenseStack::mlp(&[2, 8, 3], Seed(1)).unwrap();
        assert_eq!(s.input_len(), 2);
        assert_eq!(s.output_len(), 3);
        assert_eq!(s.layers().len(), 3);
        assert_eq!(s.forward(&[0.1, 0.2]).unwrap().len(), 3);
        assert!(s.forward(&[0.1]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut s = DenseStack::mlp(&[3, 5, 2], Seed(4)).unwrap();
        s.perturb(0.1, Seed(5));
        let x = [0.3, -0.7, 1.1];
        let up = [0.4, -1.3];
        let loss = |st: &DenseStack, x: &[f64]| dot(&st.forward(x).unwrap(), &up);
        let (_, cache) = s.forward_cached(&x).unwrap();
        assert!(cache.relu_margin(&s) > 1e-3);
        let (dx, grads) = s.backward(&cache, &up).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&s, &xp) - loss(&s, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        let n_bufs = s.param_slices().len();
        for b in 0..n_bufs {
            let len = s.param_slices()[b].len();
            for j in 0..len {
                let mut sp = s.clone();
                sp.param_slices_mut()[b][j] += h;
                let mut sm = s.clone();
                sm.param_slices_mut()[b][j] -= h;
                let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
                assert!((fd - grads[b][j]).abs() < 1e-7, "buf {b} idx {j}");
            }
        }
    }

    #[test]
    fn clip_bounds_parameters() {
        let mut s = DenseStack::mlp(&[4, 4, 1], Seed(2)).unwrap();
        s.clip(0.01);
        assert!(s.param_slices().iter().all(|p| p.iter().all(|v| v.abs() <= 0.01)));
    }

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }
}
