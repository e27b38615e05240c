//! Encoder → processing → decoder.
//!
//! The encoder runs on the local device: it extracts `a = g(input)`, builds the
//! fooling counterparts `b_1..b_{d-1}`, stacks them into `x = [a, b_1, …]` and
//! encrypts with `f = R∘x`. The processing stack runs on untrusted hardware
//! and only ever sees `f`. The decoder, back on the local device, undoes the
//! rotation, keeps component 0 and classifies it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dense::{argmax, DenseStack};
use crate::error::{Error, Result};
use crate::layers::{apply_stack, stack_output_len, Layer};
use crate::linalg::Matrix;
use crate::rng::Seed;
use crate::rotation::RotationMatrix;
use crate::tensor::{rotate, rotate_inverse, DAryTensor};

/// Source of one fooling counterpart `b_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum FoolingHead {
    /// Trained MLP from the model input to a length-`n` vector.
    Learned(DenseStack),
    /// I.i.d. normal noise with standard deviation equal to the RMS of `a`.
    Gaussian,
    /// All zeros; used when a lower-`d` model is run in a higher dimension.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d: usize,
    pub encoder: DenseStack,
    pub fooling_heads: Vec<FoolingHead>,
    pub processing: Vec<Layer>,
    pub decoder: DenseStack,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("class scores".into()));
        }
        let label = argmax(&scores);
        Ok(Prediction { scores, label })
    }
}

/// Sizes for [`ModelSpec::toy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub features: usize,
    pub class_count: usize,
    pub relu_c: f64,
}

impl ModelSpec {
    /// Checks that all stacks chain: encoder → n elements → processing → m
    /// elements → decoder → class scores.
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid(format!("model d must be >= 2, got {}", self.d)));
        }
        if self.fooling_heads.len() != self.d - 1 {
            return Err(Error::shape(format!(
                "d={} needs {} fooling heads, model has {}",
                self.d,
                self.d - 1,
                self.fooling_heads.len()
            )));
        }
        let n = self.encoder.output_len();
        for (i, h) in self.fooling_heads.iter().enumerate() {
            if let FoolingHead::Learned(s) = h {
                if s.input_len() != self.encoder.input_len() || s.output_len() != n {
                    return Err(Error::shape(format!(
                        "fooling head {i} maps {}→{}, expected {}→{n}",
                        s.input_len(),
                        s.output_len(),
                        self.encoder.input_len()
                    )));
                }
            }
        }
        self.processing.iter().try_for_each(Layer::validate)?;
        let m = stack_output_len(&self.processing, n)?;
        if self.decoder.input_len() != m {
            return Err(Error::shape(format!(
                "decoder expects {} features, processing produces {m}",
                self.decoder.input_len()
            )));
        }
        if self.decoder.output_len() != self.class_count || self.class_count == 0 {
            return Err(Error::shape(format!(
                "decoder emits {} scores for {} classes",
                self.decoder.output_len(),
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.encoder.input_len()
    }

    /// Element count `n` of the encrypted feature.
    pub fn feature_len(&self) -> usize {
        self.encoder.output_len()
    }

    /// Two-layer encoder and fooling heads, `conv → relu → conv` processing,
    /// two-layer decoder.
    pub fn toy(d: usize, shape: ToyShape, seed: Seed) -> Result<Self> {
        let ToyShape {
            input_dim,
            hidden,
            features,
            class_count,
            relu_c,
        } = shape;
        let encoder = DenseStack::mlp(&[input_dim, hidden, features], seed.derive(0))?;
        let fooling_heads = (1..d)
            .map(|i| {
                DenseStack::mlp(&[input_dim, hidden, features], seed.derive_path(&[1, i as u64]))
                    .map(FoolingHead::Learned)
            })
            .collect::<Result<_>>()?;
        let conv_scale = (1.0 / features as f64).sqrt();
        let processing = vec![
            Layer::Conv {
                weights: Matrix::random_normal(features, features, conv_scale, seed.derive(2)),
            },
            Layer::Relu { c: relu_c },
            Layer::Conv {
                weights: Matrix::random_normal(features, features, conv_scale, seed.derive(3)),
            },
        ];
        let decoder = DenseStack::mlp(&[features, hidden, class_count], seed.derive(4))?;
        let model = ModelSpec {
            d,
            encoder,
            fooling_heads,
            processing,
            decoder,
            class_count,
        };
        model.validate()?;
        Ok(model)
    }

    /// Runs this model in dimension `d > self.d`: the extra components are fed
    /// zeros. Paired with `embed_rotation` keys it reproduces the original
    /// model's component-0 outputs.
    pub fn lift_to_dimension(&self, d: usize) -> Result<ModelSpec> {
        if d <= self.d {
            return Err(Error::invalid(format!(
                "target dimension {d} must exceed model dimension {}",
                self.d
            )));
        }
        let mut lifted = self.clone();
        lifted.d = d;
        lifted.fooling_heads.resize(d - 1, FoolingHead::Zero);
        Ok(lifted)
    }
}

/// Counterpart `b_i` for head `index` (1-based component), given `a`.
pub(crate) fn fooling_component(
    head: &FoolingHead,
    index: usize,
    input: &[f64],
    a: &[f64],
    seed: Seed,
) -> Result<Vec<f64>> {
    match head {
        FoolingHead::Learned(s) => s.forward(input),
        FoolingHead::Zero => Ok(vec![0.0; a.len()]),
        FoolingHead::Gaussian => {
            let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
            let mut rng = seed.derive(index as u64).rng();
            Ok((0..a.len())
                .map(|_| rms * rng.sample::<f64, _>(StandardNormal))
                .collect())
        }
    }
}

/// The unrotated d-ary feature `x = [a, b_1, …, b_{d-1}]`.
pub fn build_feature(input: &[f64], model: &ModelSpec, seed: Seed) -> Result<DAryTensor> {
    let a = model.encoder.forward(input)?;
    let mut components = Vec::with_capacity(model.d);
    for (i, head) in model.fooling_heads.iter().enumerate() {
        components.push(fooling_component(head, i + 1, input, &a, seed)?);
    }
    components.insert(0, a);
    DAryTensor::from_components(&components)
}

/// `f = R∘x`.
pub fn encode(input: &[f64], model: &ModelSpec, rotation: &RotationMatrix, seed: Seed) -> Result<DAryTensor> {
    if rotation.d() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            found: rotation.d(),
        });
    }
    if input.len() != model.input_len() {
        return Err(Error::DimensionMismatch {
            expected: model.input_len(),
            found: input.len(),
        });
    }
    rotate(&build_feature(input, model, seed)?, rotation)
}

/// `h = Φ(f)`; a single feature is processed as a batch of one.
pub fn process(f: &DAryTensor, model: &ModelSpec, seed: Seed, training: bool) -> Result<DAryTensor> {
    if f.d() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            found: f.d(),
        });
    }
    let out = apply_stack(&model.processing, std::slice::from_ref(f), seed, training)?;
    Ok(out.into_iter().next().expect("batch of one"))
}

/// `Γ(R⁻¹∘h)`: component 0 after undoing the rotation.
pub fn decrypt_feature(h: &DAryTensor, rotation: &RotationMatrix) -> Result<Vec<f64>> {
    Ok(rotate_inverse(h, rotation)?.component(0))
}

/// `ŷ = Ψ(Γ(R⁻¹∘h))`.
pub fn decode(h: &DAryTensor, rotation: &RotationMatrix, model: &ModelSpec) -> Result<Prediction> {
    if h.d() != model.d {
        return Err(Error::DimensionMismatch {
            expected: model.d,
            found: h.d(),
        });
    }
    let z = decrypt_feature(h, rotation)?;
    Prediction::from_scores(model.decoder.forward(&z)?)
}

/// Whole pipeline with a caller-supplied key.
pub fn infer(input: &[f64], model: &ModelSpec, rotation: &RotationMatrix, seed: Seed) -> Result<Prediction> {
    let f = encode(input, model, rotation, seed)?;
    let h = process(&f, model, seed, false)?;
    decode(&h, rotation, model)
}

/// Reference path with the identity key.
pub fn forward_plain(input: &[f64], model: &ModelSpec, seed: Seed) -> Result<Prediction> {
    infer(input, model, &RotationMatrix::identity(model.d), seed)
}
