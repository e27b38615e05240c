//! Rotation-equivariant d-ary networks: feature encryption by a secret
//! rotation, equivariant processing layers, adversarial training against an
//! inversion attacker, and tooling to measure how well the attacker does.

#![allow(clippy::needless_range_loop)]

pub mod attack;
pub mod dary;
pub mod dense;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod model_io;
pub mod pipeline;
pub mod quaternion;
pub mod rng;
pub mod rotation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use pipeline::{decode, encode, forward_plain, process, FoolingHead, ModelSpec, Prediction};
pub use rng::Seed;
pub use rotation::{sample_rotation, RotationMatrix};
pub use tensor::{rotate, DAryTensor};
