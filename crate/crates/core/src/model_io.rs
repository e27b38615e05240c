//! On-disk model format: a TOML document describing every stack, with each
//! weight matrix or bias stored as a DARY blob named by the SHA-256 of its
//! bytes and kept next to the document.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dary::{write_atomic, DaryPayload};
use crate::dense::{DenseLayer, DenseStack};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::linalg::Matrix;
use crate::pipeline::{FoolingHead, ModelSpec};
use crate::training::Critic;

const FORMAT: &str = "renn-model";
const FORMAT_VERSION: u32 = 1;
const CRITIC_FORMAT: &str = "renn-critic";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    version: u32,
    d: usize,
    class_count: usize,
    encoder: Vec<DenseDoc>,
    #[serde(default)]
    fooling_heads: Vec<HeadDoc>,
    #[serde(default)]
    processing: Vec<LayerDoc>,
    decoder: Vec<DenseDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DenseDoc {
    Linear {
        rows: usize,
        cols: usize,
        weights: String,
        bias: String,
    },
    Relu,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum HeadDoc {
    Learned { layers: Vec<DenseDoc> },
    Gaussian,
    Zero,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerDoc {
    Conv { rows: usize, cols: usize, weights: String },
    Relu { c: f64 },
    BatchNorm { eps: f64 },
    AvgPool { window: usize },
    MaxPool { window: usize },
    Dropout { rate: f64 },
    Skip { inner: Vec<LayerDoc> },
}

/// Serialized document text plus the blobs it references, keyed by hash.
#[derive(Debug, Clone)]
pub struct EncodedModel {
    pub document: String,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn blob_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.dary"))
}

#[derive(Default)]
struct BlobSink(BTreeMap<String, Vec<u8>>);

impl BlobSink {
    fn put(&mut self, payload: DaryPayload) -> String {
        let bytes = payload.to_bytes();
        let hash = content_hash(&bytes);
        self.0.entry(hash.clone()).or_insert(bytes);
        hash
    }

    fn dense(&mut self, stack: &DenseStack) -> Result<Vec<DenseDoc>> {
        stack
            .layers()
            .iter()
            .map(|l| match l {
                DenseLayer::Linear { weights, bias } => Ok(DenseDoc::Linear {
                    rows: weights.rows(),
                    cols: weights.cols(),
                    weights: self.put(weights.into()),
                    bias: self.put(DaryPayload::from_vector(bias)?),
                }),
                DenseLayer::Relu => Ok(DenseDoc::Relu),
            })
            .collect()
    }

    fn layers(&mut self, layers: &[Layer]) -> Result<Vec<LayerDoc>> {
        layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv { weights } => LayerDoc::Conv {
                        rows: weights.rows(),
                        cols: weights.cols(),
                        weights: self.put(weights.into()),
                    },
                    Layer::Relu { c } => LayerDoc::Relu { c: *c },
                    Layer::BatchNorm { eps } => LayerDoc::BatchNorm { eps: *eps },
                    Layer::AvgPool { window } => LayerDoc::AvgPool { window: *window },
                    Layer::MaxPool { window } => LayerDoc::MaxPool { window: *window },
                    Layer::Dropout { rate } => LayerDoc::Dropout { rate: *rate },
                    Layer::Skip { inner } => LayerDoc::Skip {
                        inner: self.layers(inner)?,
                    },
                })
            })
            .collect()
    }
}

pub fn encode_model(model: &ModelSpec) -> Result<EncodedModel> {
    model.validate()?;
    let mut sink = BlobSink::default();
    let doc = ModelDoc {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        d: model.d,
        class_count: model.class_count,
        encoder: sink.dense(&model.encoder)?,
        fooling_heads: model
            .fooling_heads
            .iter()
            .map(|h| {
                Ok(match h {
                    FoolingHead::Learned(s) => HeadDoc::Learned { layers: sink.dense(s)? },
                    FoolingHead::Gaussian => HeadDoc::Gaussian,
                    FoolingHead::Zero => HeadDoc::Zero,
                })
            })
            .collect::<Result<_>>()?,
        processing: sink.layers(&model.processing)?,
        decoder: sink.dense(&model.decoder)?,
    };
    let document = toml::to_string(&doc).map_err(|e| Error::Config(format!("cannot serialize model: {e}")))?;
    Ok(EncodedModel {
        document,
        blobs: sink.0,
    })
}

fn checked_matrix(
    fetch: &mut impl FnMut(&str) -> Result<Vec<u8>>,
    hash: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    let bytes = fetch(hash)?;
    let actual = content_hash(&bytes);
    if actual != hash {
        return Err(Error::Format(format!("weight blob {hash} has hash {actual}")));
    }
    let m = DaryPayload::from_bytes(&bytes)?.into_matrix()?;
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::shape(format!(
            "blob {hash} is {}x{}, document says {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

fn decode_dense(
    docs: &[DenseDoc],
    matrix: &mut impl FnMut(&str, usize, usize) -> Result<Matrix>,
) -> Result<DenseStack> {
    let layers = docs
        .iter()
        .map(|l| match l {
            DenseDoc::Linear {
                rows,
                cols,
                weights,
                bias,
            } => Ok(DenseLayer::Linear {
                weights: matrix(weights, *rows, *cols)?,
                bias: matrix(bias, *rows, 1)?.into_data(),
            }),
            DenseDoc::Relu => Ok(DenseLayer::Relu),
        })
        .collect::<Result<_>>()?;
    DenseStack::new(layers)
}
fn decode_layers(
    docs: &[LayerDoc],
    matrix: &mut impl FnMut(&str, usize, usize) -> Result<Matrix>,
) -> Result<Vec<Layer>> {
    docs.iter()
        .map(|l| {
            Ok(match l {
                LayerDoc::Conv { rows, cols, weights } => Layer::Conv {
                    weights: matrix(weights, *rows, *cols)?,
                },
                LayerDoc::Relu { c } => Layer::Relu { c: *c },
                LayerDoc::BatchNorm { eps } => Layer::BatchNorm { eps: *eps },
                LayerDoc::AvgPool { window } => Layer::AvgPool { window: *window },
                LayerDoc::MaxPool { window } => Layer::MaxPool { window: *window },
                LayerDoc::Dropout { rate } => Layer::Dropout { rate: *rate },
                LayerDoc::Skip { inner } => Layer::Skip {
                    inner: decode_layers(inner, matrix)?,
                },
            })
        })
        .collect()
}

/// Rebuilds a model from document text, fetching blobs through `fetch`.
/// Every blob is checked against its hash before use.
pub fn decode_model(document: &str, mut fetch: impl FnMut(&str) -> Result<Vec<u8>>) -> Result<ModelSpec> {
    let doc: ModelDoc = toml::from_str(document).map_err(|e| Error::Config(format!("model document: {e}")))?;
    if doc.format != FORMAT || doc.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported model format {:?} version {}",
            doc.format, doc.version
        )));
    }
    let mut matrix = |hash: &str, rows: usize, cols: usize| checked_matrix(&mut fetch, hash, rows, cols);
    let model = ModelSpec {
        d: doc.d,
        encoder: decode_dense(&doc.encoder, &mut matrix)?,
        fooling_heads: doc
            .fooling_heads
            .iter()
            .map(|h| {
                Ok(match h {
                    HeadDoc::Learned { layers } => FoolingHead::Learned(decode_dense(layers, &mut matrix)?),
                    HeadDoc::Gaussian => FoolingHead::Gaussian,
                    HeadDoc::Zero => FoolingHead::Zero,
                })
            })
            .collect::<Result<_>>()?,
        processing: decode_layers(&doc.processing, &mut matrix)?,
        decoder: decode_dense(&doc.decoder, &mut matrix)?,
        class_count: doc.class_count,
    };
    model.validate()?;
    Ok(model)
}

fn parent_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn write_with_blobs(path: &Path, encoded: &EncodedModel) -> Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (hash, bytes) in &encoded.blobs {
        let p = blob_path(dir, hash);
        if !p.exists() {
            write_atomic(&p, bytes)?;
        }
    }
    write_atomic(path, encoded.document.as_bytes())
}

fn read_with_blobs<T>(
    path: &Path,
    decode: impl FnOnce(&str, &mut dyn FnMut(&str) -> Result<Vec<u8>>) -> Result<T>,
) -> Result<T> {
    let document = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = parent_dir(path);
    let mut fetch = |hash: &str| {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Config(format!("malformed blob reference {hash:?}")));
        }
        let p = blob_path(dir, hash);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    decode(&document, &mut fetch)
}

/// Writes the document to `path` and its blobs beside it.
pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    write_with_blobs(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    read_with_blobs(path, |doc, fetch| decode_model(doc, fetch))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriticDoc {
    format: String,
    version: u32,
    clip: f64,
    layers: Vec<DenseDoc>,
}

pub fn encode_critic(critic: &Critic) -> Result<EncodedModel> {
    let mut sink = BlobSink::default();
    let doc = CriticDoc {
        format: CRITIC_FORMAT.into(),
        version: FORMAT_VERSION,
        clip: critic.clip_value(),
        layers: sink.dense(critic.net())?,
    };
    let document = toml::to_string(&doc).map_err(|e| Error::Config(format!("cannot serialize critic: {e}")))?;
    Ok(EncodedModel {
        document,
        blobs: sink.0,
    })
}

pub fn decode_critic(document: &str, mut fetch: impl FnMut(&str) -> Result<Vec<u8>>) -> Result<Critic> {
    let doc: CriticDoc = toml::from_str(document).map_err(|e| Error::Config(format!("critic document: {e}")))?;
    if doc.format != CRITIC_FORMAT || doc.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported critic format {:?} version {}",
            doc.format, doc.version
        )));
    }
    let mut matrix = |hash: &str, rows: usize, cols: usize| checked_matrix(&mut fetch, hash, rows, cols);
    Critic::from_stack(decode_dense(&doc.layers, &mut matrix)?, doc.clip)
}

pub fn save_critic(critic: &Critic, path: &Path) -> Result<()> {
    write_with_blobs(path, &encode_critic(critic)?)
}

pub fn load_critic(path: &Path) -> Result<Critic> {
    read_with_blobs(path, |doc, fetch| decode_critic(doc, fetch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ToyShape;
    use crate::rng::Seed;

    fn toy() -> ModelSpec {
        let mut m = ModelSpec::toy(
            3,
            ToyShape {
                input_dim: 2,
                hidden: 5,
                features: 4,
                class_count: 2,
                relu_c: 0.5,
            },
            Seed(3),
        )
        .unwrap();
        m.fooling_heads[1] = FoolingHead::Gaussian;
        m.processing.push(Layer::Skip {
            inner: vec![Layer::BatchNorm { eps: 1e-5 }, Layer::Dropout { rate: 0.25 }],
        });
        m.processing.push(Layer::MaxPool { window: 2 });
        m.decoder = DenseStack::mlp(&[2, 3, 2], Seed(8)).unwrap();
        m.validate().unwrap();
        m
    }

    #[test]
    fn roundtrip_in_memory() {
        let m = toy();
        let enc = encode_model(&m).unwrap();
        let back = decode_model(&enc.document, |h| Ok(enc.blobs[h].clone())).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn roundtrip_on_disk_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.toml");
        let m = toy();
        save_model(&m, &path).unwrap();
        let first = fs::read(&path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        save_model(&load_model(&path).unwrap(), &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let m = toy();
        let enc = encode_model(&m).unwrap();
        let err = decode_model(&enc.document, |h| {
            let mut b = enc.blobs[h].clone();
            let last = b.len() - 1;
            b[last] ^= 1;
            Ok(b)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn missing_field_is_named() {
        let enc = encode_model(&toy()).unwrap();
        let doc = enc.document.replacen("class_count = 2\n", "", 1);
        let err = decode_model(&doc, |h| Ok(enc.blobs[h].clone())).unwrap_err();
        assert!(err.to_string().contains("class_count"), "{err}");
    }

    #[test]
    fn critic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.toml");
        let c = Critic::new(4, 6, 0.05, Seed(8)).unwrap();
        save_critic(&c, &path).unwrap();
        assert_eq!(load_critic(&path).unwrap(), c);
        assert!(load_model(&path).is_err());
    }
}
