//! Synthetic classification worlds: seeded datasets plus the frozen
//! image/text encoders the prompts are tuned against.
//!
//! A dataset draws one prototype per class uniformly in [0,1]^p and
//! perturbs it with Gaussian noise, clamped back to the pixel box. The
//! encoders are two-layer tanh MLPs with weights fixed at construction;
//! gradients flow through them to their inputs but never into them.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding::{checksum_f64, fnv1a, substream};

/// Class tokens are derived from the image features of the class
/// prototypes through a fixed backbone projection plus seeded noise:
///
///   C_n = GAIN * P^T (F_v(prototype_n) - mean_m F_v(prototype_m)) + NOISE_STD * g_n
///
/// The projection P is part of the frozen backbone, so a class token is
/// tied to what its class looks like in feature space — the stand-in for
/// class names meaning something to a pretrained text encoder, and the
/// only reason prompts tuned on one world can say anything about
/// another. The gains put per-class token contrast where the frozen
/// first layer responds.
pub const TOKEN_SIGNAL_GAIN: f64 = 9.0;
pub const TOKEN_NOISE_STD: f64 = 1.5;

// salts for the independent draw streams of one world seed
const SALT_PROTOTYPES: u64 = 0;
const SALT_TRAIN_NOISE: u64 = 1;
const SALT_TEST_NOISE: u64 = 2;
const SALT_ENCODER_WEIGHTS: u64 = 3;
const SALT_CLASS_TOKENS: u64 = 4;

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub image_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_classes: 8,
            image_dim: 64,
            train_per_class: 32,
            test_per_class: 32,
            noise_sigma: 0.18,
            seed: 17,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.image_dim < 4 {
            return Err(Error::invalid(format!("image_dim must be >= 4, got {}", self.image_dim)));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::invalid(format!(
                "noise_sigma must be > 0, got {}",
                self.noise_sigma
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("per-class sample counts must be positive".to_string()));
        }
        Ok(())
    }

    /// Stable fingerprint of the spec fields (seed included).
    pub fn fingerprint(&self) -> u64 {
        let repr = format!(
            "N={} p={} train={} test={} sigma={} seed={}",
            self.n_classes,
            self.image_dim,
            self.train_per_class,
            self.test_per_class,
            self.noise_sigma.to_bits(),
            self.seed
        );
        fnv1a(repr.as_bytes())
    }
}

/// A batch of images with integer labels and their one-hot encoding.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// (B, p) pixel rows in [0,1]
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// (B, N) with exactly one 1 per row
    pub onehot: Tensor,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.shape().len() != 2 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "batch images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        let b = labels.len();
        let mut oh = vec![0.0; b * n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::invalid(format!("label {l} out of range [0,{n_classes})")));
            }
            oh[i * n_classes + l] = 1.0;
        }
        let onehot = Tensor::new(vec![b, n_classes], oh)?;
        Ok(LabeledBatch { images, labels, onehot })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous sub-batch [start, start+len).
    pub fn slice(&self, start: usize, len: usize, n_classes: usize) -> Result<LabeledBatch> {
        let p = self.images.shape()[1];
        let images = Tensor::new(
            vec![len, p],
            self.images.data()[start * p..(start + len) * p].to_vec(),
        )?;
        LabeledBatch::new(images, self.labels[start..start + len].to_vec(), n_classes)
    }
}

/// A generated train/test split plus the class prototypes it came from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// (N, p)
    pub prototypes: Tensor,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

/// Draw the dataset for `spec`. Same spec (seed included) reproduces the
/// same bytes; train and test use disjoint noise streams.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, p) = (spec.n_classes, spec.image_dim);

    let mut proto_rng = substream(spec.seed, SALT_PROTOTYPES);
    let mut proto = vec![0.0; n * p];
    for v in proto.iter_mut() {
        *v = proto_rng.gen::<f64>();
    }
    let prototypes = Tensor::new(vec![n, p], proto)?;

    let train = draw_split(spec, &prototypes, spec.train_per_class, SALT_TRAIN_NOISE)?;
    let test = draw_split(spec, &prototypes, spec.test_per_class, SALT_TEST_NOISE)?;
    Ok(Dataset { spec: spec.clone(), prototypes, train, test })
}

/// Samples are emitted round-robin over classes so every contiguous
/// minibatch stays class-balanced.
fn draw_split(
    spec: &DatasetSpec,
    prototypes: &Tensor,
    per_class: usize,
    salt: u64,
) -> Result<LabeledBatch> {
    let (n, p) = (spec.n_classes, spec.image_dim);
    let total = n * per_class;
    let mut rng = substream(spec.seed, salt);
    let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut images = vec![0.0; total * p];
    let mut labels = vec![0; total];
    for i in 0..total {
        let class = i % n;
        labels[i] = class;
        for t in 0..p {
            let x = prototypes.data()[class * p + t] + normal.sample(&mut rng);
            images[i * p + t] = x.clamp(0.0, 1.0);
        }
    }
    LabeledBatch::new(Tensor::new(vec![total, p], images)?, labels, n)
}

/// Fraction of `batch` classified correctly by nearest prototype in pixel
/// space. Sanity floor for the benchmark at small noise.
pub fn nearest_prototype_accuracy(prototypes: &Tensor, batch: &LabeledBatch) -> f64 {
    let (n, p) = (prototypes.shape()[0], prototypes.shape()[1]);
    let mut correct = 0usize;
    for (i, &label) in batch.labels.iter().enumerate() {
        let x = &batch.images.data()[i * p..(i + 1) * p];
        let mut best = (0usize, f64::INFINITY);
        for c in 0..n {
            let proto = &prototypes.data()[c * p..(c + 1) * p];
            let d2: f64 = x.iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (c, d2);
            }
        }
        if best.0 == label {
            correct += 1;
        }
    }
    100.0 * correct as f64 / batch.len() as f64
}

/// Widths shared by both encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// image (pixel) dimension p
    pub image_dim: usize,
    /// shared hidden width h
    pub hidden_dim: usize,
    /// joint feature dimension d
    pub feature_dim: usize,
    /// token embedding dimension e
    pub token_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims { image_dim: 64, hidden_dim: 48, feature_dim: 32, token_dim: 16 }
    }
}

/// Frozen two-layer tanh encoders mapping images and token sequences into
/// a shared d-dimensional feature space, plus the per-class token
/// embeddings. All weights have requires_grad = false and never change
/// after construction.
#[derive(Debug, Clone)]
pub struct FrozenEncoders {
    pub dims: EncoderDims,
    /// context length M the text encoder was built for (input is M+1 tokens)
    pub ctx_len: usize,
    pub n_classes: usize,
    pub seed: u64,
    wv1: Tensor,
    bv1: Tensor,
    wv2: Tensor,
    bv2: Tensor,
    wt1: Tensor,
    bt1: Tensor,
    wt2: Tensor,
    bt2: Tensor,
    /// (d, e) feature-to-token projection, part of the backbone
    token_proj: Tensor,
    /// (N, e) class token embeddings
    class_tokens: Tensor,
}

fn gaussian_tensor(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape is valid")
}


impl FrozenEncoders {
    /// Build encoders for context length `ctx_len` (text input is
    /// ctx_len+1 tokens). Weights and class tokens are drawn from
    /// independent substreams of `seed`; variance 1/fan_in keeps tanh
    /// pre-activations responsive.
    pub fn new(dims: EncoderDims, ctx_len: usize, n_classes: usize, seed: u64) -> Self {
        let (p, h, d, e) = (dims.image_dim, dims.hidden_dim, dims.feature_dim, dims.token_dim);
        let text_in = (ctx_len + 1) * e;
        let mut w = substream(seed, SALT_ENCODER_WEIGHTS);
        let wv1 = gaussian_tensor(vec![p, h], 1.0 / (p as f64).sqrt(), &mut w);
        let bv1 = gaussian_tensor(vec![h], 1.0 / (p as f64).sqrt(), &mut w);
        let wv2 = gaussian_tensor(vec![h, d], 1.0 / (h as f64).sqrt(), &mut w);
        let bv2 = gaussian_tensor(vec![d], 1.0 / (h as f64).sqrt(), &mut w);
        let wt1 = gaussian_tensor(vec![text_in, h], 1.0 / (text_in as f64).sqrt(), &mut w);
        let bt1 = gaussian_tensor(vec![h], 1.0 / (text_in as f64).sqrt(), &mut w);
        let wt2 = gaussian_tensor(vec![h, d], 1.0 / (h as f64).sqrt(), &mut w);
        let bt2 = gaussian_tensor(vec![d], 1.0 / (h as f64).sqrt(), &mut w);
        let token_proj = gaussian_tensor(vec![d, e], 1.0 / (d as f64).sqrt(), &mut w);
        let mut enc = FrozenEncoders {
            dims,
            ctx_len,
            n_classes,
            seed,
            wv1,
            bv1,
            wv2,
            bv2,
            wt1,
            bt1,
            wt2,
            bt2,
            token_proj,
            class_tokens: Tensor::zeros(vec![n_classes, e]),
        };
        enc.class_tokens = enc.derive_class_tokens(seed);
        enc
    }

    /// Same backbone weights, class tokens re-derived from the prototypes
    /// and noise of `seed` — the transfer-evaluation analog of swapping
    /// in a foreign label set.
    pub fn with_class_tokens_from(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.class_tokens = self.derive_class_tokens(seed);
        out
    }

    /// Class tokens of the world `seed`: the backbone projection applied
    /// to the centered prototype image features, plus seeded noise. The
    /// prototypes are re-drawn from the same stream the dataset generator
    /// uses.
    fn derive_class_tokens(&self, seed: u64) -> Tensor {
        let (p, d, e) = (self.dims.image_dim, self.dims.feature_dim, self.dims.token_dim);
        let n = self.n_classes;
        let mut proto_rng = substream(seed, SALT_PROTOTYPES);
        let mut protos = vec![0.0; n * p];
        for v in protos.iter_mut() {
            *v = proto_rng.gen::<f64>();
        }
        let feats = self
            .encode_images(&Tensor::new(vec![n, p], protos).expect("valid shape"))
            .expect("prototype encoding");
        let mut centered = feats.data().to_vec();
        for j in 0..d {
            let mean: f64 = (0..n).map(|c| feats.data()[c * d + j]).sum::<f64>() / n as f64;
            for c in 0..n {
                centered[c * d + j] -= mean;
            }
        }
        let mut noise_rng = substream(seed, SALT_CLASS_TOKENS);
        let normal = Normal::new(0.0, TOKEN_NOISE_STD).expect("positive std");
        let mut tokens = vec![0.0; n * e];
        for c in 0..n {
            for j in 0..e {
                let mut s = 0.0;
                for t in 0..d {
                    s += centered[c * d + t] * self.token_proj.data()[t * e + j];
                }
                tokens[c * e + j] = TOKEN_SIGNAL_GAIN * s + normal.sample(&mut noise_rng);
            }
        }
        Tensor::new(vec![n, e], tokens).expect("valid shape")
    }

    pub fn class_tokens(&self) -> &Tensor {
        &self.class_tokens
    }

    /// Bit-level checksum over every weight; constant for the lifetime of
    /// the encoders.
    pub fn checksum(&self) -> u64 {
        checksum_f64(
            [
                &self.wv1, &self.bv1, &self.wv2, &self.bv2, &self.wt1, &self.bt1, &self.wt2,
                &self.bt2, &self.token_proj, &self.class_tokens,
            ]
            .iter()
            .flat_map(|t| t.data().iter().copied()),
        )
    }

    /// Graph nodes for the image path: (B, p) -> (B, d).
    pub fn encode_image(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let shape = g.value(images).shape();
        if shape.len() != 2 || shape[1] != self.dims.image_dim {
            return Err(Error::shape(
                "encode_image",
                format!("want (B,{}), got {shape:?}", self.dims.image_dim),
            ));
        }
        let wv1 = g.constant(self.wv1.clone());
        let bv1 = g.constant(self.bv1.clone());
        let wv2 = g.constant(self.wv2.clone());
        let bv2 = g.constant(self.bv2.clone());
        let a1 = g.matmul(images, wv1)?;
        let a1 = g.add_bias(a1, bv1)?;
        let h = g.tanh(a1);
        let a2 = g.matmul(h, wv2)?;
        g.add_bias(a2, bv2)
    }

    /// Graph nodes for the text path on pre-assembled flattened prompt
    /// rows: (R, (M+1)*e) -> (R, d).
    pub fn encode_token_rows(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let want = (self.ctx_len + 1) * self.dims.token_dim;
        let shape = g.value(rows).shape();
        if shape.len() != 2 || shape[1] != want {
            return Err(Error::shape(
                "encode_text",
                format!("want (R,{want}) flattened token rows for {} + 1 tokens, got {shape:?}", self.ctx_len),
            ));
        }
        let wt1 = g.constant(self.wt1.clone());
        let bt1 = g.constant(self.bt1.clone());
        let wt2 = g.constant(self.wt2.clone());
        let bt2 = g.constant(self.bt2.clone());
        let a1 = g.matmul(rows, wt1)?;
        let a1 = g.add_bias(a1, bt1)?;
        let h = g.tanh(a1);
        let a2 = g.matmul(h, wt2)?;
        g.add_bias(a2, bt2)
    }

    /// Encode one (M+1, e) token sequence to its d-vector.
    pub fn encode_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let e = self.dims.token_dim;
        if tokens.shape() != [self.ctx_len + 1, e] {
            return Err(Error::shape(
                "encode_text",
                format!("want ({}, {e}) tokens, got {:?}", self.ctx_len + 1, tokens.shape()),
            ));
        }
        let mut g = Graph::new();
        let flat = g.leaf(tokens);
        let flat = g.reshape(flat, vec![1, (self.ctx_len + 1) * e])?;
        let z = self.encode_token_rows(&mut g, flat)?;
        Tensor::new(vec![self.dims.feature_dim], g.value(z).data().to_vec())
    }

    /// Encode an image batch to feature values (no gradients retained).
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let z = self.encode_image(&mut g, x)?;
        Ok(g.value(z).clone())
    }
}

// ── dataset files ───────────────────────────────────────────────────

const DATASET_MAGIC: &[u8; 4] = b"SYDS";
const DATASET_VERSION: u16 = 1;

/// Write the dataset (spec header keyed by fingerprint, then raw
/// samples) as a little-endian binary file.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u16::<LittleEndian>(DATASET_VERSION)?;
    w.write_u64::<LittleEndian>(ds.spec.fingerprint())?;
    w.write_u64::<LittleEndian>(ds.spec.seed)?;
    w.write_u32::<LittleEndian>(ds.spec.n_classes as u32)?;
    w.write_u32::<LittleEndian>(ds.spec.image_dim as u32)?;
    w.write_u32::<LittleEndian>(ds.spec.train_per_class as u32)?;
    w.write_u32::<LittleEndian>(ds.spec.test_per_class as u32)?;
    w.write_f64::<LittleEndian>(ds.spec.noise_sigma)?;
    for t in [&ds.prototypes, &ds.train.images, &ds.test.images] {
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    for batch in [&ds.train, &ds.test] {
        for &l in &batch.labels {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::DatasetFile(format!("bad magic {magic:?} in {}", path.display())));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(Error::DatasetFile(format!("unsupported version {version}")));
    }
    let fingerprint = r.read_u64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let n_classes = r.read_u32::<LittleEndian>()? as usize;
    let image_dim = r.read_u32::<LittleEndian>()? as usize;
    let train_per_class = r.read_u32::<LittleEndian>()? as usize;
    let test_per_class = r.read_u32::<LittleEndian>()? as usize;
    let noise_sigma = r.read_f64::<LittleEndian>()?;
    let spec =
        DatasetSpec { n_classes, image_dim, train_per_class, test_per_class, noise_sigma, seed };
    spec.validate().map_err(|e| Error::DatasetFile(format!("invalid header: {e}")))?;
    if spec.fingerprint() != fingerprint {
        return Err(Error::DatasetFile("header fingerprint mismatch".to_string()));
    }
    let mut read_block = |shape: Vec<usize>| -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        Tensor::new(shape, data)
    };
    let prototypes = read_block(vec![n_classes, image_dim])?;
    let train_images = read_block(vec![n_classes * train_per_class, image_dim])?;
    let test_images = read_block(vec![n_classes * test_per_class, image_dim])?;
    let mut read_labels = |count: usize| -> Result<Vec<usize>> {
        (0..count).map(|_| Ok(r.read_u32::<LittleEndian>()? as usize)).collect()
    };
    let train_labels = read_labels(n_classes * train_per_class)?;
    let test_labels = read_labels(n_classes * test_per_class)?;
    Ok(Dataset {
        spec,
        prototypes,
        train: LabeledBatch::new(train_images, train_labels, n_classes)?,
        test: LabeledBatch::new(test_images, test_labels, n_classes)?,
    })
}
