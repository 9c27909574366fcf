//! Photo head: projects externally computed CNN features into the reply
//! space, and the caption-averaging photo score.
//!
//! The head is one ReLU hidden layer followed by a linear output layer. It is
//! trained against a frozen text encoder so that a photo lands close to the
//! reply encoding of its caption.

use std::io::BufRead;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::encoder::TextEncoder;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::nn::{self, Dense, DenseGrad};
use crate::scalar::{dot, Scalar};

/// Feature width of a MobileNet (depth multiplier 1.4) pooled output.
pub const DEFAULT_FEATURE_DIM: usize = 1792;

/// Averaged photo/caption vectors shorter than this score zero.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// One line of a photo feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoFeatures {
    pub photo_id: String,
    pub entity_id: String,
    pub caption: Option<String>,
    pub features: Vec<f32>,
}

/// Reads JSONL photo features; blank lines are skipped.
pub fn read_photo_features<R: BufRead>(r: R) -> Result<Vec<PhotoFeatures>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pf: PhotoFeatures =
            serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(pf);
    }
    Ok(out)
}

pub fn load_photo_features(path: impl AsRef<Path>) -> Result<Vec<PhotoFeatures>> {
    let f = std::fs::File::open(path)?;
    read_photo_features(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotoConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Softmax scale during training; the frozen encoder's scale when unset.
    pub scale: Option<f64>,
}

impl Default for PhotoConfig {
    fn default() -> Self {
        PhotoConfig {
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden_dim: 1024,
            learn_rate: 0.5,
            batch_size: 50,
            epochs: 30,
            clip_norm: 10.0,
            seed: 0,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoHead<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct PhotoGrads<T> {
    pub hidden: DenseGrad<T>,
    pub output: DenseGrad<T>,
}

impl<T: Scalar> PhotoGrads<T> {
    /// Gradients by name, matching [`PhotoHead::params_mut`].
    pub fn dense(&self) -> Vec<(String, Vec<T>)> {
        vec![
            ("hidden.weight".into(), self.hidden.weight.iter().copied().collect()),
            ("hidden.bias".into(), self.hidden.bias.iter().copied().collect()),
            ("output.weight".into(), self.output.weight.iter().copied().collect()),
            ("output.bias".into(), self.output.bias.iter().copied().collect()),
        ]
    }

    fn global_norm(&self) -> T {
        (self.hidden.sq_norm() + self.output.sq_norm()).sqrt()
    }
}

pub const HEAD_MAGIC: &[u8; 4] = b"PFPH";
pub const HEAD_VERSION: u32 = 1;

impl<T: Scalar> PhotoHead<T> {
    pub fn new(feature_dim: usize, hidden_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PhotoHead {
            hidden: Dense::init(&mut rng, feature_dim, hidden_dim),
            output: Dense::init(&mut rng, hidden_dim, out_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn out_dim(&self) -> usize {
        self.output.outputs()
    }

    fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, Array2<T>, Array2<T>, ndarray::Array1<T>) {
        let pre = self.hidden.forward(x);
        let act = nn::relu(&pre);
        let out = self.output.forward(act.view());
        let (unit, norms) = nn::normalize_rows(&out);
        (pre, act, unit, norms)
    }

    /// Encodes a batch of feature rows; output rows are unit length.
    pub fn encode_batch(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                found: features.ncols(),
            });
        }
        Ok(self.forward(features).2)
    }

    pub fn encode_features(&self, features: &[T]) -> Result<Encoding<T>> {
        let x = ArrayView2::from_shape((1, features.len()), features).expect("1 x n view");
        let out = self.encode_batch(x)?;
        Ok(Encoding::normalize(out.row(0).to_vec()))
    }

    pub fn encode_photo(&self, pf: &PhotoFeatures) -> Result<Encoding<T>> {
        let feats: Vec<T> = pf.features.iter().map(|&v| T::of(v as f64)).collect();
        self.encode_features(&feats)
    }

    /// In-batch softmax loss of photos (rows) against their caption encodings.
    pub fn loss_and_gradients(
        &self,
        features: ArrayView2<T>,
        captions: ArrayView2<T>,
        scale: T,
    ) -> Result<(T, PhotoGrads<T>)> {
        if features.nrows() < 2 {
            return Err(Error::BatchTooSmall(features.nrows()));
        }
        if features.ncols() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                found: features.ncols(),
            });
        }
        let (pre, act, unit, norms) = self.forward(features);
        let cos = unit.dot(&captions.t());
        let (loss, dscores) = nn::diagonal_softmax_loss(&(&cos * scale));
        let dunit = dscores.dot(&captions) * scale;
        let dout = nn::normalize_rows_backward(&unit, &norms, &dunit);
        let (output, dact) = self.output.backward(act.view(), dout.view());
        let dpre = nn::relu_backward(&pre, &dact);
        let (hidden, _) = self.hidden.backward(features, dpre.view());
        Ok((loss, PhotoGrads { hidden, output }))
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("hidden.weight".into(), self.hidden.weight.as_slice_mut().unwrap()),
            ("hidden.bias".into(), self.hidden.bias.as_slice_mut().unwrap()),
            ("output.weight".into(), self.output.weight.as_slice_mut().unwrap()),
            ("output.bias".into(), self.output.bias.as_slice_mut().unwrap()),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(HEAD_MAGIC, HEAD_VERSION);
        w.u32(self.feature_dim() as u32);
        w.u32(self.hidden.outputs() as u32);
        w.u32(self.out_dim() as u32);
        crate::encoder::write_dense(&mut w, &self.hidden);
        crate::encoder::write_dense(&mut w, &self.output);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, HEAD_MAGIC, HEAD_VERSION)?;
        let feature_dim = r.usize()?;
        let hidden_dim = r.usize()?;
        let out_dim = r.usize()?;
        let hidden = crate::encoder::read_dense(&mut r, feature_dim, hidden_dim)?;
        let output = crate::encoder::read_dense(&mut r, hidden_dim, out_dim)?;
        r.expect_end()?;
        Ok(PhotoHead { hidden, output })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// The vector a photo is scored with: the photo encoding alone, or the
/// re-normalized average of photo and caption encodings. `None` when the
/// average cancels out.
pub fn photo_response_vector<T: Scalar>(h_photo: &[T], h_caption: Option<&[T]>) -> Option<Vec<T>> {
    let Some(cap) = h_caption else {
        return Some(h_photo.to_vec());
    };
    let half = T::of(0.5);
    let avg: Vec<T> = h_photo
        .iter()
        .zip(cap)
        .map(|(&p, &c)| (p + c) * half)
        .collect();
    let n = dot(&avg, &avg).sqrt();
    if n < T::of(DEGENERATE_NORM) {
        return None;
    }
    Some(avg.into_iter().map(|v| v / n).collect())
}

/// `C · cos(h_c, h_p)`, or with a caption `C · cos(h_c, normalize((h_caption + h_p) / 2))`.
/// A fully cancelled average scores zero.
pub fn photo_score<T: Scalar>(
    h_context: &Encoding<T>,
    h_photo: &Encoding<T>,
    h_caption: Option<&Encoding<T>>,
    scale: T,
) -> Result<T> {
    h_context.check_normalized()?;
    h_photo.check_normalized()?;
    if let Some(c) = h_caption {
        c.check_normalized()?;
        if c.dim() != h_photo.dim() {
            return Err(Error::DimensionMismatch {
                expected: h_photo.dim(),
                found: c.dim(),
            });
        }
    }
    if h_context.dim() != h_photo.dim() {
        return Err(Error::DimensionMismatch {
            expected: h_context.dim(),
            found: h_photo.dim(),
        });
    }
    Ok(
        match photo_response_vector(h_photo.as_slice(), h_caption.map(Encoding::as_slice)) {
            Some(v) => scale * dot(h_context.as_slice(), &v),
            None => T::zero(),
        },
    )
}

/// Trains a head so photos score highly against their own captions, with the
/// caption encoder held fixed.
pub fn train_photo_head<T: Scalar>(
    pairs: &[(PhotoFeatures, String)],
    frozen: &dyn TextEncoder<T>,
    config: &PhotoConfig,
) -> Result<PhotoHead<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if pairs.len() < 2 || config.batch_size < 2 {
        return Err(Error::BatchTooSmall(pairs.len().min(config.batch_size)));
    }
    let mut features = Array2::zeros((pairs.len(), config.feature_dim));
    for (i, (pf, _)) in pairs.iter().enumerate() {
        if pf.features.len() != config.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: config.feature_dim,
                found: pf.features.len(),
            });
        }
        for (j, &v) in pf.features.iter().enumerate() {
            features[[i, j]] = T::of(v as f64);
        }
    }
    let caption_texts: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    let encoded = frozen.encode_replies(&caption_texts)?;
    let mut captions = Array2::zeros((pairs.len(), frozen.dim()));
    for (i, e) in encoded.iter().enumerate() {
        captions.row_mut(i).assign(&ndarray::ArrayView1::from(e.as_slice()));
    }

    let scale = config.scale.map(T::of).unwrap_or_else(|| frozen.scale());
    let mut head = PhotoHead::new(config.feature_dim, config.hidden_dim, frozen.dim(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let lr = T::of(config.learn_rate);
    let clip = T::of(config.clip_norm);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = features.select(ndarray::Axis(0), chunk);
            let y = captions.select(ndarray::Axis(0), chunk);
            let (_, mut grads) = head.loss_and_gradients(x.view(), y.view(), scale)?;
            let n = grads.global_norm();
            if n > clip {
                grads.hidden.scale(clip / n);
                grads.output.scale(clip / n);
            }
            head.hidden.apply(&grads.hidden, lr);
            head.output.apply(&grads.output, lr);
        }
    }
    Ok(head)
}
