//! Binary intent classifiers (reset, switch to booking) on top of frozen
//! context encodings: one ReLU hidden layer and a sigmoid output, trained
//! with class-weighted binary cross-entropy.

use std::io::BufRead;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::encoder::{read_dense, write_dense, TextEncoder};
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::nn::{self, Dense, DenseGrad};
use crate::scalar::Scalar;

pub const INTENT_MAGIC: &[u8; 4] = b"PFIC";
pub const INTENT_VERSION: u32 = 1;

/// Minimum number of examples per class accepted by [`train_intent`].
pub const MIN_EXAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentKind {
    Reset,
    Booking,
}

impl IntentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IntentKind::Reset => "reset",
            IntentKind::Booking => "booking",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reset" => Some(IntentKind::Reset),
            "booking" => Some(IntentKind::Booking),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntentConfig {
    pub hidden_dim: usize,
    pub learn_rate: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for IntentConfig {
    fn default() -> Self {
        IntentConfig {
            hidden_dim: 100,
            learn_rate: 0.5,
            epochs: 300,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentClassifier<T> {
    pub kind: IntentKind,
    pub hidden: Dense<T>,
    pub output: Dense<T>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentGrads<T> {
    pub hidden: DenseGrad<T>,
    pub output: DenseGrad<T>,
}

impl<T: Scalar> IntentGrads<T> {
    pub fn dense(&self) -> Vec<(String, Vec<T>)> {
        vec![
            ("hidden.weight".into(), self.hidden.weight.iter().copied().collect()),
            ("hidden.bias".into(), self.hidden.bias.to_vec()),
            ("output.weight".into(), self.output.weight.iter().copied().collect()),
            ("output.bias".into(), self.output.bias.to_vec()),
        ]
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> IntentClassifier<T> {
    pub fn new(kind: IntentKind, input_dim: usize, hidden_dim: usize, threshold: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IntentClassifier {
            kind,
            hidden: Dense::init(&mut rng, input_dim, hidden_dim),
            output: Dense::init(&mut rng, hidden_dim, 1),
            threshold,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.inputs()
    }

    fn logits(&self, x: ArrayView2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
        let pre = self.hidden.forward(x);
        let act = nn::relu(&pre);
        let z = self.output.forward(act.view());
        (pre, act, z)
    }

    /// Probability of the intent, and whether it exceeds the threshold.
    pub fn classify(&self, h_c: &Encoding<T>) -> Result<(bool, T)> {
        if h_c.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: h_c.dim(),
            });
        }
        h_c.check_normalized()?;
        let x = ArrayView2::from_shape((1, h_c.dim()), h_c.as_slice()).expect("row vector");
        let (_, _, z) = self.logits(x);
        let p = nn::sigmoid(z[[0, 0]]);
        Ok((p.to_f64_lossy() > self.threshold, p))
    }

    /// Weighted mean BCE over rows of `x` with 0/1 `labels`, where each row
    /// carries weight `weights[i]`.
    pub fn loss_and_gradients(&self, x: ArrayView2<T>, labels: &[T], weights: &[T]) -> (T, IntentGrads<T>) {
        let n = T::of(x.nrows() as f64);
        let (pre, act, z) = self.logits(x);
        let mut loss = T::zero();
        let mut dz = Array2::zeros(z.raw_dim());
        for i in 0..x.nrows() {
            let zi = z[[i, 0]];
            loss += weights[i] * (softplus(zi) - labels[i] * zi);
            dz[[i, 0]] = weights[i] * (nn::sigmoid(zi) - labels[i]) / n;
        }
        let (output, dact) = self.output.backward(act.view(), dz.view());
        let dpre = nn::relu_backward(&pre, &dact);
        let (hidden, _) = self.hidden.backward(x, dpre.view());
        (loss / n, IntentGrads { hidden, output })
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("hidden.weight".into(), self.hidden.weight.as_slice_mut().unwrap()),
            ("hidden.bias".into(), self.hidden.bias.as_slice_mut().unwrap()),
            ("output.weight".into(), self.output.weight.as_slice_mut().unwrap()),
            ("output.bias".into(), self.output.bias.as_slice_mut().unwrap()),
        ]
    }

    fn write(&self, w: &mut Writer) {
        let name = self.kind.as_str().as_bytes();
        w.u32(name.len() as u32);
        w.bytes(name);
        w.u64(self.threshold.to_bits());
        w.u32(self.hidden.inputs() as u32);
        w.u32(self.hidden.outputs() as u32);
        write_dense(w, &self.hidden);
        write_dense(w, &self.output);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.bytes(len)?).map_err(|_| Error::CorruptFile("intent name".into()))?;
        let kind = IntentKind::parse(name).ok_or_else(|| Error::CorruptFile(format!("unknown intent {name:?}")))?;
        let threshold = f64::from_bits(r.u64()?);
        let inputs = r.usize()?;
        let hidden_dim = r.usize()?;
        Ok(IntentClassifier {
            kind,
            hidden: read_dense(r, inputs, hidden_dim)?,
            output: read_dense(r, hidden_dim, 1)?,
            threshold,
        })
    }
}

/// The two classifiers run on every turn.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentSet<T> {
    pub reset: IntentClassifier<T>,
    pub booking: IntentClassifier<T>,
}

/// Outcome of running both classifiers on one encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentDecision {
    pub reset: f64,
    pub booking: f64,
    /// The intent acted on; reset wins when both fire.
    pub fired: Option<IntentKind>,
}

impl<T: Scalar> IntentSet<T> {
    pub fn decide(&self, h_c: &Encoding<T>) -> Result<IntentDecision> {
        let (reset_fired, reset) = self.reset.classify(h_c)?;
        let (booking_fired, booking) = self.booking.classify(h_c)?;
        let fired = if reset_fired {
            Some(IntentKind::Reset)
        } else if booking_fired {
            Some(IntentKind::Booking)
        } else {
            None
        };
        Ok(IntentDecision {
            reset: reset.to_f64_lossy(),
            booking: booking.to_f64_lossy(),
            fired,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(INTENT_MAGIC, INTENT_VERSION);
        w.u32(2);
        self.reset.write(&mut w);
        self.booking.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, INTENT_MAGIC, INTENT_VERSION)?;
        if r.u32()? != 2 {
            return Err(Error::CorruptFile("expected two classifiers".into()));
        }
        let a = IntentClassifier::read(&mut r)?;
        let b = IntentClassifier::read(&mut r)?;
        r.expect_end()?;
        let (reset, booking) = match (a.kind, b.kind) {
            (IntentKind::Reset, IntentKind::Booking) => (a, b),
            (IntentKind::Booking, IntentKind::Reset) => (b, a),
            _ => return Err(Error::CorruptFile("need one reset and one booking classifier".into())),
        };
        Ok(IntentSet { reset, booking })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads one phrase per line, skipping blank lines and `#` comments.
pub fn read_phrases<R: BufRead>(r: R) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

pub fn load_phrases(path: impl AsRef<Path>) -> Result<Vec<String>> {
    read_phrases(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn encode_rows<T: Scalar>(encoder: &dyn TextEncoder<T>, texts: &[&str]) -> Result<Array2<T>> {
    let mut x = Array2::zeros((texts.len(), encoder.dim()));
    for (i, t) in texts.iter().enumerate() {
        let h = encoder.encode_context_text(t)?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(h.as_slice()));
    }
    Ok(x)
}

/// Full-batch gradient descent on class-weighted BCE (each class carries
/// half the total weight). The encoder is only read.
pub fn train_intent<T: Scalar>(
    kind: IntentKind,
    positives: &[&str],
    negatives: &[&str],
    encoder: &dyn TextEncoder<T>,
    config: &IntentConfig,
) -> Result<IntentClassifier<T>> {
    if positives.len() < MIN_EXAMPLES || negatives.len() < MIN_EXAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} needs at least {MIN_EXAMPLES} positives and {MIN_EXAMPLES} negatives, got {} and {}",
            kind.as_str(),
            positives.len(),
            negatives.len()
        )));
    }
    if !(config.threshold > 0.0 && config.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", config.threshold)));
    }
    let texts: Vec<&str> = positives.iter().chain(negatives).copied().collect();
    let x = encode_rows(encoder, &texts)?;
    let n = texts.len() as f64;
    let w_pos = T::of(n / (2.0 * positives.len() as f64));
    let w_neg = T::of(n / (2.0 * negatives.len() as f64));
    let labels: Vec<T> = (0..texts.len())
        .map(|i| if i < positives.len() { T::one() } else { T::zero() })
        .collect();
    let weights: Vec<T> = (0..texts.len())
        .map(|i| if i < positives.len() { w_pos } else { w_neg })
        .collect();
    let mut clf = IntentClassifier::new(kind, encoder.dim(), config.hidden_dim, config.threshold, config.seed);
    let lr = T::of(config.learn_rate);
    for _ in 0..config.epochs {
        let (_, g) = clf.loss_and_gradients(x.view(), &labels, &weights);
        clf.hidden.apply(&g.hidden, lr);
        clf.output.apply(&g.output, lr);
    }
    Ok(clf)
}

/// Cross-validation holding out `fold_size` positives per fold (negatives are
/// split into the same number of folds). Returns accuracy over all held-out
/// examples of both classes.
pub fn cross_validate<T: Scalar>(
    kind: IntentKind,
    positives: &[&str],
    negatives: &[&str],
    encoder: &dyn TextEncoder<T>,
    config: &IntentConfig,
    fold_size: usize,
) -> Result<f64> {
    if fold_size == 0 || positives.len() < 2 * fold_size {
        return Err(Error::InsufficientData(format!(
            "{} positives cannot be split into folds of {fold_size}",
            positives.len()
        )));
    }
    let folds = positives.len().div_ceil(fold_size);
    let mut correct = 0usize;
    let mut total = 0usize;
    for f in 0..folds {
        let held_pos = |i: usize| i / fold_size == f;
        let held_neg = |i: usize| i % folds == f;
        let train_pos: Vec<&str> = positives.iter().enumerate().filter(|(i, _)| !held_pos(*i)).map(|(_, s)| *s).collect();
        let train_neg: Vec<&str> = negatives.iter().enumerate().filter(|(i, _)| !held_neg(*i)).map(|(_, s)| *s).collect();
        let clf = train_intent(kind, &train_pos, &train_neg, encoder, config)?;
        for (_, s) in positives.iter().enumerate().filter(|(i, _)| held_pos(*i)) {
            correct += clf.classify(&encoder.encode_context_text(s)?)?.0 as usize;
            total += 1;
        }
        for (_, s) in negatives.iter().enumerate().filter(|(i, _)| held_neg(*i)) {
            correct += !clf.classify(&encoder.encode_context_text(s)?)?.0 as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean probability the classifier assigns to a set of texts; for reports.
pub fn mean_probability<T: Scalar>(clf: &IntentClassifier<T>, encoder: &dyn TextEncoder<T>, texts: &[&str]) -> Result<f64> {
    let x = encode_rows(encoder, texts)?;
    let (_, _, z) = clf.logits(x.view());
    Ok(z.map(|&v| nn::sigmoid(v).to_f64_lossy()).mean_axis(Axis(0)).map_or(0.0, |m| m[0]))
}
