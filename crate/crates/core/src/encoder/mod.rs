//! Dual encoder mapping feature sets to unit-length `l`-dimensional vectors.
//!
//! Unigram and bigram embedding tables are shared by the context and reply
//! sides. Each stream is optionally passed through a self-attention block,
//! mean-pooled, and the pooled streams are averaged. The pooled vector then
//! goes through a side-specific tower of ReLU layers and a final linear map,
//! and is L2-normalized so that cosine similarity is a dot product.

mod attention;
mod eval;
pub mod hashing;
mod io;
pub(crate) use io::{read_dense, write_dense};
mod train;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{Attention, AttentionGrad};
pub use eval::recall_at_k;
pub use train::{train, train_with_history, Gradients};

use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureSet, Vocab};
use crate::nn::{self, Dense, DenseGrad};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub out_dim: usize,
    pub attention_enabled: bool,
    pub attention_heads: usize,
    pub learn_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            hidden_dim: 128,
            hidden_layers: 3,
            out_dim: 64,
            attention_enabled: true,
            attention_heads: 1,
            learn_rate: 0.5,
            batch_size: 50,
            epochs: 30,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration: d=320, three 1024-wide layers, l=512,
    /// batches of 500.
    pub fn full_size() -> Self {
        EncoderConfig {
            embed_dim: 320,
            hidden_dim: 1024,
            hidden_layers: 3,
            out_dim: 512,
            batch_size: 500,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.out_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.attention_enabled
            && (self.attention_heads == 0 || !self.embed_dim.is_multiple_of(self.attention_heads))
        {
            return Err(Error::InvalidArgument(format!(
                "attention_heads ({}) must divide embed_dim ({})",
                self.attention_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Upper bound of the learned scale constant, `√l`.
    pub fn max_scale(&self) -> f64 {
        (self.out_dim as f64).sqrt()
    }
}

/// Smallest value the scale constant is clamped to.
pub const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Context,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Unigram,
    Bigram,
}

/// Hidden ReLU layers followed by a linear projection to `l` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<T> {
    pub hidden: Vec<Dense<T>>,
    pub output: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrad<T> {
    pub hidden: Vec<DenseGrad<T>>,
    pub output: DenseGrad<T>,
}

pub(crate) struct TowerCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Scalar> Tower<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        let mut width = cfg.embed_dim;
        for _ in 0..cfg.hidden_layers {
            hidden.push(Dense::init(rng, width, cfg.hidden_dim));
            width = cfg.hidden_dim;
        }
        Tower {
            hidden,
            output: Dense::init(rng, width, cfg.out_dim),
        }
    }

    pub(crate) fn forward(&self, x: Array2<T>) -> (Array2<T>, TowerCache<T>) {
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut a = x;
        for layer in &self.hidden {
            let z = layer.forward(a.view());
            inputs.push(a);
            a = nn::relu(&z);
            pre.push(z);
        }
        let out = self.output.forward(a.view());
        inputs.push(a);
        (out, TowerCache { inputs, pre })
    }

    pub(crate) fn backward(&self, cache: &TowerCache<T>, dout: &Array2<T>) -> (TowerGrad<T>, Array2<T>) {
        let last = cache.inputs.len() - 1;
        let (output, mut da) = self.output.backward(cache.inputs[last].view(), dout.view());
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for k in (0..self.hidden.len()).rev() {
            let dz = nn::relu_backward(&cache.pre[k], &da);
            let (g, dx) = self.hidden[k].backward(cache.inputs[k].view(), dz.view());
            hidden.push(g);
            da = dx;
        }
        hidden.reverse();
        (TowerGrad { hidden, output }, da)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.output))
    }
}

impl<T: Scalar> TowerGrad<T> {
    fn layers(&self) -> impl Iterator<Item = &DenseGrad<T>> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad<T>> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.output))
    }
}

/// Per-stream attention blocks, shared by both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamAttention<T> {
    pub unigram: Attention<T>,
    pub bigram: Attention<T>,
}

struct StreamCache<T> {
    ids: Vec<u32>,
    weight: T,
    attention: Option<attention::AttentionCache<T>>,
}

pub(crate) struct PoolCache<T> {
    streams: [Option<StreamCache<T>>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    pub(crate) unigram_emb: Array2<T>,
    pub(crate) bigram_emb: Array2<T>,
    pub(crate) attention: Option<StreamAttention<T>>,
    pub(crate) context_tower: Tower<T>,
    pub(crate) reply_tower: Tower<T>,
    pub(crate) scale: T,
    vocab_checksum: u32,
}

impl<T: Scalar> EncoderModel<T> {
    /// Randomly initialized model sized for `vocab`, seeded from `config.seed`.
    /// The scale constant starts uniformly in `[0.5, 1.0]`.
    pub fn new(config: EncoderConfig, vocab: &Vocab) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, vocab.unigram_rows(), vocab.bigram_rows(), vocab.checksum(), &mut rng)
    }

    pub(crate) fn with_rng<R: Rng>(
        config: EncoderConfig,
        unigram_rows: usize,
        bigram_rows: usize,
        vocab_checksum: u32,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let emb_limit = (3.0 / d as f64).sqrt();
        let unigram_emb = nn::uniform(rng, (unigram_rows, d), emb_limit);
        let bigram_emb = nn::uniform(rng, (bigram_rows, d), emb_limit);
        let attention = config.attention_enabled.then(|| StreamAttention {
            unigram: Attention::init(rng, d, config.attention_heads),
            bigram: Attention::init(rng, d, config.attention_heads),
        });
        let context_tower = Tower::init(rng, &config);
        let reply_tower = Tower::init(rng, &config);
        let scale = T::of(rng.gen_range(0.5..=1.0));
        Ok(EncoderModel {
            config,
            unigram_emb,
            bigram_emb,
            attention,
            context_tower,
            reply_tower,
            scale,
            vocab_checksum,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut EncoderConfig {
        &mut self.config
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// The learned scale constant `C`.
    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn set_scale(&mut self, c: T) {
        self.scale = self.clamp_scale(c);
    }

    pub(crate) fn clamp_scale(&self, c: T) -> T {
        c.max(T::of(MIN_SCALE)).min(T::of(self.config.max_scale()))
    }

    pub fn vocab_checksum(&self) -> u32 {
        self.vocab_checksum
    }

    pub fn tower(&self, side: Side) -> &Tower<T> {
        match side {
            Side::Context => &self.context_tower,
            Side::Reply => &self.reply_tower,
        }
    }

    fn table(&self, stream: Stream) -> &Array2<T> {
        match stream {
            Stream::Unigram => &self.unigram_emb,
            Stream::Bigram => &self.bigram_emb,
        }
    }

    pub fn embedding_rows(&self, stream: Stream) -> usize {
        self.table(stream).nrows()
    }

    pub fn embedding_row(&self, stream: Stream, id: u32) -> &[T] {
        let row = self.table(stream).row(id as usize);
        row.to_slice().expect("embedding tables are row-major")
    }

    pub fn embedding_row_mut(&mut self, stream: Stream, id: u32) -> &mut [T] {
        let table = match stream {
            Stream::Unigram => &mut self.unigram_emb,
            Stream::Bigram => &mut self.bigram_emb,
        };
        table
            .row_mut(id as usize)
            .into_slice()
            .expect("embedding tables are row-major")
    }

    fn check_ids(&self, fs: &FeatureSet) -> Result<()> {
        for (ids, stream) in [(&fs.unigrams, Stream::Unigram), (&fs.bigrams, Stream::Bigram)] {
            let rows = self.embedding_rows(stream);
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    found: bad as usize + 1,
                });
            }
        }
        Ok(())
    }

    /// Mean-pooled stream vector, or `None` for an empty stream.
    pub fn pool_stream(&self, stream: Stream, ids: &[u32]) -> Option<Array1<T>> {
        self.pool_stream_cached(stream, ids, T::one()).map(|(v, _)| v)
    }

    fn pool_stream_cached(
        &self,
        stream: Stream,
        ids: &[u32],
        weight: T,
    ) -> Option<(Array1<T>, StreamCache<T>)> {
        if ids.is_empty() {
            return None;
        }
        let table = self.table(stream);
        let d = self.config.embed_dim;
        let mut x = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            x.row_mut(i).assign(&table.row(id as usize));
        }
        let (y, cache) = match &self.attention {
            Some(att) => {
                let block = match stream {
                    Stream::Unigram => &att.unigram,
                    Stream::Bigram => &att.bigram,
                };
                let (y, c) = block.forward(x);
                (y, Some(c))
            }
            None => (x, None),
        };
        let pooled = y.mean_axis(Axis(0)).expect("non-empty stream");
        Some((
            pooled,
            StreamCache {
                ids: ids.to_vec(),
                weight,
                attention: cache,
            },
        ))
    }

    /// Averages the pooled unigram and bigram vectors (empty streams are
    /// skipped; an empty feature set pools to zero).
    pub(crate) fn pool(&self, fs: &FeatureSet) -> (Array1<T>, PoolCache<T>) {
        let present = (!fs.unigrams.is_empty()) as usize + (!fs.bigrams.is_empty()) as usize;
        let weight = if present == 0 {
            T::zero()
        } else {
            T::one() / T::of(present as f64)
        };
        let mut pooled = Array1::zeros(self.config.embed_dim);
        let mut streams = [None, None];
        for (slot, (stream, ids)) in [(Stream::Unigram, &fs.unigrams), (Stream::Bigram, &fs.bigrams)]
            .into_iter()
            .enumerate()
        {
            if let Some((v, cache)) = self.pool_stream_cached(stream, ids, weight) {
                pooled.scaled_add(weight, &v);
                streams[slot] = Some(cache);
            }
        }
        (pooled, PoolCache { streams })
    }

    pub(crate) fn pool_batch(&self, batch: &[&FeatureSet]) -> (Array2<T>, Vec<PoolCache<T>>) {
        let mut pooled = Array2::zeros((batch.len(), self.config.embed_dim));
        let mut caches = Vec::with_capacity(batch.len());
        for (i, fs) in batch.iter().enumerate() {
            let (p, c) = self.pool(fs);
            pooled.row_mut(i).assign(&p);
            caches.push(c);
        }
        (pooled, caches)
    }

    /// Encodes a batch on one side; rows of the result are unit length.
    pub fn encode_batch(&self, side: Side, batch: &[&FeatureSet]) -> Result<Array2<T>> {
        for fs in batch {
            self.check_ids(fs)?;
        }
        let (pooled, _) = self.pool_batch(batch);
        let (out, _) = self.tower(side).forward(pooled);
        Ok(nn::normalize_rows(&out).0)
    }

    pub fn encode(&self, side: Side, fs: &FeatureSet) -> Result<Encoding<T>> {
        let out = self.encode_batch(side, &[fs])?;
        Ok(Encoding::from_unit(out.row(0).to_vec()))
    }

    pub fn encode_context(&self, fs: &FeatureSet) -> Result<Encoding<T>> {
        self.encode(Side::Context, fs)
    }

    pub fn encode_reply(&self, fs: &FeatureSet) -> Result<Encoding<T>> {
        self.encode(Side::Reply, fs)
    }

    /// Dense parameter tensors by name, in serialization order (embedding
    /// tables excluded; see [`Self::embedding_row_mut`]).
    pub fn dense_params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![("scale".into(), std::slice::from_mut(&mut self.scale))];
        if let Some(att) = &mut self.attention {
            for (stream, block) in [("unigram", &mut att.unigram), ("bigram", &mut att.bigram)] {
                for (name, t) in block.tensors_mut() {
                    out.push((format!("attention.{stream}.{name}"), t.as_slice_mut().unwrap()));
                }
            }
        }
        for (side, tower) in [("context", &mut self.context_tower), ("reply", &mut self.reply_tower)] {
            for (i, layer) in tower.layers_mut().enumerate() {
                out.push((format!("{side}_tower.{i}.weight"), layer.weight.as_slice_mut().unwrap()));
                out.push((format!("{side}_tower.{i}.bias"), layer.bias.as_slice_mut().unwrap()));
            }
        }
        out
    }

    /// CRC32 over every parameter; used to verify a model stays frozen.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

/// Anything that can turn text into context and reply encodings.
pub trait TextEncoder<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Scale constant applied to cosine similarities.
    fn scale(&self) -> T;

    /// Encodes a context made of several segments (e.g. dialogue turns).
    fn encode_context_segments(&self, segments: &[&str]) -> Result<Encoding<T>>;

    fn encode_reply_text(&self, text: &str) -> Result<Encoding<T>>;

    fn encode_context_text(&self, text: &str) -> Result<Encoding<T>> {
        self.encode_context_segments(&[text])
    }

    fn encode_replies(&self, texts: &[&str]) -> Result<Vec<Encoding<T>>> {
        texts.iter().map(|t| self.encode_reply_text(t)).collect()
    }
}

/// Vocabulary plus trained model.
#[derive(Debug, Clone)]
pub struct DualEncoder<T> {
    pub vocab: Vocab,
    pub model: EncoderModel<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(vocab: Vocab, model: EncoderModel<T>) -> Result<Self> {
        if vocab.unigram_rows() != model.embedding_rows(Stream::Unigram)
            || vocab.bigram_rows() != model.embedding_rows(Stream::Bigram)
        {
            return Err(Error::DimensionMismatch {
                expected: model.embedding_rows(Stream::Unigram),
                found: vocab.unigram_rows(),
            });
        }
        if vocab.checksum() != model.vocab_checksum() {
            return Err(Error::InvalidArgument(format!(
                "model was trained with vocab checksum {:08x}, got {:08x}",
                model.vocab_checksum(),
                vocab.checksum()
            )));
        }
        Ok(DualEncoder { vocab, model })
    }
}

impl<T: Scalar> TextEncoder<T> for DualEncoder<T> {
    fn dim(&self) -> usize {
        self.model.out_dim()
    }

    fn scale(&self) -> T {
        self.model.scale()
    }

    fn encode_context_segments(&self, segments: &[&str]) -> Result<Encoding<T>> {
        self.model.encode_context(&self.vocab.featurize_segments(segments))
    }

    fn encode_reply_text(&self, text: &str) -> Result<Encoding<T>> {
        self.model.encode_reply(&self.vocab.featurize(text))
    }

    fn encode_replies(&self, texts: &[&str]) -> Result<Vec<Encoding<T>>> {
        texts
            .par_chunks(256)
            .map(|chunk| {
                let fs: Vec<FeatureSet> = chunk.iter().map(|t| self.vocab.featurize(t)).collect();
                let refs: Vec<&FeatureSet> = fs.iter().collect();
                let out = self.model.encode_batch(Side::Reply, &refs)?;
                Ok(out
                    .rows()
                    .into_iter()
                    .map(|r| Encoding::from_unit(r.to_vec()))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    }
}
