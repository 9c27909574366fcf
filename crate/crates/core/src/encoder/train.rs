//! In-batch softmax training: for a batch of B (context, reply) pairs, row
//! i's positive is reply i and the other B-1 replies are negatives.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    AttentionGrad, EncoderConfig, EncoderModel, PoolCache, Side, Stream, TowerGrad,
};
use crate::error::{Error, Result};
use crate::featurizer::{FeatureSet, Vocab};
use crate::nn::{self, DenseGrad};
use crate::scalar::Scalar;

/// Gradients of the batch loss w.r.t. every trainable tensor. Embedding
/// gradients are sparse: only rows touched by the batch are present.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub unigram_rows: BTreeMap<u32, Array1<T>>,
    pub bigram_rows: BTreeMap<u32, Array1<T>>,
    pub attention: Option<[AttentionGrad<T>; 2]>,
    pub context_tower: TowerGrad<T>,
    pub reply_tower: TowerGrad<T>,
    pub scale: T,
}

impl<T: Scalar> Gradients<T> {
    fn zeros_like(model: &EncoderModel<T>) -> Self {
        let tower = |t: &super::Tower<T>| TowerGrad {
            hidden: t
                .hidden
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            output: DenseGrad {
                weight: Array2::zeros(t.output.weight.raw_dim()),
                bias: Array1::zeros(t.output.bias.raw_dim()),
            },
        };
        Gradients {
            unigram_rows: BTreeMap::new(),
            bigram_rows: BTreeMap::new(),
            attention: model.attention.as_ref().map(|a| {
                [AttentionGrad::zeros_like(&a.unigram), AttentionGrad::zeros_like(&a.bigram)]
            }),
            context_tower: tower(&model.context_tower),
            reply_tower: tower(&model.reply_tower),
            scale: T::zero(),
        }
    }

    pub fn embedding_rows(&self, stream: Stream) -> &BTreeMap<u32, Array1<T>> {
        match stream {
            Stream::Unigram => &self.unigram_rows,
            Stream::Bigram => &self.bigram_rows,
        }
    }

    /// Dense gradients by name, matching [`EncoderModel::dense_params_mut`].
    pub fn dense(&self) -> Vec<(String, Vec<T>)> {
        let mut out = vec![("scale".to_owned(), vec![self.scale])];
        if let Some([u, b]) = &self.attention {
            for (stream, g) in [("unigram", u), ("bigram", b)] {
                for (name, t) in ["wq", "wk", "wv", "wo"].iter().zip(g.tensors()) {
                    out.push((format!("attention.{stream}.{name}"), t.iter().copied().collect()));
                }
            }
        }
        for (side, tower) in [("context", &self.context_tower), ("reply", &self.reply_tower)] {
            for (i, layer) in tower.layers().enumerate() {
                out.push((format!("{side}_tower.{i}.weight"), layer.weight.iter().copied().collect()));
                out.push((format!("{side}_tower.{i}.bias"), layer.bias.iter().copied().collect()));
            }
        }
        out
    }

    pub fn global_norm(&self) -> T {
        let mut sq = self.scale * self.scale;
        for rows in [&self.unigram_rows, &self.bigram_rows] {
            for r in rows.values() {
                sq += nn::sq_sum(r.iter());
            }
        }
        if let Some(att) = &self.attention {
            sq += att.iter().map(AttentionGrad::sq_norm).sum();
        }
        for tower in [&self.context_tower, &self.reply_tower] {
            sq += tower.layers().map(DenseGrad::sq_norm).sum();
        }
        sq.sqrt()
    }

    fn scale_by(&mut self, f: T) {
        self.scale *= f;
        for rows in [&mut self.unigram_rows, &mut self.bigram_rows] {
            for r in rows.values_mut() {
                r.mapv_inplace(|v| v * f);
            }
        }
        if let Some(att) = &mut self.attention {
            att.iter_mut().for_each(|g| g.scale(f));
        }
        for tower in [&mut self.context_tower, &mut self.reply_tower] {
            tower.layers_mut().for_each(|g| g.scale(f));
        }
    }
}

/// Tower outputs, their norms and the caches needed to backpropagate them.
type SideForward<T> = (Array2<T>, Array1<T>, Vec<PoolCache<T>>, super::TowerCache<T>);

impl<T: Scalar> EncoderModel<T> {
    fn pool_backward(&self, cache: &PoolCache<T>, dpooled: ArrayView1<T>, grads: &mut Gradients<T>) {
        let d = self.embed_dim();
        for (slot, stream) in [(0usize, Stream::Unigram), (1, Stream::Bigram)] {
            let Some(sc) = &cache.streams[slot] else { continue };
            let n = sc.ids.len();
            let row = dpooled.mapv(|v| v * sc.weight / T::of(n as f64));
            let mut dy = Array2::zeros((n, d));
            for mut r in dy.rows_mut() {
                r.assign(&row);
            }
            let dx = match (&sc.attention, &self.attention) {
                (Some(ac), Some(att)) => {
                    let block = if slot == 0 { &att.unigram } else { &att.bigram };
                    let (ag, dx) = block.backward(ac, &dy);
                    grads.attention.as_mut().expect("attention grads allocated")[slot].add(&ag);
                    dx
                }
                _ => dy,
            };
            let rows = match stream {
                Stream::Unigram => &mut grads.unigram_rows,
                Stream::Bigram => &mut grads.bigram_rows,
            };
            for (i, &id) in sc.ids.iter().enumerate() {
                *rows.entry(id).or_insert_with(|| Array1::zeros(d)) += &dx.row(i);
            }
        }
    }

    fn forward_side(
        &self,
        side: Side,
        batch: &[&FeatureSet],
    ) -> Result<SideForward<T>> {
        for fs in batch {
            self.check_ids(fs)?;
        }
        let (pooled, pools) = self.pool_batch(batch);
        let (out, tower_cache) = self.tower(side).forward(pooled);
        let (unit, norms) = nn::normalize_rows(&out);
        Ok((unit, norms, pools, tower_cache))
    }

    /// Mean in-batch softmax loss, without gradients.
    pub fn batch_loss(&self, batch: &[(FeatureSet, FeatureSet)]) -> Result<T> {
        Ok(self.loss_and_gradients(batch)?.0)
    }

    pub fn loss_and_gradients(&self, batch: &[(FeatureSet, FeatureSet)]) -> Result<(T, Gradients<T>)> {
        if batch.len() < 2 {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        let contexts: Vec<&FeatureSet> = batch.iter().map(|(c, _)| c).collect();
        let replies: Vec<&FeatureSet> = batch.iter().map(|(_, r)| r).collect();
        let (hc, nc, pc, tc) = self.forward_side(Side::Context, &contexts)?;
        let (hr, nr, pr, tr) = self.forward_side(Side::Reply, &replies)?;

        let cos = hc.dot(&hr.t());
        let scores = &cos * self.scale;
        let (loss, dscores) = nn::diagonal_softmax_loss(&scores);

        let mut grads = Gradients::zeros_like(self);
        grads.scale = (&dscores * &cos).sum();
        let dhc = dscores.dot(&hr) * self.scale;
        let dhr = dscores.t().dot(&hc) * self.scale;

        for (side, h, norms, pools, tower_cache, dh) in [
            (Side::Context, &hc, &nc, &pc, &tc, &dhc),
            (Side::Reply, &hr, &nr, &pr, &tr, &dhr),
        ] {
            let dout = nn::normalize_rows_backward(h, norms, dh);
            let (tg, dpooled) = self.tower(side).backward(tower_cache, &dout);
            match side {
                Side::Context => grads.context_tower = tg,
                Side::Reply => grads.reply_tower = tg,
            }
            for (i, cache) in pools.iter().enumerate() {
                self.pool_backward(cache, dpooled.row(i), &mut grads);
            }
        }
        Ok((loss, grads))
    }

    /// Plain SGD update; the scale constant is clamped to `(0, √l]` afterwards.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, lr: T) {
        for (id, g) in &grads.unigram_rows {
            self.unigram_emb.row_mut(*id as usize).scaled_add(-lr, g);
        }
        for (id, g) in &grads.bigram_rows {
            self.bigram_emb.row_mut(*id as usize).scaled_add(-lr, g);
        }
        if let (Some(att), Some([gu, gb])) = (&mut self.attention, &grads.attention) {
            att.unigram.apply(gu, lr);
            att.bigram.apply(gb, lr);
        }
        for (tower, g) in [
            (&mut self.context_tower, &grads.context_tower),
            (&mut self.reply_tower, &grads.reply_tower),
        ] {
            for (layer, lg) in tower.layers_mut().zip(g.layers()) {
                layer.apply(lg, lr);
            }
        }
        self.scale = self.clamp_scale(self.scale - lr * grads.scale);
    }

    /// One SGD step on `batch` with global-norm gradient clipping. Returns the
    /// loss before the update.
    pub fn train_step(&mut self, batch: &[(FeatureSet, FeatureSet)]) -> Result<T> {
        let (loss, mut grads) = self.loss_and_gradients(batch)?;
        let clip = T::of(self.config().clip_norm);
        let norm = grads.global_norm();
        if norm > clip {
            grads.scale_by(clip / norm);
        }
        let lr = T::of(self.config().learn_rate);
        self.apply_gradients(&grads, lr);
        Ok(loss)
    }
}

/// Trains a fresh model on `(context, reply)` pairs. See [`train_with_history`].
pub fn train<T: Scalar, S: AsRef<str>>(
    corpus: &[(S, S)],
    config: &EncoderConfig,
    vocab: &Vocab,
) -> Result<EncoderModel<T>> {
    train_with_history(corpus, config, vocab).map(|(m, _)| m)
}

/// Trains for `config.epochs` epochs over seeded shuffles of the corpus and
/// returns the model with the mean loss of each epoch.
pub fn train_with_history<T: Scalar, S: AsRef<str>>(
    corpus: &[(S, S)],
    config: &EncoderConfig,
    vocab: &Vocab,
) -> Result<(EncoderModel<T>, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.len() < 2 {
        return Err(Error::BatchTooSmall(corpus.len()));
    }
    let mut model = EncoderModel::<T>::new(config.clone(), vocab)?;
    let pairs: Vec<(FeatureSet, FeatureSet)> = corpus
        .iter()
        .map(|(c, r)| (vocab.featurize(c.as_ref()), vocab.featurize(r.as_ref())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i].clone()));
            total += model.train_step(&batch)?.to_f64_lossy();
            steps += 1;
        }
        history.push(total / steps.max(1) as f64);
    }
    Ok((model, history))
}
