//! Per-city pool of pre-encoded responses with exact and approximate
//! top-k search.
//!
//! Every candidate belongs to one entity. Photo candidates store the vector
//! they are scored with (see [`photo_response_vector`]), so exact and
//! approximate search score photos the same way as text.

mod catalog;
mod hnsw;
mod io;

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::photo::{photo_response_vector, PhotoHead};
use crate::scalar::{dot, Scalar};

pub use catalog::{
    generate_fact_sentences, load_catalog, parse_catalog, template_keys, AttrValue, Entity, EntityInfo,
    PoolEntry, PoolPhoto, ResponsePool,
};
pub use hnsw::{Hnsw, HnswParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Fact,
    Review,
    Menu,
    Photo,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Fact, Kind::Review, Kind::Menu, Kind::Photo];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Fact => "fact",
            Kind::Review => "review",
            Kind::Menu => "menu",
            Kind::Photo => "photo",
        }
    }

    fn from_u8(v: u8) -> Option<Kind> {
        Kind::ALL.get(v as usize).copied()
    }
}

/// A set of candidate kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KindSet(u8);

impl KindSet {
    pub const ALL: KindSet = KindSet(0b1111);
    /// Fact, review and menu: the kinds that take part in entity narrowing.
    pub const TEXT: KindSet = KindSet(0b0111);
    pub const PHOTO: KindSet = KindSet(0b1000);

    pub fn of(kinds: &[Kind]) -> Self {
        KindSet(kinds.iter().fold(0, |acc, k| acc | k.bit()))
    }

    pub fn contains(self, k: Kind) -> bool {
        self.0 & k.bit() != 0
    }
}

/// Candidate counts by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub n_entities: u64,
    pub n_photos: u64,
    pub n_fact_sentences: u64,
    pub n_review_sentences: u64,
    pub n_menu_items: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: u32,
    /// Position of the owning entity in the index.
    pub entity: u32,
    pub kind: Kind,
    /// Original-language display text; the caption for photos.
    pub text: String,
    /// English pivot the vector was computed from, for translated pools.
    pub english: Option<String>,
    pub photo_ref: Option<String>,
}

/// A scored candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<T> {
    pub candidate: u32,
    pub score: T,
}

/// Descending score, then ascending candidate id.
pub fn rank_order<T: Scalar>(a: &Hit<T>, b: &Hit<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.candidate.cmp(&b.candidate))
}

/// Restricts a search to some entities and kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    entities: Vec<u32>,
    kinds: KindSet,
}

impl Filter {
    /// `entities` are entity positions; duplicates are ignored.
    pub fn new(entities: impl IntoIterator<Item = u32>, kinds: KindSet) -> Self {
        let mut entities: Vec<u32> = entities.into_iter().collect();
        entities.sort_unstable();
        entities.dedup();
        Filter { entities, kinds }
    }

    pub fn entities(&self) -> &[u32] {
        &self.entities
    }

    pub fn kinds(&self) -> KindSet {
        self.kinds
    }

    fn allows_entity(&self, e: u32) -> bool {
        self.entities.binary_search(&e).is_ok()
    }
}

/// Encoded candidates of one city.
#[derive(Debug, Clone)]
pub struct ResponseIndex<T> {
    language: String,
    scale: T,
    stats: IndexStats,
    entities: Vec<EntityInfo>,
    entity_lookup: HashMap<String, u32>,
    by_entity: Vec<Vec<u32>>,
    candidates: Vec<Candidate>,
    vectors: Array2<T>,
    approx: Option<Hnsw>,
    exact_threshold: usize,
}

/// Filters matching at most this many candidates are searched exactly even
/// when the approximate structure is built.
pub const DEFAULT_EXACT_THRESHOLD: usize = 4096;

impl<T: Scalar> ResponseIndex<T> {
    /// Assembles an index from a pool and one vector per entry. Vectors must
    /// have the same length; text vectors must be unit length, photo vectors
    /// unit length or zero.
    pub fn from_encoded(pool: &ResponsePool, vectors: Vec<Vec<T>>, scale: T) -> Result<Self> {
        if vectors.len() != pool.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: pool.entries.len(),
                found: vectors.len(),
            });
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(vectors.len() * dim);
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            flat.extend_from_slice(v);
        }
        let vectors = Array2::from_shape_vec((pool.entries.len(), dim), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let candidates = pool
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Candidate {
                candidate_id: i as u32,
                entity: e.entity,
                kind: e.kind,
                text: e.text.clone(),
                english: e.english.clone(),
                photo_ref: e.photo.as_ref().map(|p| p.photo_id.clone()),
            })
            .collect();
        Self::assemble(pool.language.clone(), scale, pool.entities.clone(), candidates, vectors)
    }

    fn assemble(
        language: String,
        scale: T,
        entities: Vec<EntityInfo>,
        candidates: Vec<Candidate>,
        vectors: Array2<T>,
    ) -> Result<Self> {
        let mut entity_lookup = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if entity_lookup.insert(e.entity_id.clone(), i as u32).is_some() {
                return Err(Error::parse(0, format!("duplicate entity_id {:?}", e.entity_id)));
            }
        }
        let mut by_entity = vec![Vec::new(); entities.len()];
        let mut stats = IndexStats {
            n_entities: entities.len() as u64,
            ..IndexStats::default()
        };
        for c in &candidates {
            let Some(list) = by_entity.get_mut(c.entity as usize) else {
                return Err(Error::InvalidArgument(format!(
                    "candidate {} references entity #{} of {}",
                    c.candidate_id,
                    c.entity,
                    entities.len()
                )));
            };
            list.push(c.candidate_id);
            match c.kind {
                Kind::Fact => stats.n_fact_sentences += 1,
                Kind::Review => stats.n_review_sentences += 1,
                Kind::Menu => stats.n_menu_items += 1,
                Kind::Photo => stats.n_photos += 1,
            }
        }
        Ok(ResponseIndex {
            language,
            scale,
            stats,
            entities,
            entity_lookup,
            by_entity,
            candidates,
            vectors,
            approx: None,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        })
    }

    /// Encodes every entry of `pool`: text with the reply encoder, photos
    /// with the head (averaged with the caption encoding when there is one).
    pub fn build(pool: &ResponsePool, encoder: &dyn TextEncoder<T>, head: Option<&PhotoHead<T>>) -> Result<Self> {
        let dim = encoder.dim();
        let texts: Vec<(usize, &str)> = pool
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind != Kind::Photo || e.has_caption())
            .map(|(i, e)| (i, e.encoding_text()))
            .collect();
        let only_text: Vec<&str> = texts.iter().map(|(_, t)| *t).collect();
        let encoded = encoder.encode_replies(&only_text)?;
        let mut vectors: Vec<Option<Vec<T>>> = vec![None; pool.entries.len()];
        for ((i, _), enc) in texts.iter().zip(encoded) {
            if enc.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: enc.dim() });
            }
            vectors[*i] = Some(enc.into_vec());
        }

        let photo_rows: Vec<usize> = (0..pool.entries.len())
            .filter(|&i| pool.entries[i].kind == Kind::Photo)
            .collect();
        if !photo_rows.is_empty() {
            let head = head.ok_or_else(|| Error::InvalidArgument("pool has photos but no photo head was given".into()))?;
            if head.out_dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: head.out_dim() });
            }
            let photo_vecs: Vec<(usize, Vec<T>)> = photo_rows
                .par_iter()
                .map(|&i| {
                    let entry = &pool.entries[i];
                    let feats = &entry.photo.as_ref().expect("photo entry without features").features;
                    let x: Vec<T> = feats.iter().map(|&v| T::of(v as f64)).collect();
                    let h_p = head.encode_features(&x)?;
                    let combined = photo_response_vector(h_p.as_slice(), vectors[i].as_deref())
                        .unwrap_or_else(|| vec![T::zero(); dim]);
                    Ok((i, combined))
                })
                .collect::<Result<_>>()?;
            for (i, v) in photo_vecs {
                vectors[i] = Some(v);
            }
        }
        let vectors = vectors.into_iter().map(|v| v.expect("every entry encoded")).collect();
        Self::from_encoded(pool, vectors, encoder.scale())
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn stats(&self) -> IndexStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn entities(&self) -> &[EntityInfo] {
        &self.entities
    }

    pub fn entity(&self, idx: u32) -> &EntityInfo {
        &self.entities[idx as usize]
    }

    pub fn entity_index(&self, entity_id: &str) -> Option<u32> {
        self.entity_lookup.get(entity_id).copied()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn candidate(&self, id: u32) -> &Candidate {
        &self.candidates[id as usize]
    }

    /// Candidate ids of one entity, ascending.
    pub fn entity_candidates(&self, idx: u32) -> &[u32] {
        &self.by_entity[idx as usize]
    }

    pub fn vector(&self, id: u32) -> ArrayView1<'_, T> {
        self.vectors.row(id as usize)
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    /// Filter over the given entity ids; unknown ids are ignored.
    pub fn filter_ids<'a>(&self, ids: impl IntoIterator<Item = &'a str>, kinds: KindSet) -> Filter {
        Filter::new(ids.into_iter().filter_map(|id| self.entity_index(id)), kinds)
    }

    /// Filter over every entity.
    pub fn filter_all(&self, kinds: KindSet) -> Filter {
        Filter::new(0..self.entities.len() as u32, kinds)
    }

    fn check_query(&self, h_c: &Encoding<T>) -> Result<()> {
        h_c.check_normalized()?;
        if h_c.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: h_c.dim() });
        }
        Ok(())
    }

    fn score_row(&self, q: &[T], id: u32) -> T {
        let row = self.vectors.row(id as usize);
        self.scale * dot(q, row.as_slice().expect("row-major vectors"))
    }

    fn filtered_ids<'a>(&'a self, filter: &'a Filter) -> impl Iterator<Item = u32> + 'a {
        filter
            .entities
            .iter()
            .filter(|&&e| (e as usize) < self.by_entity.len())
            .flat_map(move |&e| self.by_entity[e as usize].iter().copied())
            .filter(move |&id| filter.kinds.contains(self.candidates[id as usize].kind))
    }

    /// Exact top-k over candidates passing `filter`, sorted by descending
    /// score with ties broken by ascending candidate id.
    pub fn search(&self, h_c: &Encoding<T>, filter: &Filter, k: usize) -> Result<Vec<Hit<T>>> {
        self.check_query(h_c)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = h_c.as_slice();
        let mut hits: Vec<Hit<T>> = self
            .filtered_ids(filter)
            .map(|id| Hit { candidate: id, score: self.score_row(q, id) })
            .collect();
        if hits.is_empty() {
            return Err(Error::EmptyPool);
        }
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    /// Builds the graph used by [`search_approx`](Self::search_approx).
    pub fn build_approx(&mut self, params: HnswParams) {
        self.approx = Some(Hnsw::build(self.vectors.view(), params));
    }

    pub fn has_approx(&self) -> bool {
        self.approx.is_some()
    }

    /// Filters matching at most `n` candidates skip the graph and are
    /// searched exactly.
    pub fn set_exact_threshold(&mut self, n: usize) {
        self.exact_threshold = n;
    }

    /// Approximate top-k via the graph. Small filtered pools, and filters too
    /// selective for the graph walk to fill `k` results, fall back to exact
    /// search. Returned hits carry exact scores and the same ordering rule.
    pub fn search_approx(&self, h_c: &Encoding<T>, filter: &Filter, k: usize) -> Result<Vec<Hit<T>>> {
        let graph = self.approx.as_ref().ok_or(Error::NotBuilt)?;
        self.check_query(h_c)?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let passing = self.filtered_ids(filter).count();
        if passing == 0 {
            return Err(Error::EmptyPool);
        }
        if passing <= self.exact_threshold.max(k) {
            return self.search(h_c, filter, k);
        }
        let q = h_c.as_slice();
        let all = filter.entities.len() == self.entities.len() && filter.kinds == KindSet::ALL;
        let accept = |id: u32| {
            all || {
                let c = &self.candidates[id as usize];
                filter.kinds.contains(c.kind) && filter.allows_entity(c.entity)
            }
        };
        let q64: Vec<f64> = q.iter().map(|v| v.to_f64_lossy()).collect();
        let mut ef = graph.params().ef_search.max(k);
        loop {
            let found = graph.search(self.vectors.view(), &q64, ef, &accept);
            if found.len() >= k {
                let mut hits: Vec<Hit<T>> = found
                    .into_iter()
                    .map(|id| Hit { candidate: id, score: self.score_row(q, id) })
                    .collect();
                hits.sort_by(rank_order);
                hits.truncate(k);
                return Ok(hits);
            }
            if ef >= passing || ef >= self.len() {
                return self.search(h_c, filter, k);
            }
            ef *= 4;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        Encoding::normalize(v.to_vec()).into_vec()
    }

    fn small() -> ResponseIndex<f64> {
        let mut pool = ResponsePool::new("en");
        let a = pool.add_entity(Entity::new("a", "A").info());
        let b = pool.add_entity(Entity::new("b", "B").info());
        pool.push_text(a, Kind::Fact, "a1");
        pool.push_text(b, Kind::Review, "b1");
        pool.push_text(a, Kind::Menu, "a2");
        pool.push_text(b, Kind::Review, "b2");
        let vectors = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0]), unit(&[1.0, 0.0])];
        ResponseIndex::from_encoded(&pool, vectors, 2.0).unwrap()
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let idx = small();
        let q = Encoding::normalize(vec![1.0, 0.0]);
        let hits = idx.search(&q, &idx.filter_all(KindSet::ALL), 10).unwrap();
        let ids: Vec<u32> = hits.iter().map(|h| h.candidate).collect();
        assert_eq!(ids, [0, 3, 2, 1]);
        assert!((hits[0].score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn filter_by_entity_and_kind() {
        let idx = small();
        let q = Encoding::normalize(vec![1.0, 0.0]);
        let hits = idx.search(&q, &idx.filter_ids(["b"], KindSet::ALL), 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].candidate, 3);
        let menu = idx.search(&q, &idx.filter_all(KindSet::of(&[Kind::Menu])), 5).unwrap();
        assert_eq!(menu.len(), 1);
        assert!(matches!(
            idx.search(&q, &idx.filter_ids(["a"], KindSet::PHOTO), 5),
            Err(Error::EmptyPool)
        ));
        assert!(matches!(idx.search(&q, &idx.filter_ids(["zz"], KindSet::ALL), 5), Err(Error::EmptyPool)));
    }

    #[test]
    fn stats_and_lookup() {
        let idx = small();
        let s = idx.stats();
        assert_eq!((s.n_entities, s.n_fact_sentences, s.n_review_sentences, s.n_menu_items), (2, 1, 2, 1));
        assert_eq!(idx.entity_candidates(1), [1, 3]);
        assert_eq!(idx.entity_index("b"), Some(1));
    }

    #[test]
    fn approx_requires_build() {
        let mut idx = small();
        let q = Encoding::normalize(vec![0.3, 1.0]);
        assert!(matches!(idx.search_approx(&q, &idx.filter_all(KindSet::ALL), 2), Err(Error::NotBuilt)));
        idx.build_approx(HnswParams::default());
        let f = idx.filter_all(KindSet::ALL);
        assert_eq!(idx.search_approx(&q, &f, 2).unwrap(), idx.search(&q, &f, 2).unwrap());
    }

    #[test]
    fn rejects_unnormalized_query() {
        let idx = small();
        let q = Encoding::raw(vec![3.0, 0.0]);
        assert!(matches!(idx.search(&q, &idx.filter_all(KindSet::ALL), 1), Err(Error::NotNormalized { .. })));
    }
}
