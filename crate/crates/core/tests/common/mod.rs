//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use polyfind_core::encoder::hashing::HashingEncoder;
use polyfind_core::encoder::TextEncoder;
use polyfind_core::index::{EntityInfo, Kind, ResponseIndex, ResponsePool};
use polyfind_core::intent::{load_phrases, train_intent, IntentConfig, IntentKind, IntentSet};
use polyfind_core::photo::{PhotoFeatures, PhotoHead};
use polyfind_core::synth::{synthetic_city, CityShape};
use polyfind_core::{Encoding, Result};

/// Encoder with hand-set vectors for known texts. Contexts are looked up by
/// their last segment; unknown texts fall back to feature hashing.
pub struct TableEncoder {
    table: HashMap<String, Vec<f64>>,
    fallback: HashingEncoder<f64>,
    scale: f64,
}

impl TableEncoder {
    pub fn new(dim: usize, scale: f64, entries: &[(&str, Vec<f64>)]) -> Self {
        TableEncoder {
            table: entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            fallback: HashingEncoder::new(dim),
            scale,
        }
    }

    fn lookup(&self, text: &str) -> Result<Encoding<f64>> {
        match self.table.get(text) {
            Some(v) => Ok(Encoding::normalize(v.clone())),
            None => self.fallback.encode_reply_text(text),
        }
    }
}

impl TextEncoder<f64> for TableEncoder {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn encode_context_segments(&self, segments: &[&str]) -> Result<Encoding<f64>> {
        self.lookup(segments.last().copied().unwrap_or(""))
    }

    fn encode_reply_text(&self, text: &str) -> Result<Encoding<f64>> {
        self.lookup(text)
    }
}

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 4];
    v[i] = 1.0;
    v
}

pub const PASTA_QUERY: &str = "I want pasta";
pub const VAGUE_QUERY: &str = "somewhere nice to eat";
pub const PASTA_OR_NOODLES: &str = "pasta or noodles";

/// Three restaurants whose text candidates point along one axis each:
/// A (Luigi's) along e0, B (Bamboo) along e1, C (Casa) along e2. Luigi's has
/// one captioned photo.
pub fn three_entity() -> (ResponseIndex<f64>, Arc<TableEncoder>) {
    let mut pool = ResponsePool::new("en");
    let names = [("A", "Luigi's"), ("B", "Bamboo"), ("C", "Casa")];
    let texts = [
        [(Kind::Review, "great pasta"), (Kind::Menu, "margherita pizza")],
        [(Kind::Review, "lovely noodles"), (Kind::Fact, "Restaurant Bamboo serves chinese food.")],
        [(Kind::Review, "fresh tacos"), (Kind::Menu, "burritos")],
    ];
    let mut vectors = Vec::new();
    for (i, ((id, name), items)) in names.iter().zip(texts).enumerate() {
        let e = pool.add_entity(EntityInfo {
            entity_id: id.to_string(),
            name: name.to_string(),
            city: "testville".into(),
        });
        for (kind, text) in items {
            pool.push_text(e, kind, text);
            vectors.push(basis(i));
        }
    }
    pool.push_photo(
        0,
        &PhotoFeatures {
            photo_id: "A-p0".into(),
            entity_id: "A".into(),
            caption: Some("pasta on the terrace".into()),
            features: vec![0.0; 4],
        },
    );
    let s = 0.5f64.sqrt();
    vectors.push(vec![s, 0.0, 0.0, s]);
    let r = 3f64.sqrt().recip();
    let enc = TableEncoder::new(
        4,
        2.0,
        &[
            (PASTA_QUERY, basis(0)),
            (VAGUE_QUERY, vec![r, r, r, 0.0]),
            (PASTA_OR_NOODLES, vec![s, s, 0.0, 0.0]),
            ("great pasta", basis(0)),
            ("lovely noodles", basis(1)),
            ("fresh tacos", basis(2)),
        ],
    );
    (ResponseIndex::from_encoded(&pool, vectors, 2.0).unwrap(), Arc::new(enc))
}

/// A synthetic city encoded with feature hashing.
pub fn synthetic_index(entities: usize, dim: usize, seed: u64) -> (ResponseIndex<f64>, Arc<HashingEncoder<f64>>) {
    let shape = CityShape::small(entities);
    let city = synthetic_city(&shape, "synthcity", seed).unwrap();
    let pool = ResponsePool::from_catalog(&city.entities, &city.photos).unwrap();
    let enc = HashingEncoder::<f64>::new(dim);
    let head = PhotoHead::<f64>::new(shape.feature_dim, 8, dim, seed);
    let index = ResponseIndex::build(&pool, &enc, Some(&head)).unwrap();
    (index, Arc::new(enc))
}

/// Every `step`-th text candidate of `index`.
pub fn sample_texts(index: &ResponseIndex<f64>, step: usize) -> Vec<String> {
    index
        .candidates()
        .iter()
        .filter(|c| c.kind != Kind::Photo)
        .step_by(step)
        .map(|c| c.text.clone())
        .collect()
}

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

/// Intent classifiers for `lang` trained on the shipped paraphrases, with
/// `extra` texts as additional negatives.
pub fn trained_intents(lang: &str, encoder: &dyn TextEncoder<f64>, extra: &[String]) -> IntentSet<f64> {
    let load = |name: &str| load_phrases(fixture_path(&format!("intents/{lang}/{name}.txt"))).unwrap();
    let (reset, booking, mut negatives) = (load("reset"), load("booking"), load("negatives"));
    negatives.extend_from_slice(extra);
    let train = |kind, pos: &[String], other: &[String]| {
        let pos: Vec<&str> = pos.iter().map(String::as_str).collect();
        let neg: Vec<&str> = negatives.iter().chain(other).map(String::as_str).collect();
        train_intent(kind, &pos, &neg, encoder, &IntentConfig::default()).unwrap()
    };
    IntentSet {
        reset: train(IntentKind::Reset, &reset, &booking),
        booking: train(IntentKind::Booking, &booking, &reset),
    }
}
