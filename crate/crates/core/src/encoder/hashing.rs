//! Untrained feature-hashing encoder.
//!
//! Every non-boundary unigram and bigram is mapped to a fixed pseudo-random
//! ±1 vector derived from its hash; a text's encoding is the normalized sum.
//! Context and reply sides are identical, so texts with overlapping words
//! score high against each other. Useful as a baseline and for fixtures
//! where vectors must be predictable without training.

use crate::encoding::Encoding;
use crate::error::Result;
use crate::featurizer::{bigram_pairs, fnv1a, normalize_segments, Token};
use crate::scalar::Scalar;

use super::TextEncoder;

#[derive(Debug, Clone)]
pub struct HashingEncoder<T> {
    dim: usize,
    scale: T,
    bigram_weight: T,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Scalar> HashingEncoder<T> {
    pub fn new(dim: usize) -> Self {
        HashingEncoder {
            dim,
            scale: T::of((dim as f64).sqrt()),
            bigram_weight: T::of(0.5),
        }
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    fn add_feature(&self, acc: &mut [T], weight: T, parts: &[&[u8]]) {
        let mut state = fnv1a(parts);
        let mut bits = 0u64;
        for (i, slot) in acc.iter_mut().enumerate() {
            if i % 64 == 0 {
                bits = splitmix(&mut state);
            }
            if bits >> (i % 64) & 1 == 1 {
                *slot += weight;
            } else {
                *slot -= weight;
            }
        }
    }

    fn encode_tokens(&self, tokens: &[Token]) -> Encoding<T> {
        let mut acc = vec![T::zero(); self.dim];
        for t in tokens.iter().filter(|t| !t.is_boundary()) {
            self.add_feature(&mut acc, T::one(), &[b"U", t.as_str().as_bytes()]);
        }
        for (a, b) in bigram_pairs(tokens).filter(|(a, b)| !a.is_boundary() && !b.is_boundary()) {
            self.add_feature(
                &mut acc,
                self.bigram_weight,
                &[b"B", a.as_str().as_bytes(), b.as_str().as_bytes()],
            );
        }
        Encoding::normalize(acc)
    }
}

impl<T: Scalar> TextEncoder<T> for HashingEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn scale(&self) -> T {
        self.scale
    }

    fn encode_context_segments(&self, segments: &[&str]) -> Result<Encoding<T>> {
        Ok(self.encode_tokens(&normalize_segments(segments)))
    }

    fn encode_reply_text(&self, text: &str) -> Result<Encoding<T>> {
        Ok(self.encode_tokens(&normalize_segments(&[text])))
    }
}
