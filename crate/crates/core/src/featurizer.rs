//! Text normalization and unigram/bigram feature extraction.
//!
//! Text is lower-cased and split on whitespace; leading and trailing
//! punctuation runs become their own tokens. Tokens carrying five or more
//! digits have every digit replaced by `#`, tokens longer than 16 characters
//! collapse to `LONGWORD`, and every sentence is wrapped in `<s>` / `</s>`.
//!
//! Feature ids share one numbering space per stream: ids `0..=50_000` are
//! out-of-vocabulary hash buckets, in-vocabulary ids start at
//! [`OOV_BUCKETS`].

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const LONGWORD: &str = "LONGWORD";

/// Number of out-of-vocabulary hash buckets (ids `0..=50_000`).
pub const OOV_BUCKETS: u32 = 50_001;

/// Tokens longer than this many Unicode scalar values become `LONGWORD`.
pub const MAX_TOKEN_CHARS: usize = 16;

/// Tokens with at least this many digits get their digits masked.
pub const MASK_DIGIT_THRESHOLD: usize = 5;

pub const VOCAB_HEADER: &str = "#polyfind-vocab v1";

const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Self {
        Token(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_boundary(&self) -> bool {
        self.0 == BOS || self.0 == EOS
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Unigram and bigram feature ids for one piece of text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureSet {
    pub unigrams: Vec<u32>,
    pub bigrams: Vec<u32>,
}

impl FeatureSet {
    pub fn is_empty(&self) -> bool {
        self.unigrams.is_empty() && self.bigrams.is_empty()
    }
}

// '#' is kept inside words so masked tokens survive re-normalization.
fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && c != '#'
}

fn finish_token(raw: &str) -> Token {
    if raw == LONGWORD {
        return Token::new(LONGWORD);
    }
    let lower = raw.to_lowercase();
    let digits = lower.chars().filter(|c| c.is_ascii_digit()).count();
    let masked = if digits >= MASK_DIGIT_THRESHOLD {
        lower
            .chars()
            .map(|c| if c.is_ascii_digit() { '#' } else { c })
            .collect()
    } else {
        lower
    };
    if masked.chars().count() > MAX_TOKEN_CHARS {
        Token::new(LONGWORD)
    } else {
        Token(masked)
    }
}

/// Splits a whitespace-delimited word into (leading punct, core, trailing punct).
fn split_word(word: &str) -> (&str, &str, &str) {
    let start = word
        .char_indices()
        .find(|&(_, c)| !is_punct(c))
        .map(|(i, _)| i);
    let Some(start) = start else {
        return (word, "", "");
    };
    let end = word
        .char_indices()
        .rev()
        .find(|&(_, c)| !is_punct(c))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(word.len());
    (&word[..start], &word[start..end], &word[end..])
}

fn ends_sentence(word: &str) -> bool {
    matches!(word.chars().last(), Some('.' | '!' | '?'))
}

/// Splits `text` into sentences of normalized tokens, without boundary markers.
pub fn sentences(text: &str) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for word in text.split_whitespace() {
        let (lead, core, trail) = split_word(word);
        for part in [lead, core, trail] {
            if !part.is_empty() {
                current.push(finish_token(part));
            }
        }
        if ends_sentence(word) && !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Splits raw text into sentence strings using the same boundary rule as
/// [`sentences`]; words are re-joined with single spaces.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        if ends_sentence(word) {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

/// Normalizes raw text into tokens with `<s>`/`</s>` around each sentence.
pub fn normalize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    for sentence in sentences(text) {
        out.push(Token::new(BOS));
        out.extend(sentence);
        out.push(Token::new(EOS));
    }
    out
}

/// Normalizes several text segments (e.g. dialogue turns) and concatenates
/// them; each segment contributes its own sentence boundaries.
pub fn normalize_segments<S: AsRef<str>>(segments: &[S]) -> Vec<Token> {
    segments
        .iter()
        .flat_map(|s| normalize(s.as_ref()))
        .collect()
}

pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ HASH_SEED;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0x1f;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable OOV bucket for a unigram, in `0..OOV_BUCKETS`.
pub fn unigram_bucket(token: &str) -> u32 {
    (fnv1a(&[b"U", token.as_bytes()]) % OOV_BUCKETS as u64) as u32
}

/// Stable OOV bucket for a bigram, in `0..OOV_BUCKETS`.
pub fn bigram_bucket(left: &str, right: &str) -> u32 {
    (fnv1a(&[b"B", left.as_bytes(), right.as_bytes()]) % OOV_BUCKETS as u64) as u32
}

/// Adjacent token pairs that do not straddle a sentence boundary.
pub fn bigram_pairs(tokens: &[Token]) -> impl Iterator<Item = (&Token, &Token)> {
    tokens
        .windows(2)
        .filter(|w| !(w[0].as_str() == EOS && w[1].as_str() == BOS))
        .map(|w| (&w[0], &w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabEntry {
    pub id: u32,
    pub count: u64,
}

/// Unigram and bigram vocabulary. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    unigrams: HashMap<String, VocabEntry>,
    bigrams: HashMap<(String, String), VocabEntry>,
    unigram_order: Vec<String>,
    bigram_order: Vec<(String, String)>,
    min_count: u64,
    max_bigrams: usize,
}

impl Vocab {
    /// Vocabulary with no entries; every feature hashes to an OOV bucket.
    pub fn empty() -> Self {
        Vocab {
            unigrams: HashMap::new(),
            bigrams: HashMap::new(),
            unigram_order: Vec::new(),
            bigram_order: Vec::new(),
            min_count: 1,
            max_bigrams: 0,
        }
    }

    /// Counts unigrams and bigrams over `corpus`. Unigrams seen at least
    /// `min_count` times are kept, plus the boundary tokens which are always
    /// present; the `max_bigrams` most frequent bigrams are kept. Ties are
    /// broken lexicographically so the result depends only on the corpus.
    pub fn build<I, S>(corpus: I, min_count: u64, max_bigrams: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut uni: HashMap<String, u64> = HashMap::new();
        let mut bi: HashMap<(String, String), u64> = HashMap::new();
        let mut total = 0usize;
        for line in corpus {
            let tokens = normalize(line.as_ref());
            total += tokens.len();
            for t in &tokens {
                *uni.entry(t.as_str().to_owned()).or_default() += 1;
            }
            for (a, b) in bigram_pairs(&tokens) {
                *bi.entry((a.as_str().to_owned(), b.as_str().to_owned()))
                    .or_default() += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }

        let mut kept: Vec<(String, u64)> = uni
            .into_iter()
            .filter(|(t, c)| *c >= min_count || t == BOS || t == EOS)
            .collect();
        kept.sort_by(|(ta, ca), (tb, cb)| {
            let rank = |t: &str| match t {
                BOS => 0,
                EOS => 1,
                _ => 2,
            };
            rank(ta)
                .cmp(&rank(tb))
                .then(cb.cmp(ca))
                .then_with(|| ta.cmp(tb))
        });

        let mut bigrams: Vec<((String, String), u64)> = bi.into_iter().collect();
        bigrams.sort_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| pa.cmp(pb)));
        bigrams.truncate(max_bigrams);

        let mut vocab = Vocab::empty();
        vocab.min_count = min_count;
        vocab.max_bigrams = max_bigrams;
        for (token, count) in kept {
            vocab.push_unigram(token, count);
        }
        for (pair, count) in bigrams {
            vocab.push_bigram(pair, count);
        }
        Ok(vocab)
    }

    fn push_unigram(&mut self, token: String, count: u64) {
        let id = OOV_BUCKETS + self.unigram_order.len() as u32;
        self.unigrams.insert(token.clone(), VocabEntry { id, count });
        self.unigram_order.push(token);
    }

    fn push_bigram(&mut self, pair: (String, String), count: u64) {
        let id = OOV_BUCKETS + self.bigram_order.len() as u32;
        self.bigrams.insert(pair.clone(), VocabEntry { id, count });
        self.bigram_order.push(pair);
    }

    pub fn unigram(&self, token: &str) -> Option<VocabEntry> {
        self.unigrams.get(token).copied()
    }

    pub fn bigram(&self, left: &str, right: &str) -> Option<VocabEntry> {
        // HashMap<(String,String)> cannot be queried by borrowed pairs.
        self.bigrams
            .get(&(left.to_owned(), right.to_owned()))
            .copied()
    }

    pub fn unigram_tokens(&self) -> &[String] {
        &self.unigram_order
    }

    pub fn bigram_pairs(&self) -> &[(String, String)] {
        &self.bigram_order
    }

    pub fn n_unigrams(&self) -> usize {
        self.unigram_order.len()
    }

    pub fn n_bigrams(&self) -> usize {
        self.bigram_order.len()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn max_bigrams(&self) -> usize {
        self.max_bigrams
    }

    /// Rows needed in the unigram embedding table (buckets + vocabulary).
    pub fn unigram_rows(&self) -> usize {
        OOV_BUCKETS as usize + self.n_unigrams()
    }

    pub fn bigram_rows(&self) -> usize {
        OOV_BUCKETS as usize + self.n_bigrams()
    }

    pub fn unigram_id(&self, token: &str) -> u32 {
        self.unigram(token)
            .map(|e| e.id)
            .unwrap_or_else(|| unigram_bucket(token))
    }

    pub fn bigram_id(&self, left: &str, right: &str) -> u32 {
        self.bigram(left, right)
            .map(|e| e.id)
            .unwrap_or_else(|| bigram_bucket(left, right))
    }

    /// Maps normalized tokens to feature ids.
    pub fn extract(&self, tokens: &[Token]) -> FeatureSet {
        FeatureSet {
            unigrams: tokens.iter().map(|t| self.unigram_id(t.as_str())).collect(),
            bigrams: bigram_pairs(tokens)
                .map(|(a, b)| self.bigram_id(a.as_str(), b.as_str()))
                .collect(),
        }
    }

    pub fn featurize(&self, text: &str) -> FeatureSet {
        self.extract(&normalize(text))
    }

    pub fn featurize_segments<S: AsRef<str>>(&self, segments: &[S]) -> FeatureSet {
        self.extract(&normalize_segments(segments))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for token in &self.unigram_order {
            let e = self.unigrams[token];
            writeln!(w, "U\t{token}\t{}\t{}", e.id, e.count)?;
        }
        for pair in &self.bigram_order {
            let e = self.bigrams[pair];
            writeln!(w, "B\t{} {}\t{}\t{}", pair.0, pair.1, e.id, e.count)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("vocab is valid UTF-8")
    }

    /// CRC32 of the serialized vocabulary; stored in model files.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(self.to_text().as_bytes())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Vocab> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim_end() == VOCAB_HEADER => {}
            Some(Ok(h)) => return Err(Error::parse(1, format!("bad header {h:?}"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::parse(1, "missing header")),
        }
        let mut vocab = Vocab::empty();
        let mut min_count = u64::MAX;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(lineno, "expected 4 tab-separated fields"));
            }
            let id: u32 = fields[2]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad id"))?;
            let count: u64 = fields[3]
                .parse()
                .map_err(|_| Error::parse(lineno, "bad count"))?;
            match fields[0] {
                "U" => {
                    let expected = OOV_BUCKETS + vocab.unigram_order.len() as u32;
                    if id != expected {
                        return Err(Error::parse(lineno, format!("id {id}, expected {expected}")));
                    }
                    if fields[1] != BOS && fields[1] != EOS {
                        min_count = min_count.min(count);
                    }
                    vocab.push_unigram(fields[1].to_owned(), count);
                }
                "B" => {
                    let expected = OOV_BUCKETS + vocab.bigram_order.len() as u32;
                    if id != expected {
                        return Err(Error::parse(lineno, format!("id {id}, expected {expected}")));
                    }
                    let (a, b) = fields[1]
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(lineno, "bigram needs two tokens"))?;
                    vocab.push_bigram((a.to_owned(), b.to_owned()), count);
                }
                other => return Err(Error::parse(lineno, format!("unknown kind {other:?}"))),
            }
        }
        vocab.min_count = if min_count == u64::MAX { 1 } else { min_count };
        vocab.max_bigrams = vocab.bigram_order.len();
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Vocab> {
        let f = std::fs::File::open(path)?;
        Vocab::read_from(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
