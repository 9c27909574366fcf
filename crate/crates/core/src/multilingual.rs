//! Translate-to-source: response pools are translated to English before
//! encoding, and user contexts are translated on the fly, behind a pluggable
//! provider.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::RwLock;
use rayon::prelude::*;

use crate::encoder::TextEncoder;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::index::ResponsePool;
use crate::scalar::Scalar;

/// Language the encoder was trained on.
pub const PIVOT: &str = "en";

/// Language codes of the shipped deployments.
pub const LANGUAGES: [&str; 8] = ["en", "de", "es", "zh", "pl", "ru", "ko", "sr"];

pub trait TranslationProvider: Send + Sync {
    fn id(&self) -> String;

    /// Must be deterministic for a given `(text, source, target)`.
    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProvider;

impl TranslationProvider for IdentityProvider {
    fn id(&self) -> String {
        "identity".into()
    }

    fn translate(&self, text: &str, _source: &str, _target: &str) -> Result<String> {
        Ok(text.to_string())
    }
}

/// Static phrase table. Translation first tries the whole text, then
/// replaces the longest known phrases word by word, keeping punctuation at
/// word edges and leaving unknown words as they are.
#[derive(Debug, Clone, Default)]
pub struct DictionaryProvider {
    entries: HashMap<String, String>,
    longest: usize,
    name: String,
}

fn edges(word: &str) -> (&str, &str, &str) {
    let start = word.find(|c: char| c.is_alphanumeric()).unwrap_or(word.len());
    let end = word
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map_or(start, |(i, c)| i + c.len_utf8());
    (&word[..start], &word[start..end], &word[end..])
}

impl DictionaryProvider {
    pub fn new(name: impl Into<String>) -> Self {
        DictionaryProvider {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn insert(&mut self, source: &str, english: &str) {
        let key = source.trim().to_lowercase();
        self.longest = self.longest.max(key.split_whitespace().count());
        self.entries.insert(key, english.trim().to_string());
    }

    /// TSV `source<TAB>english`; blank lines and `#` comments are skipped.
    pub fn read_tsv<R: BufRead>(r: R, name: impl Into<String>) -> Result<Self> {
        let mut d = DictionaryProvider::new(name);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((src, en)) = line.split_once('\t') else {
                return Err(Error::parse(i + 1, "expected source<TAB>english"));
            };
            if src.trim().is_empty() {
                return Err(Error::parse(i + 1, "empty source phrase"));
            }
            d.insert(src, en);
        }
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        Self::read_tsv(std::io::BufReader::new(f), format!("dictionary:{}", path.display()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup_words(&self, text: &str) -> String {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out: Vec<String> = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < words.len() {
            let mut matched = false;
            for len in (1..=self.longest.min(words.len() - i)).rev() {
                let span = &words[i..i + len];
                let (lead, _, _) = edges(span[0]);
                let (_, _, trail) = edges(span[len - 1]);
                let joined = span.join(" ");
                let core = joined[lead.len()..joined.len() - trail.len()].to_lowercase();
                if let Some(en) = self.entries.get(&core) {
                    out.push(format!("{lead}{en}{trail}"));
                    i += len;
                    matched = true;
                    break;
                }
            }
            if !matched {
                out.push(words[i].to_string());
                i += 1;
            }
        }
        out.join(" ")
    }
}

impl TranslationProvider for DictionaryProvider {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String> {
        if source == target {
            return Ok(text.to_string());
        }
        if let Some(en) = self.entries.get(&text.trim().to_lowercase()) {
            return Ok(en.clone());
        }
        Ok(self.lookup_words(text))
    }
}

/// Memoizes another provider; safe for concurrent use.
pub struct CachingProvider<P> {
    inner: P,
    cache: RwLock<HashMap<(String, String, String), String>>,
}

impl<P: TranslationProvider> CachingProvider<P> {
    pub fn new(inner: P) -> Self {
        CachingProvider {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.read().len()
    }
}

impl<P: TranslationProvider> TranslationProvider for CachingProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String> {
        let key = (text.to_string(), source.to_string(), target.to_string());
        if let Some(hit) = self.cache.read().get(&key) {
            return Ok(hit.clone());
        }
        let fresh = self.inner.translate(text, source, target)?;
        self.cache.write().entry(key).or_insert_with(|| fresh.clone());
        Ok(fresh)
    }
}

impl TranslationProvider for Box<dyn TranslationProvider> {
    fn id(&self) -> String {
        self.as_ref().id()
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String> {
        self.as_ref().translate(text, source, target)
    }
}

/// Value of the `translation.provider` configuration key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Identity,
    Dictionary(PathBuf),
    External(String),
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            Ok(ProviderSpec::Identity)
        } else if let Some(p) = s.strip_prefix("dictionary:") {
            Ok(ProviderSpec::Dictionary(PathBuf::from(p)))
        } else if let Some(u) = s.strip_prefix("external:") {
            Ok(ProviderSpec::External(u.to_string()))
        } else {
            Err(Error::InvalidArgument(format!(
                "translation provider {s:?}: expected identity, dictionary:<path> or external:<url>"
            )))
        }
    }
}

fn provider_error(candidate: Option<String>, e: Error) -> Error {
    match e {
        Error::Provider { message, .. } => Error::Provider { candidate, message },
        other => Error::Provider {
            candidate,
            message: other.to_string(),
        },
    }
}

/// Copy of `pool` in language `lang` where every entry with text carries its
/// English translation. Fails as a whole if any translation fails.
pub fn pretranslate_pool(pool: &ResponsePool, provider: &dyn TranslationProvider, lang: &str) -> Result<ResponsePool> {
    let translated: Vec<Option<String>> = pool
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            if e.text.is_empty() {
                return Ok(None);
            }
            provider
                .translate(&e.text, lang, PIVOT)
                .map(Some)
                .map_err(|err| provider_error(Some(i.to_string()), err))
        })
        .collect::<Result<_>>()?;
    let mut out = pool.clone();
    out.language = lang.to_string();
    for (entry, en) in out.entries.iter_mut().zip(translated) {
        entry.english = en;
    }
    Ok(out)
}

/// Translates each context segment to English and encodes the result.
/// Returns the encoding and the English segments.
pub fn encode_foreign_context<T: Scalar>(
    segments: &[&str],
    provider: &dyn TranslationProvider,
    lang: &str,
    encoder: &dyn TextEncoder<T>,
) -> Result<(Encoding<T>, Vec<String>)> {
    let english = segments
        .iter()
        .map(|s| provider.translate(s, lang, PIVOT).map_err(|e| provider_error(None, e)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = english.iter().map(String::as_str).collect();
    Ok((encoder.encode_context_segments(&refs)?, english))
}
