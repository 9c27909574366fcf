//! Translation providers configured by name.

use std::sync::{Arc, OnceLock};
use std::time::Duration;

use polyfind_core::multilingual::{CachingProvider, DictionaryProvider, IdentityProvider, ProviderSpec, TranslationProvider};
use polyfind_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Calls a translation service over HTTP: `POST <url>` with
/// `{"text", "source", "target"}`, answered by `{"text"}`.
pub struct ExternalProvider {
    url: String,
    timeout: Duration,
    client: OnceLock<reqwest::blocking::Client>,
}

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
    source: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

impl ExternalProvider {
    pub fn new(url: impl Into<String>) -> Self {
        ExternalProvider {
            url: url.into(),
            timeout: Duration::from_secs(10),
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&reqwest::blocking::Client> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let c = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| provider_error(format!("building HTTP client: {e}")))?;
        Ok(self.client.get_or_init(|| c))
    }
}

fn provider_error(message: String) -> Error {
    Error::Provider {
        candidate: None,
        message,
    }
}

impl TranslationProvider for ExternalProvider {
    fn id(&self) -> String {
        format!("external:{}", self.url)
    }

    /// Blocking; call from a thread that may block.
    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String> {
        if source == target {
            return Ok(text.to_string());
        }
        let resp = self
            .client()?
            .post(&self.url)
            .json(&Request { text, source, target })
            .send()
            .map_err(|e| provider_error(format!("{}: {e}", self.url)))?;
        if !resp.status().is_success() {
            return Err(provider_error(format!("{} answered {}", self.url, resp.status())));
        }
        resp.json::<Response>()
            .map(|r| r.text)
            .map_err(|e| provider_error(format!("{}: malformed reply: {e}", self.url)))
    }
}

/// Builds the provider named by a `translation.provider` value, with a
/// cache in front of anything but the identity.
pub fn build_provider(spec: &str) -> Result<Arc<dyn TranslationProvider>> {
    Ok(match spec.parse::<ProviderSpec>()? {
        ProviderSpec::Identity => Arc::new(IdentityProvider),
        ProviderSpec::Dictionary(path) => Arc::new(CachingProvider::new(DictionaryProvider::load(path)?)),
        ProviderSpec::External(url) => Arc::new(CachingProvider::new(ExternalProvider::new(url))),
    })
}
