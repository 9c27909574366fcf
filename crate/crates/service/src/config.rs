//! Service configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use polyfind_core::dialogue::FlowParams;
use serde::Deserialize;

/// Environment variable that overrides the configuration path.
pub const CONFIG_ENV: &str = "POLYFIND_CONFIG";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Idle time after which a session expires.
    #[serde(default = "default_ttl")]
    pub session_ttl_secs: u64,
    /// JSONL file sessions are saved to and restored from.
    pub snapshot_path: Option<PathBuf>,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval_secs: u64,
    #[serde(default)]
    pub flow: FlowParams,
    /// Search through the graph index instead of exhaustively.
    #[serde(default)]
    pub approximate: bool,
    pub encoder: EncoderPaths,
    /// Intent classifier file; without one, intents are never detected.
    pub intents: Option<PathBuf>,
    #[serde(default)]
    pub translation: TranslationConfig,
    pub cities: Vec<CityConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderPaths {
    pub vocab: PathBuf,
    pub model: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationConfig {
    /// `identity`, `dictionary:<path>` or `external:<url>`.
    #[serde(default = "default_provider")]
    pub provider: String,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            provider: default_provider(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityConfig {
    pub name: String,
    #[serde(default = "default_language")]
    pub language: String,
    pub index: PathBuf,
    /// Directory of photo files named `<photo_id>.<ext>`.
    pub photos_dir: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_ttl() -> u64 {
    30 * 60
}

fn default_snapshot_interval() -> u64 {
    30
}

fn default_provider() -> String {
    "identity".into()
}

fn default_language() -> String {
    "en".into()
}

impl ServiceConfig {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut cfg: ServiceConfig = toml::from_str(text)?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Reads `path`, or the file named by `POLYFIND_CONFIG` when set.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let path = match std::env::var_os(CONFIG_ENV) {
            Some(p) => PathBuf::from(p),
            None => path.context("no configuration file given and POLYFIND_CONFIG is unset")?.to_path_buf(),
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("parsing {}", path.display()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.encoder.vocab);
        fix(&mut self.encoder.model);
        if let Some(p) = self.intents.as_mut() {
            fix(p);
        }
        if let Some(p) = self.snapshot_path.as_mut() {
            fix(p);
        }
        for c in &mut self.cities {
            fix(&mut c.index);
            if let Some(p) = c.photos_dir.as_mut() {
                fix(p);
            }
        }
        if let Some(rest) = self.translation.provider.strip_prefix("dictionary:") {
            let mut p = PathBuf::from(rest);
            fix(&mut p);
            self.translation.provider = format!("dictionary:{}", p.display());
        }
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.flow.validate()?;
        if self.cities.is_empty() {
            bail!("no cities configured");
        }
        let mut files: Vec<&Path> = vec![&self.encoder.vocab, &self.encoder.model];
        files.extend(self.intents.as_deref());
        files.extend(self.cities.iter().map(|c| c.index.as_path()));
        for f in files {
            if !f.is_file() {
                bail!("{} does not exist", f.display());
            }
        }
        for c in &self.cities {
            if let Some(d) = &c.photos_dir {
                if !d.is_dir() {
                    bail!("photo directory {} does not exist", d.display());
                }
            }
        }
        let mut names: Vec<&str> = self.cities.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("city {} is configured twice", w[0]);
        }
        Ok(())
    }

    pub fn session_ttl(&self) -> Duration {
        Duration::from_secs(self.session_ttl_secs)
    }

    pub fn snapshot_interval(&self) -> Duration {
        Duration::from_secs(self.snapshot_interval_secs.max(1))
    }
}
