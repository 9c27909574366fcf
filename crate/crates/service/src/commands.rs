//! The `polyfind` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use polyfind_core::dialogue::{Deployment, TurnResult};
use polyfind_core::encoder::{recall_at_k, train_with_history, DualEncoder, EncoderConfig, EncoderModel};
use polyfind_core::featurizer::Vocab;
use polyfind_core::index::{load_catalog, Kind, ResponseIndex, ResponsePool};
use polyfind_core::intent::{load_phrases, train_intent, IntentConfig, IntentKind, IntentSet};
use polyfind_core::multilingual::pretranslate_pool;
use polyfind_core::photo::{load_photo_features, train_photo_head, PhotoConfig, PhotoFeatures, PhotoHead};
use polyfind_core::synth::{cuisines, dishes, synthetic_city, CityShape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;

use crate::app::{load_deployment, serve, AppState};
use crate::config::ServiceConfig;
use crate::provider::build_provider;

#[derive(Debug, Parser)]
#[command(name = "polyfind", version, about = "Conversational restaurant search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count unigrams and bigrams of a pair corpus into a vocabulary file.
    BuildVocab(BuildVocab),
    /// Train the dual encoder on a pair corpus.
    Train(Train),
    /// Train the photo head against a frozen encoder.
    TrainPhotos(TrainPhotos),
    /// Train the reset and booking intent classifiers.
    TrainIntents(TrainIntents),
    /// Encode a catalog into a response index.
    BuildIndex(BuildIndex),
    /// Write a synthetic catalog, photo features and pair corpus.
    DemoData(DemoData),
    /// Report retrieval recall of an encoder on held-out pairs.
    Eval(Eval),
    /// Talk to one city on the terminal.
    Chat(Chat),
    /// Run the HTTP service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

impl EncoderArgs {
    fn load(&self) -> anyhow::Result<DualEncoder<f32>> {
        let vocab = Vocab::load(&self.vocab).with_context(|| format!("loading {}", self.vocab.display()))?;
        let model = EncoderModel::<f32>::load(&self.model).with_context(|| format!("loading {}", self.model.display()))?;
        Ok(DualEncoder::new(vocab, model)?)
    }
}

#[derive(Debug, Args)]
pub struct BuildVocab {
    /// Tab separated `context<TAB>reply` lines.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    #[arg(long, default_value_t = 20_000)]
    pub max_bigrams: usize,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with encoder settings; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainPhotos {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// JSON lines of photo features; photos without a caption are skipped.
    #[arg(long)]
    pub photos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainIntents {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    /// Directory with `<lang>/reset.txt`, `<lang>/booking.txt` and
    /// `<lang>/negatives.txt`.
    #[arg(long)]
    pub fixtures: PathBuf,
    #[arg(long, default_value = "en")]
    pub language: String,
    /// Catalog whose responses are added as negatives.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Pair corpus whose contexts are added as negatives.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildIndex {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub photos: Option<PathBuf>,
    /// Photo head; required with `--photos`.
    #[arg(long)]
    pub photo_head: Option<PathBuf>,
    /// Language of the catalog text. Anything but `en` is translated with
    /// `--translation` before encoding.
    #[arg(long, default_value = "en")]
    pub language: String,
    #[arg(long, default_value = "identity")]
    pub translation: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub entities: usize,
    #[arg(long, default_value = "edinburgh")]
    pub city: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub pool_size: usize,
}

#[derive(Debug, Args)]
pub struct Chat {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub city: String,
    /// Defaults to the city's configured language.
    #[arg(long)]
    pub language: Option<String>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `listen` from the configuration.
    #[arg(long)]
    pub listen: Option<String>,
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

/// Reads `context<TAB>reply` lines, skipping blank lines and `#` comments.
pub fn read_pairs(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            Some((c, r)) if !c.trim().is_empty() && !r.trim().is_empty() => out.push((c.to_string(), r.to_string())),
            _ => bail!("{}:{}: expected context<TAB>reply", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn build_vocab(a: &BuildVocab) -> anyhow::Result<String> {
    let pairs = read_pairs(&a.corpus)?;
    let vocab = Vocab::build(pairs.iter().flat_map(|(c, r)| [c, r]), a.min_count, a.max_bigrams)?;
    vocab.save(&a.out)?;
    Ok(format!(
        "vocabulary: {} unigram rows, {} bigram rows -> {}",
        vocab.unigram_rows(),
        vocab.bigram_rows(),
        a.out.display()
    ))
}

fn train(a: &Train) -> anyhow::Result<String> {
    let mut config: EncoderConfig = read_toml(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let pairs = read_pairs(&a.corpus)?;
    let vocab = Vocab::load(&a.vocab).with_context(|| format!("loading {}", a.vocab.display()))?;
    let (model, history) = train_with_history::<f32, _>(&pairs, &config, &vocab)?;
    model.save(&a.out)?;
    let last = history.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained on {} pairs for {} epochs, final loss {last:.4}, C {:.3} -> {}",
        pairs.len(),
        history.len(),
        model.scale(),
        a.out.display()
    ))
}

fn captioned(photos: Vec<PhotoFeatures>) -> Vec<(PhotoFeatures, String)> {
    photos
        .into_iter()
        .filter_map(|p| {
            let c = p.caption.clone().filter(|c| !c.trim().is_empty())?;
            Some((p, c))
        })
        .collect()
}

fn train_photos(a: &TrainPhotos) -> anyhow::Result<String> {
    let encoder = a.encoder.load()?;
    let mut config: PhotoConfig = read_toml(a.config.as_deref())?;
    let pairs = captioned(load_photo_features(&a.photos).with_context(|| format!("loading {}", a.photos.display()))?);
    if let Some((p, _)) = pairs.first() {
        config.feature_dim = p.features.len();
    }
    let head = train_photo_head::<f32>(&pairs, &encoder, &config)?;
    head.save(&a.out)?;
    Ok(format!("photo head trained on {} captioned photos -> {}", pairs.len(), a.out.display()))
}

/// Up to `limit` distinct texts, sampled with a fixed seed.
fn sample_distinct(mut texts: Vec<String>, limit: usize) -> Vec<String> {
    texts.sort();
    texts.dedup();
    let mut rng = seeded_rng(0);
    texts.shuffle(&mut rng);
    texts.truncate(limit);
    texts
}

/// Texts of a catalog's responses, for use as intent negatives.
fn catalog_texts(path: &Path, limit: usize) -> anyhow::Result<Vec<String>> {
    let entities = load_catalog(path).with_context(|| format!("loading {}", path.display()))?;
    let pool = ResponsePool::from_catalog(&entities, &[])?;
    let texts = pool.entries.into_iter().filter(|e| e.kind != Kind::Photo).map(|e| e.text).collect();
    Ok(sample_distinct(texts, limit))
}

fn seeded_rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}

fn train_intents(a: &TrainIntents) -> anyhow::Result<String> {
    let encoder = a.encoder.load()?;
    let config: IntentConfig = read_toml(a.config.as_deref())?;
    let dir = a.fixtures.join(&a.language);
    let load = |name: &str| {
        let p = dir.join(format!("{name}.txt"));
        load_phrases(&p).with_context(|| format!("loading {}", p.display()))
    };
    let (reset, booking, mut negatives) = (load("reset")?, load("booking")?, load("negatives")?);
    if let Some(c) = &a.catalog {
        negatives.extend(catalog_texts(c, 200)?);
    }
    if let Some(c) = &a.corpus {
        let contexts = read_pairs(c)?.into_iter().map(|(c, _)| c).collect();
        negatives.extend(sample_distinct(contexts, 200));
    }
    let train = |kind, pos: &[String], other: &[String]| {
        let pos: Vec<&str> = pos.iter().map(String::as_str).collect();
        let neg: Vec<&str> = negatives.iter().chain(other).map(String::as_str).collect();
        train_intent::<f32>(kind, &pos, &neg, &encoder, &config)
    };
    let set = IntentSet {
        reset: train(IntentKind::Reset, &reset, &booking)?,
        booking: train(IntentKind::Booking, &booking, &reset)?,
    };
    set.save(&a.out)?;
    Ok(format!(
        "intents trained on {} reset, {} booking and {} other phrases -> {}",
        reset.len(),
        booking.len(),
        negatives.len(),
        a.out.display()
    ))
}

fn build_index(a: &BuildIndex) -> anyhow::Result<String> {
    let encoder = a.encoder.load()?;
    let entities = load_catalog(&a.catalog).with_context(|| format!("loading {}", a.catalog.display()))?;
    let photos = match &a.photos {
        Some(p) => load_photo_features(p).with_context(|| format!("loading {}", p.display()))?,
        None => Vec::new(),
    };
    let head = match &a.photo_head {
        Some(p) => Some(PhotoHead::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut pool = ResponsePool::from_catalog(&entities, &photos)?;
    if a.language != "en" {
        let provider = build_provider(&a.translation)?;
        pool = pretranslate_pool(&pool, provider.as_ref(), &a.language)?;
    }
    let index = ResponseIndex::build(&pool, &encoder, head.as_ref())?;
    index.save(&a.out)?;
    let s = index.stats();
    Ok(format!(
        "index: {} entities, {} photos, {} facts, {} review sentences, {} menu items -> {}",
        s.n_entities,
        s.n_photos,
        s.n_fact_sentences,
        s.n_review_sentences,
        s.n_menu_items,
        a.out.display()
    ))
}

const QUERY_TEMPLATES: &[&str] = &[
    "I'd like some {}",
    "looking for {}",
    "where can I get {}",
    "any good {} around here",
    "I fancy {} tonight",
    "somewhere that does {}",
];

/// Query and reply pairs built from catalog text: each response mentioning
/// a dish or cuisine is paired with a request for it.
pub fn demo_pairs(pool: &ResponsePool, seed: u64) -> Vec<(String, String)> {
    let mut words: Vec<&str> = dishes().chain(cuisines().iter().copied()).collect();
    words.sort_by_key(|w| std::cmp::Reverse(w.len()));
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();
    for e in pool.entries.iter().filter(|e| e.kind != Kind::Photo) {
        let lower = e.text.to_lowercase();
        if let Some(w) = words.iter().find(|w| lower.contains(**w)) {
            let t = QUERY_TEMPLATES.choose(&mut rng).expect("templates");
            out.push((t.replace("{}", w), e.text.clone()));
        }
    }
    out.shuffle(&mut rng);
    out
}

fn demo_data(a: &DemoData) -> anyhow::Result<String> {
    let city = synthetic_city(&CityShape::small(a.entities), &a.city, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let catalog = a.out.join("catalog.json");
    std::fs::write(&catalog, serde_json::to_string_pretty(&city.entities)?)?;
    let mut photos = std::io::BufWriter::new(std::fs::File::create(a.out.join("photos.jsonl"))?);
    for p in &city.photos {
        serde_json::to_writer(&mut photos, p)?;
        photos.write_all(b"\n")?;
    }
    photos.flush()?;
    let pool = ResponsePool::from_catalog(&city.entities, &city.photos)?;
    let pairs = demo_pairs(&pool, a.seed);
    let mut corpus = std::io::BufWriter::new(std::fs::File::create(a.out.join("pairs.tsv"))?);
    for (c, r) in &pairs {
        writeln!(corpus, "{c}\t{r}")?;
    }
    corpus.flush()?;
    Ok(format!(
        "{} restaurants, {} photos, {} pairs -> {}",
        city.entities.len(),
        city.photos.len(),
        pairs.len(),
        a.out.display()
    ))
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub pool_size: usize,
    pub recall_at_1: f64,
    pub recall_at_10: Option<f64>,
    pub recall_at_100: Option<f64>,
}

fn eval(a: &Eval) -> anyhow::Result<String> {
    let encoder = a.encoder.load()?;
    let pairs = read_pairs(&a.pairs)?;
    let at = |k: usize| -> anyhow::Result<Option<f64>> {
        if k > a.pool_size {
            return Ok(None);
        }
        Ok(Some(recall_at_k::<f32, _>(&encoder, &pairs, a.pool_size, k)?))
    };
    let report = EvalReport {
        pairs: pairs.len(),
        pool_size: a.pool_size,
        recall_at_1: at(1)?.unwrap_or(0.0),
        recall_at_10: at(10)?,
        recall_at_100: at(100)?,
    };
    Ok(serde_json::to_string(&report)?)
}

/// Writes one turn for a terminal reader.
pub fn write_turn<W: Write>(out: &mut W, r: &TurnResult) -> std::io::Result<()> {
    writeln!(out, "{}", r.spoken)?;
    for d in &r.displayed {
        writeln!(out, "  [{}] {}: {}", d.kind.as_str(), d.entity_name, d.text)?;
    }
    for p in &r.photos {
        writeln!(out, "  [photo] {} {}", p.photo_id, p.caption.as_deref().unwrap_or(""))?;
    }
    writeln!(out, "  ({} restaurants left)", r.remaining.len())
}

/// Line-based conversation with one city until end of input or `:quit`.
pub fn chat_loop<R: BufRead, W: Write>(
    deployment: &Deployment<f32>,
    city: &str,
    language: &str,
    input: R,
    mut out: W,
) -> anyhow::Result<usize> {
    let mut state = deployment.new_session(city, "terminal", language)?;
    writeln!(out, "{} restaurants in {city}. Type :quit to leave.", state.relevant.len())?;
    let mut turns = 0;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == ":quit" {
            break;
        }
        match deployment.step(&mut state, text) {
            Ok(r) => {
                write_turn(&mut out, &r)?;
                turns += 1;
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
        out.flush()?;
    }
    Ok(turns)
}

fn chat(a: &Chat) -> anyhow::Result<String> {
    let config = ServiceConfig::load(a.config.as_deref())?;
    let (deployment, cities) = load_deployment(&config)?;
    let info = cities.get(&a.city).with_context(|| format!("unknown city {}", a.city))?;
    let language = a.language.clone().unwrap_or_else(|| info.language.clone());
    let stdin = std::io::stdin();
    let turns = chat_loop(&deployment, &a.city, &language, stdin.lock(), std::io::stdout())?;
    Ok(format!("{turns} turns"))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
    tracing::info!("shutting down");
}

#[cfg(unix)]
fn reload_on_hangup(app: Arc<AppState>) -> anyhow::Result<()> {
    let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            let app = Arc::clone(&app);
            let names: Vec<String> = app.cities.keys().cloned().collect();
            let _ = tokio::task::spawn_blocking(move || {
                for city in names {
                    match app.reload_index(&city) {
                        Ok(()) => tracing::info!(city, "index reloaded"),
                        Err(e) => tracing::warn!(city, "index reload failed: {e:#}"),
                    }
                }
            })
            .await;
        }
    });
    Ok(())
}

async fn serve_command(a: &Serve) -> anyhow::Result<String> {
    let config = ServiceConfig::load(a.config.as_deref())?;
    let app = Arc::new(AppState::from_config(&config)?);
    let addr = a.listen.clone().unwrap_or_else(|| config.listen.clone());
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(addr = %listener.local_addr()?, cities = app.cities.len(), "listening");
    #[cfg(unix)]
    reload_on_hangup(Arc::clone(&app))?;
    serve(app, listener, config.snapshot_interval(), shutdown_signal()).await?;
    Ok("stopped".into())
}

/// Runs a command and returns its one-line summary.
pub fn run(cli: &Cli) -> anyhow::Result<String> {
    match &cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::TrainPhotos(a) => train_photos(a),
        Command::TrainIntents(a) => train_intents(a),
        Command::BuildIndex(a) => build_index(a),
        Command::DemoData(a) => demo_data(a),
        Command::Eval(a) => eval(a),
        Command::Chat(a) => chat(a),
        Command::Serve(a) => tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()?
            .block_on(serve_command(a)),
    }
}
