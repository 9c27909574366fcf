//! Multi-turn entity narrowing.
//!
//! Each search turn ranks the text responses of the still-relevant entities
//! against the encoded context, turns the top-N cosine scores into a softmax
//! distribution, sums it per entity, and keeps the smallest set of entities
//! whose mass exceeds a threshold. The relevant set only ever shrinks until
//! a reset.

pub mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::booking::{booking_step, BookingSlots, BookingTurn};
use crate::encoder::TextEncoder;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::index::{Candidate, EntityInfo, Filter, Hit, Kind, KindSet, ResponseIndex};
use crate::intent::{IntentDecision, IntentKind, IntentSet};
use crate::multilingual::{encode_foreign_context, TranslationProvider, PIVOT};
use crate::scalar::Scalar;

use templates::{fill, templates};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Responses retrieved per turn.
    pub n: usize,
    /// Softmax sharpness.
    pub a: f64,
    /// Cumulative mass an entity set must exceed.
    pub t: f64,
    /// Entities (and photos) displayed at most.
    pub m: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            n: 20,
            a: 5.0,
            t: 0.8,
            m: 5,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidArgument("N and M must be at least 1".into()));
        }
        if self.a.is_nan() || self.a <= 0.0 {
            return Err(Error::InvalidArgument(format!("a = {} must be positive", self.a)));
        }
        if self.t.is_nan() || self.t <= 0.0 || self.t >= 1.0 {
            return Err(Error::InvalidArgument(format!("t = {} must lie in (0, 1)", self.t)));
        }
        Ok(())
    }
}

/// `p_i = exp(a s_i) / Σ_j exp(a s_j)`, with the maximum subtracted first.
pub fn compute_probs(scores: &[f64], a: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (a * (s - max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `q_e = Σ p_i` over the hits belonging to entity `e`.
pub fn entity_scores<K: Ord + Clone>(hits: &[(K, f64)]) -> BTreeMap<K, f64> {
    let mut q = BTreeMap::new();
    for (e, p) in hits {
        *q.entry(e.clone()).or_insert(0.0) += p;
    }
    q
}

/// Smallest prefix of entities, by descending `q` (ties by ascending key),
/// whose cumulative mass exceeds `t`. If the total never exceeds `t`, every
/// entity with positive mass is kept (all of them if none is positive).
/// Entities outside `previous` are ignored.
pub fn shrink<K: Ord + Clone>(q: &[(K, f64)], t: f64, previous: &BTreeSet<K>) -> Result<BTreeSet<K>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} must lie in (0, 1)")));
    }
    let merged: Vec<(K, f64)> = q
        .iter()
        .filter(|(k, _)| previous.contains(k))
        .cloned()
        .collect();
    let mut ranked: Vec<(K, f64)> = entity_scores(&merged).into_iter().collect();
    if ranked.is_empty() {
        return Err(Error::EmptyQ);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut kept = BTreeSet::new();
    let mut cumulative = 0.0;
    for (k, v) in &ranked {
        kept.insert(k.clone());
        cumulative += v;
        if cumulative > t {
            return Ok(kept);
        }
    }
    let positive: BTreeSet<K> = ranked.iter().filter(|(_, v)| *v > 0.0).map(|(k, _)| k.clone()).collect();
    Ok(if positive.is_empty() { kept } else { positive })
}

/// Spoken line for a displayed response.
pub fn render_spoken(entity: &EntityInfo, candidate: &Candidate, language: &str) -> String {
    let t = templates(language);
    let values = [("name", entity.name.as_str()), ("text", candidate.text.as_str())];
    match candidate.kind {
        Kind::Fact => candidate.text.clone(),
        Kind::Review => fill(t.review, &values),
        Kind::Menu => fill(t.menu, &values),
        Kind::Photo => fill(t.photo, &values),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Search,
    Booking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub session_id: String,
    pub city: String,
    pub language: String,
    /// The relevant entity set R.
    pub relevant: BTreeSet<String>,
    pub history: Vec<Utterance>,
    pub mode: Mode,
    pub booking: BookingSlots,
}

impl DialogueState {
    fn last(&self, speaker: Speaker) -> Option<&str> {
        self.history
            .iter()
            .rev()
            .find(|u| u.speaker == speaker)
            .map(|u| u.text.as_str())
    }

    fn push(&mut self, user: &str, system: &str) {
        self.history.push(Utterance {
            speaker: Speaker::User,
            text: user.to_string(),
        });
        self.history.push(Utterance {
            speaker: Speaker::System,
            text: system.to_string(),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayedResponse {
    pub entity_id: String,
    pub entity_name: String,
    pub candidate_id: u32,
    pub kind: Kind,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayedPhoto {
    pub entity_id: String,
    pub candidate_id: u32,
    pub photo_id: String,
    pub caption: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub displayed: Vec<DisplayedResponse>,
    pub photos: Vec<DisplayedPhoto>,
    pub spoken: String,
    /// R after the turn, ascending entity id.
    pub remaining: Vec<String>,
    pub mode: Mode,
    /// Intent acted on this turn.
    pub intent: Option<IntentKind>,
    pub intent_scores: Option<IntentDecision>,
    pub booking: Option<BookingTurn>,
    /// English pivot of the context segments, for translated sessions.
    pub english_context: Option<Vec<String>>,
}

impl TurnResult {
    fn bare(state: &DialogueState, spoken: String) -> Self {
        TurnResult {
            displayed: Vec::new(),
            photos: Vec::new(),
            spoken,
            remaining: state.relevant.iter().cloned().collect(),
            mode: state.mode,
            intent: None,
            intent_scores: None,
            booking: None,
            english_context: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    pub flow: FlowParams,
    /// Use the graph index when it is built.
    pub approximate: bool,
    /// Fixed "today" for booking dates; the local date when unset.
    pub today: Option<NaiveDate>,
}

/// Runs dialogue turns for one city over a shared index and models.
pub struct Engine<T: Scalar> {
    city: String,
    index: RwLock<Arc<ResponseIndex<T>>>,
    encoder: Arc<dyn TextEncoder<T>>,
    intents: Option<Arc<IntentSet<T>>>,
    translator: Option<Arc<dyn TranslationProvider>>,
    options: EngineOptions,
}

impl<T: Scalar> Engine<T> {
    pub fn new(
        city: impl Into<String>,
        index: Arc<ResponseIndex<T>>,
        encoder: Arc<dyn TextEncoder<T>>,
        options: EngineOptions,
    ) -> Result<Self> {
        options.flow.validate()?;
        if index.dim() != encoder.dim() && !index.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: encoder.dim(),
                found: index.dim(),
            });
        }
        Ok(Engine {
            city: city.into(),
            index: RwLock::new(index),
            encoder,
            intents: None,
            translator: None,
            options,
        })
    }

    pub fn with_intents(mut self, intents: Arc<IntentSet<T>>) -> Self {
        self.intents = Some(intents);
        self
    }

    pub fn with_translator(mut self, provider: Arc<dyn TranslationProvider>) -> Self {
        self.translator = Some(provider);
        self
    }

    pub fn city(&self) -> &str {
        &self.city
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    /// The current index. A turn holds on to one snapshot throughout.
    pub fn index(&self) -> Arc<ResponseIndex<T>> {
        Arc::clone(&self.index.read())
    }

    /// Atomically replaces the index; turns in flight keep the old one.
    pub fn swap_index(&self, index: Arc<ResponseIndex<T>>) {
        *self.index.write() = index;
    }

    fn all_entities(index: &ResponseIndex<T>) -> BTreeSet<String> {
        index.entities().iter().map(|e| e.entity_id.clone()).collect()
    }

    pub fn new_session(&self, session_id: impl Into<String>, language: impl Into<String>) -> DialogueState {
        DialogueState {
            session_id: session_id.into(),
            city: self.city.clone(),
            language: language.into(),
            relevant: Self::all_entities(&self.index()),
            history: Vec::new(),
            mode: Mode::Search,
            booking: BookingSlots::default(),
        }
    }

    fn today(&self) -> NaiveDate {
        self.options
            .today
            .unwrap_or_else(|| chrono::Local::now().date_naive())
    }

    /// Encodes context segments, translating them first for non-pivot
    /// sessions that have a provider.
    pub fn encode_context(&self, segments: &[&str], language: &str) -> Result<(Encoding<T>, Option<Vec<String>>)> {
        match &self.translator {
            Some(p) if language != PIVOT => {
                let (h, en) = encode_foreign_context(segments, p.as_ref(), language, self.encoder.as_ref())?;
                Ok((h, Some(en)))
            }
            _ => Ok((self.encoder.encode_context_segments(segments)?, None)),
        }
    }

    fn search(&self, index: &ResponseIndex<T>, h: &Encoding<T>, filter: &Filter, k: usize) -> Result<Vec<Hit<T>>> {
        if self.options.approximate && index.has_approx() {
            index.search_approx(h, filter, k)
        } else {
            index.search(h, filter, k)
        }
    }

    /// Runs one turn. On error the state is left untouched.
    pub fn step(&self, state: &mut DialogueState, utterance: &str) -> Result<TurnResult> {
        let index = self.index();
        let segments: Vec<&str> = [state.last(Speaker::User), state.last(Speaker::System), Some(utterance)]
            .into_iter()
            .flatten()
            .collect();
        let (h_c, english) = self.encode_context(&segments, &state.language)?;

        let decision = match &self.intents {
            Some(set) => {
                let (h_u, _) = self.encode_context(&[utterance], &state.language)?;
                Some(set.decide(&h_u)?)
            }
            None => None,
        };
        let fired = decision.and_then(|d| d.fired);

        let mut result = if fired == Some(IntentKind::Reset) {
            self.reset(state, &index)
        } else if state.mode == Mode::Booking || fired == Some(IntentKind::Booking) {
            self.booking_turn(state, &index, utterance)?
        } else {
            self.search_turn(state, &index, &h_c, utterance)?
        };
        result.intent_scores = decision;
        result.english_context = english;
        Ok(result)
    }

    fn reset(&self, state: &mut DialogueState, index: &ResponseIndex<T>) -> TurnResult {
        state.relevant = Self::all_entities(index);
        state.history.clear();
        state.mode = Mode::Search;
        state.booking = BookingSlots::default();
        let mut r = TurnResult::bare(state, templates(&state.language).reset.to_string());
        r.intent = Some(IntentKind::Reset);
        r
    }

    fn booking_turn(&self, state: &mut DialogueState, index: &ResponseIndex<T>, utterance: &str) -> Result<TurnResult> {
        let name = match state.relevant.iter().next().and_then(|id| index.entity_index(id)) {
            Some(i) if state.relevant.len() == 1 => index.entity(i).name.clone(),
            _ => String::new(),
        };
        let turn = match booking_step(state, utterance, &name, self.today()) {
            Ok(t) => t,
            Err(Error::NoSelectedEntity(_)) => {
                let spoken = templates(&state.language).pick_first.to_string();
                state.mode = Mode::Search;
                state.push(utterance, &spoken);
                let mut r = TurnResult::bare(state, spoken);
                r.intent = Some(IntentKind::Booking);
                return Ok(r);
            }
            Err(e) => return Err(e),
        };
        state.push(utterance, &turn.prompt);
        if turn.complete {
            state.mode = Mode::Search;
            state.booking = BookingSlots::default();
            state.relevant = Self::all_entities(index);
        } else {
            state.mode = Mode::Booking;
            state.booking = turn.slots.clone();
        }
        let mut r = TurnResult::bare(state, turn.prompt.clone());
        r.intent = Some(IntentKind::Booking);
        r.booking = Some(turn);
        Ok(r)
    }

    fn displayed(&self, index: &ResponseIndex<T>, hit: &Hit<T>) -> DisplayedResponse {
        let c = index.candidate(hit.candidate);
        let e = index.entity(c.entity);
        DisplayedResponse {
            entity_id: e.entity_id.clone(),
            entity_name: e.name.clone(),
            candidate_id: c.candidate_id,
            kind: c.kind,
            text: c.text.clone(),
            score: hit.score.to_f64_lossy(),
        }
    }

    fn search_turn(
        &self,
        state: &mut DialogueState,
        index: &ResponseIndex<T>,
        h_c: &Encoding<T>,
        utterance: &str,
    ) -> Result<TurnResult> {
        let flow = self.options.flow;
        let filter = index.filter_ids(state.relevant.iter().map(String::as_str), KindSet::TEXT);
        let hits = match self.search(index, h_c, &filter, flow.n) {
            Ok(h) => h,
            Err(Error::EmptyPool) => {
                return Ok(TurnResult::bare(state, templates(&state.language).no_results.to_string()));
            }
            Err(e) => return Err(e),
        };
        let c = index.scale().to_f64_lossy();
        let cosines: Vec<f64> = hits.iter().map(|h| h.score.to_f64_lossy() / c).collect();
        let probs = compute_probs(&cosines, flow.a)?;
        let owners: Vec<(String, f64)> = hits
            .iter()
            .zip(&probs)
            .map(|(h, &p)| (index.entity(index.candidate(h.candidate).entity).entity_id.clone(), p))
            .collect();
        let q: Vec<(String, f64)> = entity_scores(&owners).into_iter().collect();
        let after = shrink(&q, flow.t, &state.relevant)?;

        let mut displayed = Vec::new();
        let mut photos = Vec::new();
        if after.len() == 1 {
            let only = index.entity_index(after.iter().next().expect("one entity")).expect("entity in index");
            let own = Filter::new([only], KindSet::TEXT);
            for h in self.search(index, h_c, &own, flow.n)? {
                displayed.push(self.displayed(index, &h));
            }
            let pf = Filter::new([only], KindSet::PHOTO);
            match self.search(index, h_c, &pf, flow.m) {
                Ok(ph) => {
                    for h in ph {
                        let c = index.candidate(h.candidate);
                        photos.push(DisplayedPhoto {
                            entity_id: index.entity(c.entity).entity_id.clone(),
                            candidate_id: c.candidate_id,
                            photo_id: c.photo_ref.clone().unwrap_or_default(),
                            caption: (!c.text.is_empty()).then(|| c.text.clone()),
                            score: h.score.to_f64_lossy(),
                        });
                    }
                }
                Err(Error::EmptyPool) => {}
                Err(e) => return Err(e),
            }
        } else {
            let mut shown = BTreeSet::new();
            for h in &hits {
                let d = self.displayed(index, h);
                if after.contains(&d.entity_id) && shown.insert(d.entity_id.clone()) {
                    displayed.push(d);
                    if shown.len() == flow.m {
                        break;
                    }
                }
            }
        }

        let spoken = match displayed.first() {
            Some(top) => {
                let c = index.candidate(top.candidate_id);
                render_spoken(index.entity(c.entity), c, &state.language)
            }
            None => templates(&state.language).no_results.to_string(),
        };
        state.relevant = after;
        state.push(utterance, &spoken);
        Ok(TurnResult {
            displayed,
            photos,
            spoken,
            remaining: state.relevant.iter().cloned().collect(),
            mode: state.mode,
            intent: None,
            intent_scores: None,
            booking: None,
            english_context: None,
        })
    }
}

/// Engines for several cities.
pub struct Deployment<T: Scalar> {
    engines: BTreeMap<String, Arc<Engine<T>>>,
}

impl<T: Scalar> Default for Deployment<T> {
    fn default() -> Self {
        Deployment { engines: BTreeMap::new() }
    }
}

impl<T: Scalar> Deployment<T> {
    pub fn insert(&mut self, engine: Engine<T>) {
        self.engines.insert(engine.city().to_string(), Arc::new(engine));
    }

    pub fn engine(&self, city: &str) -> Result<&Arc<Engine<T>>> {
        self.engines.get(city).ok_or_else(|| Error::UnknownCity(city.to_string()))
    }

    pub fn cities(&self) -> impl Iterator<Item = &str> {
        self.engines.keys().map(String::as_str)
    }

    pub fn new_session(&self, city: &str, session_id: impl Into<String>, language: impl Into<String>) -> Result<DialogueState> {
        Ok(self.engine(city)?.new_session(session_id, language))
    }

    /// Runs a turn on the engine of the session's city.
    pub fn step(&self, state: &mut DialogueState, utterance: &str) -> Result<TurnResult> {
        self.engine(&state.city)?.step(state, utterance)
    }
}
