//! Entity catalog parsing, fact-sentence templates and the unencoded
//! response pool.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::split_sentences;
use crate::photo::PhotoFeatures;

use super::Kind;

/// A structured attribute value in the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Null,
    Bool(bool),
    Number(f64),
    Text(String),
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Text(v.to_string())
    }
}

/// A restaurant record as found in the catalog file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub name: String,
    #[serde(default)]
    pub city: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttrValue>,
    #[serde(default)]
    pub reviews: Vec<String>,
    #[serde(default)]
    pub menu_items: Vec<String>,
    #[serde(default)]
    pub photo_ids: Vec<String>,
}

impl Entity {
    pub fn new(entity_id: impl Into<String>, name: impl Into<String>) -> Self {
        Entity {
            entity_id: entity_id.into(),
            name: name.into(),
            city: String::new(),
            attributes: BTreeMap::new(),
            reviews: Vec::new(),
            menu_items: Vec::new(),
            photo_ids: Vec::new(),
        }
    }

    pub fn info(&self) -> EntityInfo {
        EntityInfo {
            entity_id: self.entity_id.clone(),
            name: self.name.clone(),
            city: self.city.clone(),
        }
    }
}

/// The part of an entity the index keeps after build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub entity_id: String,
    pub name: String,
    pub city: String,
}

enum Template {
    Flag { yes: &'static str, no: &'static str },
    Value(&'static str),
}

/// Attribute templates, in the order fact sentences are emitted. `{}` in a
/// value template is replaced by the attribute value.
const TEMPLATES: &[(&str, Template)] = &[
    ("accepts_credit_cards", Template::Flag { yes: "accepts credit cards", no: "does not accept credit cards" }),
    ("price_range", Template::Value("is in the {} price range")),
    ("cuisine", Template::Value("serves {} food")),
    ("address", Template::Value("is located at {}")),
    ("opening_hours", Template::Value("is open {}")),
    ("reservations", Template::Flag { yes: "takes reservations", no: "does not take reservations" }),
    ("delivery", Template::Flag { yes: "offers delivery", no: "does not offer delivery" }),
    ("takeout", Template::Flag { yes: "offers takeout", no: "does not offer takeout" }),
    ("outdoor_seating", Template::Flag { yes: "has outdoor seating", no: "does not have outdoor seating" }),
    ("wifi", Template::Flag { yes: "offers free wifi", no: "does not offer wifi" }),
    ("wheelchair_accessible", Template::Flag { yes: "is wheelchair accessible", no: "is not wheelchair accessible" }),
    ("good_for_kids", Template::Flag { yes: "is good for kids", no: "is not recommended for kids" }),
    ("good_for_groups", Template::Flag { yes: "is good for groups", no: "is not suited to groups" }),
    ("parking", Template::Flag { yes: "has parking", no: "does not have parking" }),
    ("serves_alcohol", Template::Flag { yes: "serves alcohol", no: "does not serve alcohol" }),
    ("dogs_allowed", Template::Flag { yes: "allows dogs", no: "does not allow dogs" }),
    ("has_tv", Template::Flag { yes: "has a TV", no: "does not have a TV" }),
    ("caters", Template::Flag { yes: "offers catering", no: "does not offer catering" }),
    ("happy_hour", Template::Flag { yes: "has a happy hour", no: "does not have a happy hour" }),
];

/// Attribute keys with a fact template, in emission order.
pub fn template_keys() -> impl Iterator<Item = &'static str> {
    TEMPLATES.iter().map(|(k, _)| *k)
}

fn render_value(v: &AttrValue) -> Option<String> {
    match v {
        AttrValue::Text(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        AttrValue::Number(n) if n.fract() == 0.0 => Some(format!("{}", *n as i64)),
        AttrValue::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// One sentence per populated attribute that has a template. Attributes
/// without a template, null values and values of the wrong type are skipped.
pub fn generate_fact_sentences(e: &Entity) -> Vec<String> {
    let mut out = Vec::new();
    for (key, template) in TEMPLATES {
        let Some(value) = e.attributes.get(*key) else {
            continue;
        };
        let predicate = match (template, value) {
            (Template::Flag { yes, .. }, AttrValue::Bool(true)) => yes.to_string(),
            (Template::Flag { no, .. }, AttrValue::Bool(false)) => no.to_string(),
            (Template::Value(t), v) => match render_value(v) {
                Some(s) => t.replace("{}", &s),
                None => continue,
            },
            _ => continue,
        };
        out.push(format!("Restaurant {} {}.", e.name, predicate));
    }
    out
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of the `nth` (0-based) occurrence of `"entity_id": "<id>"`.
fn entity_id_line(text: &str, id: &str, nth: usize) -> usize {
    let quoted = serde_json::to_string(id).unwrap_or_default();
    let pattern = format!(r#""entity_id"\s*:\s*{}"#, regex::escape(&quoted));
    regex::Regex::new(&pattern)
        .ok()
        .and_then(|re| re.find_iter(text).nth(nth).map(|m| line_of(text, m.start())))
        .unwrap_or(0)
}

/// Parses a JSON array of entities. Syntax errors and duplicate ids are
/// reported with a 1-based line number.
pub fn parse_catalog(text: &str) -> Result<Vec<Entity>> {
    let entities: Vec<Entity> =
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for e in &entities {
        let n = seen.entry(e.entity_id.as_str()).or_insert(0);
        *n += 1;
        if *n > 1 {
            return Err(Error::parse(
                entity_id_line(text, &e.entity_id, 1),
                format!("duplicate entity_id {:?}", e.entity_id),
            ));
        }
    }
    Ok(entities)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<Entity>> {
    parse_catalog(&std::fs::read_to_string(path)?)
}

/// Photo part of a pool entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPhoto {
    pub photo_id: String,
    pub features: Vec<f32>,
}

/// A response before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    /// Position of the owning entity in [`ResponsePool::entities`].
    pub entity: u32,
    pub kind: Kind,
    /// Display text; the caption for photos (empty when there is none).
    pub text: String,
    /// English pivot text the vector is computed from, when translated.
    pub english: Option<String>,
    pub photo: Option<PoolPhoto>,
}

impl PoolEntry {
    /// The text that gets encoded.
    pub fn encoding_text(&self) -> &str {
        self.english.as_deref().unwrap_or(&self.text)
    }

    pub fn has_caption(&self) -> bool {
        !self.text.is_empty()
    }
}

/// All responses of one city, in candidate-id order, not yet encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePool {
    pub language: String,
    pub entities: Vec<EntityInfo>,
    pub entries: Vec<PoolEntry>,
}

impl ResponsePool {
    pub fn new(language: impl Into<String>) -> Self {
        ResponsePool {
            language: language.into(),
            entities: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn add_entity(&mut self, info: EntityInfo) -> u32 {
        self.entities.push(info);
        (self.entities.len() - 1) as u32
    }

    pub fn push_text(&mut self, entity: u32, kind: Kind, text: impl Into<String>) {
        self.entries.push(PoolEntry {
            entity,
            kind,
            text: text.into(),
            english: None,
            photo: None,
        });
    }

    pub fn push_photo(&mut self, entity: u32, photo: &PhotoFeatures) {
        self.entries.push(PoolEntry {
            entity,
            kind: Kind::Photo,
            text: photo.caption.clone().unwrap_or_default(),
            english: None,
            photo: Some(PoolPhoto {
                photo_id: photo.photo_id.clone(),
                features: photo.features.clone(),
            }),
        });
    }

    /// Expands each entity into fact sentences, review sentences, menu
    /// items and photos, in that order. Photos must reference a catalog
    /// entity and have unique ids.
    pub fn from_catalog(entities: &[Entity], photos: &[PhotoFeatures]) -> Result<Self> {
        let mut pool = ResponsePool::new("en");
        let mut by_id: HashMap<&str, u32> = HashMap::new();
        for e in entities {
            if by_id.contains_key(e.entity_id.as_str()) {
                return Err(Error::parse(0, format!("duplicate entity_id {:?}", e.entity_id)));
            }
            let idx = pool.add_entity(e.info());
            by_id.insert(&e.entity_id, idx);
        }
        let mut photos_of: Vec<Vec<&PhotoFeatures>> = vec![Vec::new(); entities.len()];
        let mut photo_ids: HashMap<&str, usize> = HashMap::new();
        for (i, p) in photos.iter().enumerate() {
            let Some(&idx) = by_id.get(p.entity_id.as_str()) else {
                return Err(Error::parse(i + 1, format!("photo {:?} references unknown entity {:?}", p.photo_id, p.entity_id)));
            };
            if photo_ids.insert(&p.photo_id, i).is_some() {
                return Err(Error::parse(i + 1, format!("duplicate photo_id {:?}", p.photo_id)));
            }
            photos_of[idx as usize].push(p);
        }
        for (idx, e) in entities.iter().enumerate() {
            let idx = idx as u32;
            for s in generate_fact_sentences(e) {
                pool.push_text(idx, Kind::Fact, s);
            }
            for review in &e.reviews {
                for s in split_sentences(review) {
                    pool.push_text(idx, Kind::Review, s);
                }
            }
            for item in e.menu_items.iter().filter(|m| !m.trim().is_empty()) {
                pool.push_text(idx, Kind::Menu, item.trim());
            }
            for p in &photos_of[idx as usize] {
                pool.push_photo(idx, p);
            }
        }
        Ok(pool)
    }

    pub fn count(&self, kind: Kind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }
}
