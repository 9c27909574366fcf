//! Synthetic corpora and city catalogs for tests, benchmarks and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::index::{template_keys, AttrValue, Entity};
use crate::photo::PhotoFeatures;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable word for `i`, unique for `i < 70^3`.
pub fn pseudo_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut out = String::new();
    let mut rest = i;
    for _ in 0..3 {
        let s = rest % n;
        rest /= n;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusteredPair {
    pub context: String,
    pub reply: String,
    pub cluster: usize,
}

/// `(context, reply)` pairs drawn from `clusters` topics. Contexts and
/// replies of a topic use disjoint word sets, so matching them has to be
/// learned; every text also carries shared noise words.
pub fn clustered_pairs(n_pairs: usize, clusters: usize, seed: u64) -> Vec<ClusteredPair> {
    const TOPIC_WORDS: usize = 8;
    const NOISE_WORDS: usize = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx_word = |c: usize, j: usize| pseudo_word(NOISE_WORDS + 2 * c * TOPIC_WORDS + j);
    let reply_word = |c: usize, j: usize| pseudo_word(NOISE_WORDS + (2 * c + 1) * TOPIC_WORDS + j);
    let mut out = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let cluster = i % clusters.max(1);
        let mut ctx: Vec<String> = (0..4).map(|_| ctx_word(cluster, rng.gen_range(0..TOPIC_WORDS))).collect();
        ctx.extend((0..2).map(|_| pseudo_word(rng.gen_range(0..NOISE_WORDS))));
        ctx.shuffle(&mut rng);
        let mut reply: Vec<String> = (0..4).map(|_| reply_word(cluster, rng.gen_range(0..TOPIC_WORDS))).collect();
        reply.push(pseudo_word(rng.gen_range(0..NOISE_WORDS)));
        reply.shuffle(&mut rng);
        out.push(ClusteredPair {
            context: ctx.join(" "),
            reply: reply.join(" "),
            cluster,
        });
    }
    out.shuffle(&mut rng);
    out
}

/// Target sizes of a synthetic city.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CityShape {
    pub entities: usize,
    pub photos: usize,
    pub facts: usize,
    pub review_sentences: usize,
    pub menu_items: usize,
    pub feature_dim: usize,
}

impl CityShape {
    /// The Edinburgh deployment. Its menu count is not published; ten items
    /// per restaurant are generated.
    pub const EDINBURGH: CityShape = CityShape {
        entities: 396,
        photos: 4_225,
        facts: 6_725,
        review_sentences: 125_830,
        menu_items: 3_960,
        feature_dim: 8,
    };

    /// A small city with `entities` restaurants and a few items of each kind.
    pub fn small(entities: usize) -> CityShape {
        CityShape {
            entities,
            photos: entities * 2,
            facts: entities * 6,
            review_sentences: entities * 8,
            menu_items: entities * 3,
            feature_dim: 8,
        }
    }
}

/// Synthetic restaurants with their photos.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub entities: Vec<Entity>,
    pub photos: Vec<PhotoFeatures>,
}

const CUISINES: &[&str] = &[
    "italian", "indian", "thai", "chinese", "french", "mexican", "japanese", "greek", "spanish", "turkish",
    "vietnamese", "korean", "lebanese", "scottish",
];

const DISHES: &[&[&str]] = &[
    &["pizza", "pasta", "risotto", "tiramisu", "lasagne"],
    &["curry", "naan", "biryani", "samosa", "dal"],
    &["pad thai", "green curry", "satay", "tom yum", "mango sticky rice"],
    &["dumplings", "fried rice", "noodles", "spring rolls", "peking duck"],
    &["croissant", "steak frites", "onion soup", "crepes", "ratatouille"],
    &["tacos", "burritos", "nachos", "enchiladas", "guacamole"],
    &["sushi", "ramen", "tempura", "gyoza", "udon"],
    &["gyros", "souvlaki", "moussaka", "feta salad", "baklava"],
    &["paella", "tapas", "churros", "gazpacho", "tortilla"],
    &["kebab", "baklava", "pide", "meze", "kofte"],
    &["pho", "banh mi", "summer rolls", "bun cha", "iced coffee"],
    &["bibimbap", "kimchi", "bulgogi", "japchae", "fried chicken"],
    &["falafel", "hummus", "shawarma", "tabbouleh", "manakish"],
    &["haggis", "cullen skink", "salmon", "cranachan", "shortbread"],
];

const ADJECTIVES: &[&str] = &[
    "delicious", "tasty", "excellent", "bland", "amazing", "fresh", "greasy", "generous", "spicy", "lovely",
];

const PLACE_WORDS: &[&str] = &[
    "the staff", "the service", "the room", "the music", "the view", "the terrace", "the waiter", "the bar",
];

const PLACE_ADJECTIVES: &[&str] = &["friendly", "slow", "cosy", "loud", "quiet", "charming", "busy", "relaxed"];

const NAME_FIRST: &[&str] = &[
    "Golden", "Blue", "Little", "Old", "Red", "Silver", "Green", "Royal", "Happy", "Wild", "Lucky", "Crooked",
];

const NAME_SECOND: &[&str] = &[
    "Fork", "Lantern", "Kitchen", "Table", "Oven", "Garden", "Spoon", "Harbour", "Bistro", "Dragon", "Olive", "Thistle",
];

const STREETS: &[&str] = &["High Street", "Leith Walk", "Rose Street", "Queen Street", "Market Street", "Canal Road"];

/// Splits `total` as evenly as possible into `parts`, larger parts first.
pub fn spread(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn review_sentence(rng: &mut ChaCha8Rng, cuisine: usize) -> String {
    let dishes = DISHES[cuisine];
    match rng.gen_range(0..3) {
        0 => format!(
            "The {} was {}.",
            dishes.choose(rng).expect("dishes"),
            ADJECTIVES.choose(rng).expect("adjectives")
        ),
        1 => format!(
            "{} was {}.",
            capitalize(PLACE_WORDS.choose(rng).expect("places")),
            PLACE_ADJECTIVES.choose(rng).expect("adjectives")
        ),
        _ => format!(
            "We loved the {} and the {}!",
            dishes.choose(rng).expect("dishes"),
            dishes.choose(rng).expect("dishes")
        ),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn attribute(rng: &mut ChaCha8Rng, key: &str, cuisine: usize) -> AttrValue {
    match key {
        "price_range" => ["cheap", "moderate", "expensive"].choose(rng).copied().map(AttrValue::from).expect("prices"),
        "cuisine" => AttrValue::from(CUISINES[cuisine]),
        "address" => AttrValue::Text(format!("{} {}", rng.gen_range(1..200), STREETS.choose(rng).expect("streets"))),
        "opening_hours" => AttrValue::Text(format!("from {} am to {} pm", rng.gen_range(7..12), rng.gen_range(8..12))),
        _ => AttrValue::Bool(rng.gen_bool(0.5)),
    }
}

/// Generates a city with exactly the counts in `shape`. Fails if the
/// counts cannot be realized (more than one fact per template per entity,
/// or items without any entity).
pub fn synthetic_city(shape: &CityShape, city: &str, seed: u64) -> Result<SyntheticCity> {
    let keys: Vec<&str> = template_keys().collect();
    if shape.entities == 0 {
        if shape.photos + shape.facts + shape.review_sentences + shape.menu_items > 0 {
            return Err(Error::InvalidArgument("items need at least one entity".into()));
        }
        return Ok(SyntheticCity {
            entities: Vec::new(),
            photos: Vec::new(),
        });
    }
    if shape.facts > keys.len() * shape.entities {
        return Err(Error::InvalidArgument(format!(
            "at most {} facts per entity are possible",
            keys.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facts = spread(shape.facts, shape.entities);
    let reviews = spread(shape.review_sentences, shape.entities);
    let menus = spread(shape.menu_items, shape.entities);
    let photos = spread(shape.photos, shape.entities);
    let mut entities = Vec::with_capacity(shape.entities);
    let mut photo_list = Vec::with_capacity(shape.photos);
    for i in 0..shape.entities {
        let cuisine = i % CUISINES.len();
        let name = format!(
            "{} {}{}",
            NAME_FIRST[i % NAME_FIRST.len()],
            NAME_SECOND[(i / NAME_FIRST.len()) % NAME_SECOND.len()],
            if i >= NAME_FIRST.len() * NAME_SECOND.len() {
                format!(" {}", i / (NAME_FIRST.len() * NAME_SECOND.len()) + 1)
            } else {
                String::new()
            }
        );
        let mut e = Entity::new(format!("r{i:04}"), name);
        e.city = city.to_string();
        // cuisine first so every entity with facts states it
        let mut order: Vec<&str> = keys.iter().copied().filter(|k| *k != "cuisine").collect();
        order.shuffle(&mut rng);
        order.insert(0, "cuisine");
        for key in order.into_iter().take(facts[i]) {
            e.attributes.insert(key.to_string(), attribute(&mut rng, key, cuisine));
        }
        let mut left = reviews[i];
        while left > 0 {
            let n = rng.gen_range(1..=3).min(left);
            let text: Vec<String> = (0..n).map(|_| review_sentence(&mut rng, cuisine)).collect();
            e.reviews.push(text.join(" "));
            left -= n;
        }
        for m in 0..menus[i] {
            let dish = DISHES[cuisine][m % DISHES[cuisine].len()];
            e.menu_items.push(if m < DISHES[cuisine].len() {
                dish.to_string()
            } else {
                format!("{} {}", ADJECTIVES[(m / DISHES[cuisine].len()) % ADJECTIVES.len()], dish)
            });
        }
        for p in 0..photos[i] {
            let photo_id = format!("{}-p{p}", e.entity_id);
            let caption = (p % 3 != 2).then(|| format!("{} at {}", DISHES[cuisine][p % DISHES[cuisine].len()], e.name));
            let features = (0..shape.feature_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            e.photo_ids.push(photo_id.clone());
            photo_list.push(PhotoFeatures {
                photo_id,
                entity_id: e.entity_id.clone(),
                caption,
                features,
            });
        }
        entities.push(e);
    }
    Ok(SyntheticCity {
        entities,
        photos: photo_list,
    })
}

/// Cuisine words the synthetic catalogs use, for building probe queries.
pub fn cuisines() -> &'static [&'static str] {
    CUISINES
}

/// Dish names of every synthetic cuisine.
pub fn dishes() -> impl Iterator<Item = &'static str> {
    DISHES.iter().flat_map(|d| d.iter().copied())
}
