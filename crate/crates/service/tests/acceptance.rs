//! Acceptance run: one PASS or FAIL line per criterion, with its measured
//! value and runtime. Exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use polyfind_core::dialogue::{compute_probs, entity_scores, shrink, Deployment, Engine, EngineOptions, FlowParams, Mode};
use polyfind_core::encoder::hashing::HashingEncoder;
use polyfind_core::encoder::{
    recall_at_k, train_with_history, DualEncoder, EncoderConfig, EncoderModel, Stream, TextEncoder,
};
use polyfind_core::featurizer::{FeatureSet, Vocab};
use polyfind_core::index::{
    Entity, EntityInfo, HnswParams, IndexStats, Kind, KindSet, ResponseIndex, ResponsePool,
};
use polyfind_core::intent::{cross_validate, load_phrases, train_intent, IntentClassifier, IntentConfig, IntentKind, IntentSet};
use polyfind_core::multilingual::{pretranslate_pool, IdentityProvider, TranslationProvider};
use polyfind_core::photo::{photo_score, PhotoHead};
use polyfind_core::synth::{clustered_pairs, cuisines, dishes, pseudo_word, synthetic_city, CityShape};
use polyfind_core::{score, Encoding};
use polyfind_service::app::{router, AppState, CityInfo, SessionJson, TurnJson};
use polyfind_service::sessions::SessionStore;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    // Box-Muller, so directions are uniform on the sphere
    let v: Vec<f64> = (0..dim)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Encoder with hand-set vectors for listed texts and feature hashing for
/// anything else. Contexts are looked up by their last segment.
struct TableEncoder {
    table: HashMap<&'static str, Vec<f64>>,
    fallback: HashingEncoder<f64>,
}

impl TextEncoder<f64> for TableEncoder {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn scale(&self) -> f64 {
        2.0
    }

    fn encode_context_segments(&self, segments: &[&str]) -> polyfind_core::Result<Encoding<f64>> {
        self.encode_reply_text(segments.last().copied().unwrap_or(""))
    }

    fn encode_reply_text(&self, text: &str) -> polyfind_core::Result<Encoding<f64>> {
        match self.table.get(text) {
            Some(v) => Ok(Encoding::normalize(v.clone())),
            None => self.fallback.encode_reply_text(text),
        }
    }
}

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 4];
    v[i] = 1.0;
    v
}

fn flow_math() -> Outcome {
    let e = std::f64::consts::E;
    let p = compute_probs(&[1.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    ensure!(close(p[0], e / (e + 1.0), 1e-6) && close(p[1], 1.0 / (e + 1.0), 1e-6), "probs {p:?}");
    ensure!(close(p[0], 0.7311, 1e-4), "p0 {}", p[0]);
    let sharp = compute_probs(&[1.0, 0.0], 10.0).map_err(|e| e.to_string())?;
    ensure!(sharp[0] > 0.9999, "a=10 gives {}", sharp[0]);
    let flat = compute_probs(&[0.4; 3], 3.0).map_err(|e| e.to_string())?;
    ensure!(flat.iter().all(|x| close(*x, 1.0 / 3.0, 1e-6)), "uniform {flat:?}");

    let q = entity_scores(&[("A", 0.5), ("B", 0.3), ("A", 0.2)]);
    ensure!(close(q["A"], 0.7, 1e-6) && close(q["B"], 0.3, 1e-6), "q {q:?}");
    let q = entity_scores(&[("E", 0.6), ("E", 0.4)]);
    ensure!(close(q["E"], 1.0, 1e-6), "single entity {q:?}");

    let all: BTreeSet<&str> = ["A", "B", "C", "D"].into();
    let q = [("A", 0.7), ("B", 0.2), ("C", 0.1)];
    let s = |t: f64, q: &[(&'static str, f64)]| shrink(q, t, &all).map_err(|e| e.to_string());
    ensure!(s(0.8, &q)? == BTreeSet::from(["A", "B"]), "t=0.8");
    ensure!(s(0.5, &q)? == BTreeSet::from(["A"]), "t=0.5");
    ensure!(s(0.8, &[("A", 0.25), ("B", 0.25), ("C", 0.25), ("D", 0.25)])? == all, "uniform shrink");

    // A's candidates point along e0, B's along e1, C's along e2
    let mut pool = ResponsePool::new("en");
    let mut vectors = Vec::new();
    let items = [
        ("A", "Luigi's", ["great pasta", "margherita pizza"]),
        ("B", "Bamboo", ["lovely noodles", "spring rolls"]),
        ("C", "Casa", ["fresh tacos", "burritos"]),
    ];
    for (i, (id, name, texts)) in items.iter().enumerate() {
        let ent = pool.add_entity(EntityInfo {
            entity_id: id.to_string(),
            name: name.to_string(),
            city: "testville".into(),
        });
        for t in texts {
            pool.push_text(ent, Kind::Review, *t);
            vectors.push(basis(i));
        }
    }
    let index = ResponseIndex::from_encoded(&pool, vectors, 2.0).map_err(|e| e.to_string())?;
    let h = 0.5f64.sqrt();
    let enc = TableEncoder {
        table: HashMap::from([("pasta or noodles", vec![h, h, 0.0, 0.0]), ("I want pasta", basis(0))]),
        fallback: HashingEncoder::new(4),
    };
    let options = EngineOptions {
        flow: FlowParams { t: 0.5, ..FlowParams::default() },
        ..EngineOptions::default()
    };
    let engine = Engine::new("testville", Arc::new(index), Arc::new(enc), options).map_err(|e| e.to_string())?;
    let mut state = engine.new_session("s", "en");
    let mut sizes = vec![state.relevant.len()];
    for u in ["pasta or noodles", "I want pasta", "I want pasta"] {
        if state.relevant.len() == 1 {
            break;
        }
        engine.step(&mut state, u).map_err(|e| e.to_string())?;
        sizes.push(state.relevant.len());
    }
    ensure!(state.relevant == BTreeSet::from(["A".to_string()]), "|R| sequence {sizes:?}, R {:?}", state.relevant);
    Ok(format!("hand values exact; |R| {sizes:?} in {} turns", sizes.len() - 1))
}

fn monotonicity() -> Outcome {
    let shape = CityShape::small(50);
    let city = synthetic_city(&shape, "synthcity", 11).map_err(|e| e.to_string())?;
    let pool = ResponsePool::from_catalog(&city.entities, &city.photos).map_err(|e| e.to_string())?;
    let enc = Arc::new(HashingEncoder::<f64>::new(64));
    let head = PhotoHead::<f64>::new(shape.feature_dim, 8, 64, 11);
    let index = ResponseIndex::build(&pool, enc.as_ref(), Some(&head)).map_err(|e| e.to_string())?;
    let engine = Engine::new("synthcity", Arc::new(index), enc, EngineOptions::default()).map_err(|e| e.to_string())?;

    let mut words: Vec<String> = cuisines().iter().map(|s| s.to_string()).collect();
    words.extend(dishes().map(String::from));
    words.extend(["cheap", "cosy", "friendly", "terrace", "parking", "wifi"].map(String::from));
    words.extend((0..10).map(pseudo_word));
    let mut rng = StdRng::seed_from_u64(2024);
    let mut turns = 0;
    let mut singles = 0;
    for seq in 0..1000 {
        let mut state = engine.new_session("p", "en");
        let mut size = state.relevant.len();
        for _ in 0..rng.gen_range(1..=5) {
            let n = rng.gen_range(1..=4);
            let u: Vec<&str> = (0..n).map(|_| words.choose(&mut rng).expect("words").as_str()).collect();
            let u = u.join(" ");
            engine.step(&mut state, &u).map_err(|e| format!("sequence {seq}: {e}"))?;
            turns += 1;
            ensure!(state.mode == Mode::Search, "sequence {seq}: left search mode on {u:?}");
            ensure!(!state.relevant.is_empty(), "sequence {seq}: R emptied by {u:?}");
            ensure!(state.relevant.len() <= size, "sequence {seq}: |R| {size} -> {} on {u:?}", state.relevant.len());
            size = state.relevant.len();
        }
        singles += (size == 1) as usize;
    }
    Ok(format!("1000 sequences, {turns} turns, {singles} ended at |R|=1"))
}

fn retrieval_learning() -> Outcome {
    let pairs: Vec<(String, String)> = clustered_pairs(1100, 50, 7).into_iter().map(|p| (p.context, p.reply)).collect();
    let (train, test) = pairs.split_at(1000);
    let vocab = Vocab::build(train.iter().flat_map(|(c, r)| [c.as_str(), r.as_str()]), 1, 10_000).map_err(|e| e.to_string())?;
    let config = EncoderConfig::default();
    let c_init = EncoderModel::<f32>::new(config.clone(), &vocab).map_err(|e| e.to_string())?.scale() as f64;
    let one_core = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let (recall, c) = one_core.install(|| -> Result<(f64, f64), String> {
        let (model, _) = train_with_history::<f32, _>(train, &config, &vocab).map_err(|e| e.to_string())?;
        let enc = DualEncoder::new(vocab, model).map_err(|e| e.to_string())?;
        Ok((recall_at_k(&enc, test, 100, 1).map_err(|e| e.to_string())?, enc.scale() as f64))
    })?;
    let max = config.max_scale();
    ensure!(recall >= 0.05, "recall@1 {recall:.3} below 0.05");
    ensure!(c > c_init && c <= max + 1e-6, "C {c_init:.3} -> {c:.3}, bound {max:.3}");
    Ok(format!("recall@1/100 {recall:.3} (baseline 0.010); C {c_init:.3} -> {c:.3}, sqrt(l) {max:.3}"))
}

const H: f64 = 1e-6;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-8)
}

fn encoder_gradients(attention: bool, worst: &mut f64) -> Result<usize, String> {
    let corpus = ["where is good pasta", "the pasta place is great", "cheap beer now", "beer is cheap here"];
    let vocab = Vocab::build(corpus, 1, 50).map_err(|e| e.to_string())?;
    let cfg = EncoderConfig {
        embed_dim: 4,
        hidden_dim: 5,
        hidden_layers: 2,
        out_dim: 4,
        attention_enabled: attention,
        attention_heads: 2,
        batch_size: 3,
        seed: 11,
        ..EncoderConfig::default()
    };
    let mut model = EncoderModel::<f64>::new(cfg, &vocab).map_err(|e| e.to_string())?;
    let batch: Vec<(FeatureSet, FeatureSet)> = [
        ("where is good pasta", "the pasta place is great"),
        ("cheap beer", "beer is cheap here"),
        ("unseen words here", "great place"),
    ]
    .iter()
    .map(|(c, r)| (vocab.featurize(c), vocab.featurize(r)))
    .collect();
    let (_, grads) = model.loss_and_gradients(&batch).map_err(|e| e.to_string())?;
    let mut tensors = 0;
    for (t, (name, a)) in grads.dense().iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = model.dense_params_mut()[t].1[i];
            model.dense_params_mut()[t].1[i] = orig + H;
            let up = model.batch_loss(&batch).map_err(|e| e.to_string())?;
            model.dense_params_mut()[t].1[i] = orig - H;
            let down = model.batch_loss(&batch).map_err(|e| e.to_string())?;
            model.dense_params_mut()[t].1[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let err = rel_err(a, &numeric);
        *worst = worst.max(err);
        ensure!(err < 1e-3, "encoder (attention {attention}) {name}: {err:e}");
        tensors += 1;
    }
    for stream in [Stream::Unigram, Stream::Bigram] {
        let rows = grads.embedding_rows(stream).clone();
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for (&id, g) in &rows {
            for (j, gj) in g.iter().enumerate() {
                let orig = model.embedding_row(stream, id)[j];
                model.embedding_row_mut(stream, id)[j] = orig + H;
                let up = model.batch_loss(&batch).map_err(|e| e.to_string())?;
                model.embedding_row_mut(stream, id)[j] = orig - H;
                let down = model.batch_loss(&batch).map_err(|e| e.to_string())?;
                model.embedding_row_mut(stream, id)[j] = orig;
                a.push(*gj);
                n.push((up - down) / (2.0 * H));
            }
        }
        let err = rel_err(&a, &n);
        *worst = worst.max(err);
        ensure!(err < 1e-3, "encoder (attention {attention}) {stream:?} embeddings: {err:e}");
        tensors += 1;
    }
    let c = model.scale();
    model.set_scale(c + H);
    let up = model.batch_loss(&batch).map_err(|e| e.to_string())?;
    model.set_scale(c - H);
    let down = model.batch_loss(&batch).map_err(|e| e.to_string())?;
    model.set_scale(c);
    let err = rel_err(&[grads.scale], &[(up - down) / (2.0 * H)]);
    *worst = worst.max(err);
    ensure!(err < 1e-3, "encoder (attention {attention}) scale: {err:e}");
    Ok(tensors + 1)
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut tensors = encoder_gradients(false, &mut worst)? + encoder_gradients(true, &mut worst)?;

    let mut head = PhotoHead::<f64>::new(6, 5, 4, 2);
    let feats = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.3);
    let mut caps = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) % 3) as f64 - 0.8);
    for mut r in caps.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    let loss = |h: &PhotoHead<f64>| h.loss_and_gradients(feats.view(), caps.view(), 1.7).map(|x| x.0).map_err(|e| e.to_string());
    let (_, grads) = head.loss_and_gradients(feats.view(), caps.view(), 1.7).map_err(|e| e.to_string())?;
    for (t, (name, a)) in grads.dense().iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = head.params_mut()[t].1[i];
            head.params_mut()[t].1[i] = orig + H;
            let up = loss(&head)?;
            head.params_mut()[t].1[i] = orig - H;
            let down = loss(&head)?;
            head.params_mut()[t].1[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let err = rel_err(a, &numeric);
        worst = worst.max(err);
        ensure!(err < 1e-3, "photo head {name}: {err:e}");
        tensors += 1;
    }

    let mut clf = IntentClassifier::<f64>::new(IntentKind::Reset, 5, 6, 0.5, 4);
    let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 7.0 - 0.4);
    let labels = [1.0, 0.0, 1.0, 0.0];
    let weights = [2.0, 0.5, 2.0, 0.5];
    let (_, grads) = clf.loss_and_gradients(x.view(), &labels, &weights);
    for (t, (name, a)) in grads.dense().iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = clf.params_mut()[t].1[i];
            clf.params_mut()[t].1[i] = orig + H;
            let up = clf.loss_and_gradients(x.view(), &labels, &weights).0;
            clf.params_mut()[t].1[i] = orig - H;
            let down = clf.loss_and_gradients(x.view(), &labels, &weights).0;
            clf.params_mut()[t].1[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let err = rel_err(a, &numeric);
        worst = worst.max(err);
        ensure!(err < 1e-3, "intent {name}: {err:e}");
        tensors += 1;
    }
    Ok(format!("{tensors} tensors, worst relative error {worst:.1e}"))
}

fn exact_and_approx_search() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let mut pool = ResponsePool::new("en");
    for e in 0..4 {
        pool.add_entity(Entity::new(format!("e{e}"), format!("E{e}")).info());
    }
    let mut meta = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for i in 0..20 {
        let entity = i * 7 % 4;
        let kind = Kind::ALL[i % 4];
        pool.push_text(entity as u32, kind, format!("c{i}"));
        meta.push((entity, kind));
        // every sixth vector repeats an earlier one so ties occur
        let v = if i % 6 == 5 { vectors[i - 3].clone() } else { random_unit(&mut rng, 6) };
        vectors.push(v);
    }
    let idx = ResponseIndex::from_encoded(&pool, vectors.clone(), 2.5).map_err(|e| e.to_string())?;
    let mut queries: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 6)).collect();
    queries.push(vectors[2].clone());
    let mut combos = 0;
    for q in &queries {
        let h = Encoding::normalize(q.clone());
        let mut ranked: Vec<(u32, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, 2.5 * v.iter().zip(h.as_slice()).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for emask in 1u32..16 {
            let entities: Vec<usize> = (0..4).filter(|e| emask & (1 << e) != 0).collect();
            let ids: Vec<String> = entities.iter().map(|e| format!("e{e}")).collect();
            for kmask in 1u8..16 {
                let kinds: Vec<Kind> = Kind::ALL.iter().copied().filter(|k| kmask & (1 << *k as u8) != 0).collect();
                let filter = idx.filter_ids(ids.iter().map(String::as_str), KindSet::of(&kinds));
                for k in 1..=21 {
                    let want: Vec<u32> = ranked
                        .iter()
                        .filter(|(i, _)| {
                            let (e, kind) = meta[*i as usize];
                            entities.contains(&e) && kinds.contains(&kind)
                        })
                        .take(k)
                        .map(|x| x.0)
                        .collect();
                    let got: Vec<u32> = match idx.search(&h, &filter, k) {
                        Ok(hits) => hits.iter().map(|x| x.candidate).collect(),
                        Err(polyfind_core::Error::EmptyPool) => Vec::new(),
                        Err(e) => return Err(e.to_string()),
                    };
                    ensure!(got == want, "entities {entities:?} kinds {kinds:?} k {k}: {got:?} != {want:?}");
                    combos += 1;
                }
            }
        }
    }

    let mut pool = ResponsePool::new("en");
    for e in 0..50 {
        pool.add_entity(Entity::new(format!("e{e}"), format!("E{e}")).info());
    }
    let mut big = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        pool.push_text((i % 50) as u32, Kind::ALL[i % 3], String::new());
        big.push(random_unit(&mut rng, 64).into_iter().map(|v| v as f32).collect::<Vec<f32>>());
    }
    let mut idx = ResponseIndex::from_encoded(&pool, big, 8.0).map_err(|e| e.to_string())?;
    idx.build_approx(HnswParams::default());
    let f = idx.filter_all(KindSet::ALL);
    let mut found = 0;
    let queries = 200;
    for _ in 0..queries {
        let h = Encoding::normalize(random_unit(&mut rng, 64).into_iter().map(|v| v as f32).collect());
        let exact: Vec<u32> = idx.search(&h, &f, 10).map_err(|e| e.to_string())?.iter().map(|x| x.candidate).collect();
        let approx = idx.search_approx(&h, &f, 10).map_err(|e| e.to_string())?;
        found += approx.iter().filter(|x| exact.contains(&x.candidate)).count();
    }
    let recall = found as f64 / (queries * 10) as f64;
    ensure!(recall >= 0.95, "approx recall@10 {recall:.3}");
    Ok(format!("{combos} (query, filter, k) cases exact; approx recall@10 {recall:.3} on 10000 vectors"))
}

fn photo_scoring() -> Outcome {
    let mut rng = StdRng::seed_from_u64(17);
    let mut cases = 0;
    for _ in 0..50 {
        let c = Encoding::normalize(random_unit(&mut rng, 8));
        let p = Encoding::normalize(random_unit(&mut rng, 8));
        let scale = rng.gen_range(0.5..8.0);
        let plain = score(&c, &p, scale).map_err(|e| e.to_string())?;
        let absent = photo_score(&c, &p, None, scale).map_err(|e| e.to_string())?;
        ensure!(close(absent, plain, 1e-6), "caption absent: {absent} vs {plain}");
        let same = photo_score(&c, &p, Some(&p), scale).map_err(|e| e.to_string())?;
        ensure!(close(same, absent, 1e-6), "caption = photo: {same} vs {absent}");
        let opposite = photo_score(&c, &p, Some(&p.neg()), scale).map_err(|e| e.to_string())?;
        ensure!(opposite == 0.0, "caption = -photo: {opposite}");
        cases += 1;
    }
    Ok(format!("3 rules on {cases} random triples"))
}

fn multilingual() -> Outcome {
    let city = synthetic_city(&CityShape::small(20), "synthcity", 4).map_err(|e| e.to_string())?;
    let pool = ResponsePool::from_catalog(&city.entities, &city.photos).map_err(|e| e.to_string())?;
    let enc = Arc::new(HashingEncoder::<f32>::new(64));
    let head = PhotoHead::<f32>::new(8, 8, 64, 1);
    let mono = ResponseIndex::build(&pool, enc.as_ref(), Some(&head)).map_err(|e| e.to_string())?;
    let foreign_pool = pretranslate_pool(&pool, &IdentityProvider, "de").map_err(|e| e.to_string())?;
    let foreign = ResponseIndex::build(&foreign_pool, enc.as_ref(), Some(&head)).map_err(|e| e.to_string())?;
    let a = Engine::new("c", Arc::new(mono), enc.clone(), EngineOptions::default()).map_err(|e| e.to_string())?;
    let b = Engine::new("c", Arc::new(foreign), enc, EngineOptions::default())
        .map_err(|e| e.to_string())?
        .with_translator(Arc::new(IdentityProvider));
    let d: Vec<&str> = dishes().collect();
    for i in 0..20 {
        let probe = format!("{} {} please", cuisines()[i % cuisines().len()], d[(i * 7) % d.len()]);
        let ra = a.step(&mut a.new_session("a", "en"), &probe).map_err(|e| e.to_string())?;
        let rb = b.step(&mut b.new_session("b", "de"), &probe).map_err(|e| e.to_string())?;
        let key = |r: &polyfind_core::dialogue::TurnResult| -> Vec<(u32, u64)> {
            r.displayed.iter().map(|x| (x.candidate_id, x.score.to_bits())).collect()
        };
        ensure!(key(&ra) == key(&rb) && ra.remaining == rb.remaining, "probe {probe:?} differs");
    }
    Ok("20 probes bit-identical".into())
}

fn intents() -> Outcome {
    let enc = HashingEncoder::<f64>::new(128);
    let cfg = IntentConfig::default();
    let load = |lang: &str, name: &str| {
        load_phrases(fixtures_dir().join("intents").join(lang).join(format!("{name}.txt"))).map_err(|e| e.to_string())
    };
    let mut worst = 1.0f64;
    let mut trained = BTreeMap::new();
    for lang in ["en", "de", "es"] {
        let (reset, booking, negatives) = (load(lang, "reset")?, load(lang, "booking")?, load(lang, "negatives")?);
        ensure!(reset.len() == 20 && booking.len() == 20, "{lang}: expected 20 paraphrases per intent");
        for (kind, pos, other) in [(IntentKind::Reset, &reset, &booking), (IntentKind::Booking, &booking, &reset)] {
            let neg: Vec<String> = negatives.iter().chain(other.iter()).cloned().collect();
            let pos_s: Vec<&str> = pos.iter().map(String::as_str).collect();
            let neg_s: Vec<&str> = neg.iter().map(String::as_str).collect();
            let acc = cross_validate(kind, &pos_s, &neg_s, &enc, &cfg, 4).map_err(|e| e.to_string())?;
            ensure!(acc >= 0.8, "{lang} {}: leave-4-out accuracy {acc:.3}", kind.as_str());
            worst = worst.min(acc);
            if lang == "en" {
                trained.insert(kind, train_intent(kind, &pos_s, &neg_s, &enc, &cfg).map_err(|e| e.to_string())?);
            }
        }
    }
    let set = IntentSet {
        reset: trained.remove(&IntentKind::Reset).expect("reset"),
        booking: trained.remove(&IntentKind::Booking).expect("booking"),
    };
    let d = set
        .decide(&enc.encode_context_text("Start again").map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(d.fired == Some(IntentKind::Reset), "\"Start again\" gave {d:?}");
    Ok(format!("worst leave-4-out accuracy {worst:.3} over en/de/es; \"Start again\" reset p={:.3}", d.reset))
}

fn edinburgh_index() -> Outcome {
    let shape = CityShape::EDINBURGH;
    let city = synthetic_city(&shape, "edinburgh", 2019).map_err(|e| e.to_string())?;
    let pool = ResponsePool::from_catalog(&city.entities, &city.photos).map_err(|e| e.to_string())?;
    let enc = HashingEncoder::<f32>::new(16);
    let head = PhotoHead::<f32>::new(shape.feature_dim, 8, 16, 0);
    let index = ResponseIndex::build(&pool, &enc, Some(&head)).map_err(|e| e.to_string())?;
    let want = IndexStats {
        n_entities: shape.entities as u64,
        n_photos: shape.photos as u64,
        n_fact_sentences: shape.facts as u64,
        n_review_sentences: shape.review_sentences as u64,
        n_menu_items: shape.menu_items as u64,
    };
    ensure!(index.stats() == want, "{:?} != {want:?}", index.stats());
    Ok(format!("{want:?}"))
}

struct Slow;

impl TranslationProvider for Slow {
    fn id(&self) -> String {
        "slow".into()
    }

    fn translate(&self, text: &str, _: &str, _: &str) -> polyfind_core::Result<String> {
        std::thread::sleep(Duration::from_millis(300));
        Ok(text.to_string())
    }
}

fn service_state(snapshot: Option<PathBuf>) -> Result<AppState, String> {
    let mut pool = ResponsePool::new("en");
    let items = [
        ("r0", "Luigi's", ["fresh pasta carbonara", "wood fired pizza"]),
        ("r1", "Bamboo", ["spicy pad thai noodles", "green curry"]),
        ("r2", "Casa", ["crispy fish tacos", "huge burritos"]),
    ];
    for (id, name, texts) in items {
        let e = pool.add_entity(Entity::new(id, name).info());
        for t in texts {
            pool.push_text(e, Kind::Review, t);
        }
    }
    let enc: Arc<dyn TextEncoder<f32>> = Arc::new(HashingEncoder::<f32>::new(64));
    let index = ResponseIndex::build(&pool, enc.as_ref(), None).map_err(|e| e.to_string())?;
    let engine = Engine::new("testville", Arc::new(index), enc, EngineOptions::default())
        .map_err(|e| e.to_string())?
        .with_translator(Arc::new(Slow));
    let mut deployment = Deployment::default();
    deployment.insert(engine);
    let cities = BTreeMap::from([(
        "testville".to_string(),
        CityInfo {
            language: "en".into(),
            index_path: None,
            photos_dir: None,
        },
    )]);
    let mut state = AppState::new(deployment, cities, SessionStore::new(Duration::from_secs(3600)));
    state.snapshot_path = snapshot;
    Ok(state)
}

async fn serve(state: AppState) -> Result<(String, Arc<AppState>), String> {
    let app = Arc::new(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    let r = router(Arc::clone(&app));
    tokio::spawn(async move { axum::serve(listener, r).await });
    Ok((base, app))
}

async fn service_async() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let snapshot = dir.path().join("sessions.jsonl");
    let (base, app) = serve(service_state(Some(snapshot.clone()))?).await?;
    let client = reqwest::Client::new();
    let n = 8;
    let mut sessions = Vec::new();
    for lang in ["de", "es"] {
        let body: serde_json::Value = client
            .post(format!("{base}/v1/sessions"))
            .json(&serde_json::json!({"city": "testville", "language": lang}))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        sessions.push(body["session_id"].as_str().ok_or("no session id")?.to_string());
    }
    let mut tasks = Vec::new();
    for id in &sessions {
        for _ in 0..n {
            let (client, url) = (client.clone(), format!("{base}/v1/sessions/{id}/turns"));
            tasks.push(tokio::spawn(async move {
                client
                    .post(url)
                    .json(&serde_json::json!({"text": "crispy fish tacos"}))
                    .send()
                    .await
                    .map(|r| r.status().as_u16())
            }));
        }
    }
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?);
    }
    for (i, chunk) in codes.chunks(n).enumerate() {
        let ok = chunk.iter().filter(|c| **c == 200).count();
        let busy = chunk.iter().filter(|c| **c == 409).count();
        ensure!(ok == 1 && busy == n - 1, "session {i}: codes {chunk:?}");
    }

    let get = |base: String, id: String| {
        let client = client.clone();
        async move {
            client
                .get(format!("{base}/v1/sessions/{id}"))
                .send()
                .await
                .map_err(|e| e.to_string())?
                .json::<SessionJson>()
                .await
                .map_err(|e| e.to_string())
        }
    };
    let before = get(base.clone(), sessions[0].clone()).await?;
    let saved = app.save_snapshot().await.map_err(|e| e.to_string())?;
    ensure!(saved == 2, "saved {saved} sessions");

    let restarted = service_state(None)?;
    let restored = restarted.sessions.load(&snapshot, |_| true).map_err(|e| e.to_string())?;
    let (base2, _) = serve(restarted).await?;
    let after = get(base2.clone(), sessions[0].clone()).await?;
    ensure!(
        after.entities_remaining == before.entities_remaining,
        "entities_remaining {:?} != {:?}",
        after.entities_remaining,
        before.entities_remaining
    );
    let turn: TurnJson = client
        .post(format!("{base2}/v1/sessions/{}/turns", sessions[0]))
        .json(&serde_json::json!({"text": "burritos"}))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    ensure!(!turn.entities_remaining.is_empty(), "no entities after restart");
    Ok(format!(
        "2 sessions x {n} concurrent turns: one 200 and {} 409s each; {restored} sessions restored, entities_remaining {:?}",
        n - 1,
        after.entities_remaining
    ))
}

fn service() -> Outcome {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(service_async())
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "flow math oracle", budget: Duration::from_secs(1), run: flow_math },
        Criterion { name: "monotonicity suite", budget: Duration::from_secs(30), run: monotonicity },
        Criterion { name: "retrieval learning", budget: Duration::from_secs(300), run: retrieval_learning },
        Criterion { name: "gradient correctness", budget: Duration::from_secs(60), run: gradients },
        Criterion { name: "exact-search oracle", budget: Duration::from_secs(60), run: exact_and_approx_search },
        Criterion { name: "photo scoring", budget: Duration::from_secs(60), run: photo_scoring },
        Criterion { name: "multilingual equivalence", budget: Duration::from_secs(60), run: multilingual },
        Criterion { name: "intent classifiers", budget: Duration::from_secs(60), run: intents },
        Criterion { name: "edinburgh-scale index", budget: Duration::from_secs(120), run: edinburgh_index },
        Criterion { name: "service concurrency and restart", budget: Duration::from_secs(60), run: service },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.budget => Err(format!("{detail}; over budget of {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {} ({:.2}s): {detail}", c.name, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({:.2}s): {detail}", c.name, took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
