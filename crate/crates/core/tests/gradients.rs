//! Central finite-difference checks of every hand-written backward pass.

use ndarray::Array2;
use polyfind_core::encoder::{EncoderConfig, EncoderModel, Stream};
use polyfind_core::featurizer::{FeatureSet, Vocab};
use polyfind_core::intent::{IntentClassifier, IntentKind};
use polyfind_core::photo::PhotoHead;

const H: f64 = 1e-6;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-8)
}

fn tiny_encoder(attention: bool) -> (Vocab, EncoderModel<f64>, Vec<(FeatureSet, FeatureSet)>) {
    let corpus = ["where is good pasta", "the pasta place is great", "cheap beer now", "beer is cheap here"];
    let vocab = Vocab::build(corpus, 1, 50).unwrap();
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
    let model = EncoderModel::new(cfg, &vocab).unwrap();
    let batch = vec![
        (vocab.featurize("where is good pasta"), vocab.featurize("the pasta place is great")),
        (vocab.featurize("cheap beer"), vocab.featurize("beer is cheap here")),
        (vocab.featurize("unseen words here"), vocab.featurize("great place")),
    ];
    (vocab, model, batch)
}

fn check_encoder(attention: bool) {
    let (_, mut model, batch) = tiny_encoder(attention);
    let (_, grads) = model.loss_and_gradients(&batch).unwrap();
    let analytic = grads.dense();

    let names: Vec<String> = model.dense_params_mut().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), analytic.len());
    for (t, (name, a)) in analytic.iter().enumerate() {
        assert_eq!(&names[t], name);
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = model.dense_params_mut()[t].1[i];
            model.dense_params_mut()[t].1[i] = orig + H;
            let up = model.batch_loss(&batch).unwrap();
            model.dense_params_mut()[t].1[i] = orig - H;
            let down = model.batch_loss(&batch).unwrap();
            model.dense_params_mut()[t].1[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let err = rel_err(a, &numeric);
        assert!(err < 1e-3, "attention={attention} {name}: rel err {err:e}");
    }

    for stream in [Stream::Unigram, Stream::Bigram] {
        let rows = grads.embedding_rows(stream).clone();
        assert!(!rows.is_empty());
        let mut all_a = Vec::new();
        let mut all_n = Vec::new();
        for (&id, g) in &rows {
            for j in 0..g.len() {
                let orig = model.embedding_row(stream, id)[j];
                model.embedding_row_mut(stream, id)[j] = orig + H;
                let up = model.batch_loss(&batch).unwrap();
                model.embedding_row_mut(stream, id)[j] = orig - H;
                let down = model.batch_loss(&batch).unwrap();
                model.embedding_row_mut(stream, id)[j] = orig;
                all_a.push(g[j]);
                all_n.push((up - down) / (2.0 * H));
            }
        }
        let err = rel_err(&all_a, &all_n);
        assert!(err < 1e-3, "attention={attention} {stream:?} embeddings: rel err {err:e}");
    }
}

#[test]
fn encoder_gradients_without_attention() {
    check_encoder(false);
}

#[test]
fn encoder_gradients_with_attention() {
    check_encoder(true);
}

#[test]
fn scale_gradient_matches_finite_difference() {
    for attention in [false, true] {
        let (_, mut model, batch) = tiny_encoder(attention);
        let (_, grads) = model.loss_and_gradients(&batch).unwrap();
        let c = model.scale();
        model.set_scale(c + H);
        let up = model.batch_loss(&batch).unwrap();
        model.set_scale(c - H);
        let down = model.batch_loss(&batch).unwrap();
        let numeric = (up - down) / (2.0 * H);
        let rel = (grads.scale - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-4, "dL/dC analytic {} numeric {numeric} rel {rel:e}", grads.scale);
    }
}

#[test]
fn photo_head_gradients() {
    let mut head = PhotoHead::<f64>::new(6, 5, 4, 2);
    let feats = Array2::from_shape_fn((3, 6), |(i, j)| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.3);
    let mut caps = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) % 3) as f64 - 0.8);
    for mut r in caps.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    let scale = 1.7;
    let (_, grads) = head.loss_and_gradients(feats.view(), caps.view(), scale).unwrap();
    for (t, (name, a)) in grads.dense().iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = head.params_mut()[t].1[i];
            head.params_mut()[t].1[i] = orig + H;
            let up = head.loss_and_gradients(feats.view(), caps.view(), scale).unwrap().0;
            head.params_mut()[t].1[i] = orig - H;
            let down = head.loss_and_gradients(feats.view(), caps.view(), scale).unwrap().0;
            head.params_mut()[t].1[i] = orig;
            *n = (up - down) / (2.0 * H);
        }
        let err = rel_err(a, &numeric);
        assert!(err < 1e-3, "photo head {name}: rel err {err:e}");
    }
}

#[test]
fn intent_classifier_gradients() {
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
        assert!(err < 1e-3, "intent {name}: rel err {err:e}");
    }
}
