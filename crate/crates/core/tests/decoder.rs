mod common;

use rand::Rng;
use vitp_autodiff::{Graph, Tensor};
use vitp_core::decoder::{argmax, LanguageDecoder, LmConfig, SequenceEmbedding};
use vitp_core::params::{Declarer, ParamStore};
use vitp_core::rng::{self, Purpose};
use vitp_core::tokenizer::EOS;

fn cfg(depth: usize) -> LmConfig {
    LmConfig {
        vocab_size: 32,
        model_dim: 16,
        depth,
        heads: 4,
        max_sequence_len: 24,
        image_slots: 4,
        mlp_ratio: 2,
    }
}

fn model(c: &LmConfig, seed: u64) -> (LanguageDecoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, Purpose::Init, 0, 0);
    let lm = LanguageDecoder::declare(c, &mut Declarer::create(&mut store, &mut r)).unwrap();
    (lm, store)
}

fn rows(l: usize, d: usize, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(&[l, d], |_| r.random_range(-1.0..1.0))
}

fn seq(rows: Tensor<f64>) -> SequenceEmbedding<f64> {
    SequenceEmbedding { rows, targets: Vec::new(), positions: Vec::new() }
}

#[test]
fn causality_randomized() {
    let mut r = common::rng(7);
    for trial in 0..100 {
        let depth = 1 + trial % 3;
        let c = cfg(depth);
        let (lm, store) = model(&c, trial as u64);
        let l = r.random_range(2..=c.max_sequence_len);
        let x = rows(l, c.model_dim, &mut r);
        let t = r.random_range(0..l - 1);
        let k = r.random_range(1..l - t);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + k) * c.model_dim..(t + k + 1) * c.model_dim] {
            *v += r.random_range(0.5..2.0);
        }
        let a = lm.forward_logits(&store, &seq(x)).unwrap();
        let b = lm.forward_logits(&store, &seq(y)).unwrap();
        for row in 0..=t {
            assert_eq!(a.row(row), b.row(row), "trial {trial}: row {row} saw row {}", t + k);
        }
        assert_ne!(a.row(t + k), b.row(t + k));
    }
}

#[test]
fn shapes_determinism_and_length_limit() {
    let c = cfg(2);
    let (lm, store) = model(&c, 1);
    let mut r = common::rng(1);
    let one = lm.forward_logits(&store, &seq(rows(1, 16, &mut r))).unwrap();
    assert_eq!(one.shape(), &[1, 32]);
    let x = rows(9, 16, &mut r);
    let a = lm.forward_logits(&store, &seq(x.clone())).unwrap();
    let b = lm.forward_logits(&store, &seq(x)).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(lm.forward_logits(&store, &seq(rows(25, 16, &mut r))).is_err());
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let c = cfg(2);
    let (lm, store) = model(&c, 2);
    let mut r = common::rng(2);
    let ids: Vec<usize> = (0..20).map(|_| r.random_range(0..32)).collect();
    let mut g = Graph::<f64>::new();
    let p = store.bind(&mut g, |_| false);
    let pos: Vec<usize> = (4..24).collect();
    let x = lm.embed_text(&mut g, &p, &ids, &pos).unwrap();
    let logits = lm.forward_rows(&mut g, &p, x, &[20]).unwrap();
    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).chain([Some(EOS)]).collect();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let ln_v = 32f64.ln();
    let got = g.value(loss).item();
    assert!((got - ln_v).abs() <= 0.1 * ln_v, "loss {got} vs ln V {ln_v}");
}

/// Final norm emits a constant unit vector, and the tied table scores only `peak`.
fn peaked(peak: usize) -> (LanguageDecoder, ParamStore<f64>) {
    let c = cfg(1);
    let (lm, mut store) = model(&c, 3);
    common::overwrite(&mut store, |n| n == "lm.ln.g", |_, s| Tensor::zeros(s));
    common::overwrite(&mut store, |n| n == "lm.ln.b", |_, s| Tensor::from_fn(s, |i| if i == 0 { 1.0 } else { 0.0 }));
    common::overwrite(&mut store, |n| n == "lm.tok_emb", |_, s| {
        Tensor::from_fn(s, |i| if i == peak * 16 { 10.0 } else { 0.0 })
    });
    (lm, store)
}

#[test]
fn greedy_stops_at_eos() {
    let (lm, store) = peaked(EOS);
    let prefix = seq(rows(3, 16, &mut common::rng(4)));
    assert_eq!(lm.generate_greedy(&store, &prefix, 5).unwrap(), vec![EOS]);
}

#[test]
fn greedy_respects_budget() {
    let (lm, store) = peaked(7);
    let prefix = seq(rows(3, 16, &mut common::rng(4)));
    assert_eq!(lm.generate_greedy(&store, &prefix, 3).unwrap(), vec![7, 7, 7]);
    assert!(lm.generate_greedy(&store, &prefix, 0).is_err());
}

#[test]
fn greedy_first_token_is_last_row_argmax() {
    let c = cfg(2);
    let (lm, store) = model(&c, 5);
    let prefix = seq(rows(6, 16, &mut common::rng(5)));
    let logits = lm.forward_logits(&store, &prefix).unwrap();
    let out = lm.generate_greedy(&store, &prefix, 4).unwrap();
    assert_eq!(out[0], argmax(logits.row(5)));
}
