mod common;

use proptest::prelude::*;
use rand::Rng;
use vitp_autodiff::gradcheck::relative_error;
use vitp_autodiff::{Graph, Tensor};
use vitp_core::params::{Declarer, ParamStore};
use vitp_core::pipeline::*;
use vitp_core::rng::{self, Purpose};
use vitp_core::tokenizer::EOS;
use vitp_core::vision::VisualTokens;
use vitp_core::VitpError;

fn tiny(vocab: usize, seed: u64) -> (VlmConfig, Vlm, ParamStore<f64>) {
    let cfg = common::tiny_vlm(vocab);
    let (vlm, store) = Vlm::init::<f64>(&cfg, seed).unwrap();
    (cfg, vlm, store)
}

#[test]
fn kept_count_examples() {
    assert_eq!(kept_count(16, 0.75).unwrap(), 4);
    assert_eq!(kept_count(10, 0.9).unwrap(), 1);
    assert_eq!(kept_count(10, 0.7).unwrap(), 3);
    assert_eq!(kept_count(7, 0.0).unwrap(), 7);
    assert!(matches!(kept_count(16, 1.0), Err(VitpError::DropRatio(_))));
    assert!(matches!(VrlConfig::new(-0.1, 0), Err(VitpError::DropRatio(_))));
    let p = DropPlan::draw(9, 0.0, &mut common::rng(0)).unwrap();
    assert!(p.is_identity());
    assert_eq!(p.kept, DropPlan::identity(9).kept);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn drop_plan_invariants(n in 1usize..=256, tenths in 0usize..10, seed in any::<u64>()) {
        let r = tenths as f64 / 10.0;
        // ceil((10 - t) n / 10) in integers
        let expect = ((10 - tenths) * n).div_ceil(10);
        let plan = DropPlan::draw(n, r, &mut common::rng(seed)).unwrap();
        prop_assert_eq!(plan.kept.len(), expect);
        prop_assert!(plan.kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.kept.iter().all(|&k| k < n));
        prop_assert_eq!(plan.original_len, n);
    }

    #[test]
    fn kept_rows_are_the_positional_rows(n in 1usize..40, tenths in 0usize..10, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let rows = Tensor::<f32>::from_fn(&[n, 5], |_| r.random_range(-1.0..1.0));
        let pos: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let cfg = VrlConfig::new(tenths as f64 / 10.0, 0).unwrap();
        let (kept, kept_pos, plan) = vrl_drop(&rows, &pos, &cfg, &mut r).unwrap();
        for (j, &k) in plan.kept.iter().enumerate() {
            prop_assert_eq!(kept.row(j).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            rows.row(k).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(kept_pos[j], pos[k]);
        }
    }
}

#[test]
fn keep_frequency_is_uniform() {
    let draws = 50_000;
    let mut counts = [0usize; 8];
    for d in 0..draws {
        let mut r = rng::stream(42, Purpose::Vrl, d, 0);
        for k in DropPlan::draw(8, 0.5, &mut r).unwrap().kept {
            counts[k] += 1;
        }
    }
    let sigma = (0.25 / draws as f64).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        let f = c as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 3.0 * sigma, "index {k} kept with frequency {f}");
    }
}

#[test]
fn projector_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng::stream(0, Purpose::Init, 0, 0);
    let proj = Projector::declare(&mut Declarer::create(&mut store, &mut r), 6, 6, 6).unwrap();
    let mut rr = common::rng(3);
    let v = VisualTokens {
        tokens: Tensor::from_fn(&[16, 6], |_| rr.random_range(0.1..1.0)),
        positions: (0..16).collect(),
        cls_used: true,
    };
    let out = proj.project(&store, &v).unwrap();
    assert_eq!(out.tokens.shape(), &[16, 6]);
    assert_eq!(out.positions, v.positions);

    common::overwrite(&mut store, |_| true, |_, s| Tensor::zeros(s));
    assert!(proj.project(&store, &v).unwrap().tokens.data().iter().all(|&x| x == 0.0));

    // identity weights on positive inputs stay in the linear region of ReLU
    common::overwrite(&mut store, |n| n.ends_with(".w"), |_, _| Tensor::identity(6));
    assert_eq!(proj.project(&store, &v).unwrap().tokens, v.tokens);

    let wrong = VisualTokens { tokens: Tensor::zeros(&[4, 5]), positions: (0..4).collect(), cls_used: false };
    assert!(proj.project(&store, &wrong).is_err());
}

#[test]
fn add_positional_examples() {
    let mut r = common::rng(4);
    let rows = Tensor::<f64>::from_fn(&[3, 4], |_| r.random_range(-1.0..1.0));
    let table = Tensor::<f64>::from_fn(&[6, 4], |_| r.random_range(-1.0..1.0));
    assert_eq!(add_positional(&rows, &[0, 1, 2], &Tensor::zeros(&[6, 4])).unwrap(), rows);
    let same = Tensor::<f64>::from_fn(&[2, 4], |i| rows.data()[i % 4]);
    let out = add_positional(&same, &[1, 5], &table).unwrap();
    for c in 0..4 {
        let d = out.at(1, c) - out.at(0, c);
        assert!((d - (table.at(5, c) - table.at(1, c))).abs() < 1e-15);
    }
    let back = add_positional(&add_positional(&rows, &[2, 0, 4], &table).unwrap(), &[2, 0, 4], &table.map(|v| -v)).unwrap();
    assert!(back.max_abs_diff(&rows) < 1e-15);
    assert!(add_positional(&rows, &[0, 1, 6], &table).is_err());
}

#[test]
fn assemble_examples() {
    let img = Tensor::<f64>::zeros(&[4, 3]);
    let text = Tensor::<f64>::full(&[6, 3], 1.0);
    let s = TextStream::from_ids(&[7, 8], &[9, 10, 11]).unwrap();
    assert_eq!(s.ids.len(), 6);
    let pos: Vec<usize> = (10..16).collect();
    let a = assemble(&img, &[0, 1, 2, 3], Some(&text), &pos, &s.targets).unwrap();
    assert_eq!(a.len(), 10);
    assert!(a.targets[..4].iter().all(Option::is_none));
    assert_eq!(&a.targets[4..], &[None, None, Some(9), Some(10), Some(11), Some(EOS)]);
    assert_eq!(a.positions, vec![0, 1, 2, 3, 10, 11, 12, 13, 14, 15]);
    assert!(matches!(TextStream::from_ids(&[7, 8], &[]), Err(VitpError::Degenerate(_))));
    assert!(assemble(&img, &[0, 1, 2, 3], None, &[], &[]).is_err());
}

#[test]
fn sft_gradient_matches_finite_differences_at_patch_weight() {
    let (cfg, vlm, store) = tiny(12, 1);
    let batch = common::random_batch(&cfg, 2, 2);
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| true);
    let plans = vec![DropPlan::identity(cfg.vit.num_tokens()); batch.len()];
    let loss = vlm.batch_loss(&mut g, &p, &batch, &plans).unwrap();
    let wid = vlm.vit.patch_weight();
    let analytic = g.backward(loss).unwrap().tensor(p[wid]);
    let eps = 1e-5;
    let mut r = common::rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let e = r.random_range(0..analytic.numel());
        let mut s = store.clone();
        s.get_mut(wid).data_mut()[e] += eps;
        let fp = vlm.sft_loss(&s, &batch).unwrap();
        s.get_mut(wid).data_mut()[e] -= 2.0 * eps;
        let fm = vlm.sft_loss(&s, &batch).unwrap();
        worst = worst.max(relative_error(analytic.data()[e], (fp - fm) / (2.0 * eps)));
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn zero_ratio_vrl_equals_sft_bitwise() {
    let (cfg, vlm, store) = tiny(12, 3);
    let batch = common::random_batch(&cfg, 3, 4);
    let sft = vlm.sft_loss(&store, &batch).unwrap();
    for s in 0..5 {
        let vrl = vlm.vrl_loss(&store, &batch, &VrlConfig::new(0.0, s).unwrap(), s).unwrap();
        assert_eq!(sft.to_bits(), vrl.to_bits());
    }
    assert_eq!(vlm.vrl_loss(&store, &batch, &VrlConfig::disabled(), 0).unwrap().to_bits(), sft.to_bits());
}

#[test]
fn vrl_shortens_and_is_reproducible() {
    let cfg = VlmConfig::desk(40);
    let (vlm, store) = Vlm::init::<f32>(&cfg, 0).unwrap();
    let vrl = VrlConfig::new(0.75, 11).unwrap();
    let plans = vlm.draw_plans(5, &vrl, 3).unwrap();
    assert!(plans.iter().all(|p| p.kept.len() == 4 && p.original_len == 16));
    assert_ne!(plans[0].kept, plans[1].kept, "examples should draw independent subsets");
    let batch = common::random_batch(&cfg, 2, 1);
    let a = vlm.vrl_loss(&store, &batch, &vrl, 3).unwrap();
    let b = vlm.vrl_loss(&store, &batch, &vrl, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn labels_under_the_mask_do_not_matter() {
    let (cfg, vlm, store) = tiny(12, 5);
    let mut r = common::rng(5);
    for _ in 0..10 {
        let batch = common::random_batch(&cfg, 2, r.random());
        let base = vlm.sft_loss(&store, &batch).unwrap();
        let perturbed: Vec<PreparedExample> = batch
            .iter()
            .map(|ex| {
                let t = &ex.text;
                let supervised: Vec<bool> = t.targets.iter().map(Option::is_some).collect();
                let labels: Vec<usize> = t.targets.iter().map(|x| x.unwrap_or_else(|| r.random_range(0..12))).collect();
                PreparedExample {
                    image: ex.image.clone(),
                    text: TextStream::from_labels(t.ids.clone(), &labels, &supervised, t.prompt_len).unwrap(),
                }
            })
            .collect();
        assert_eq!(vlm.sft_loss(&store, &perturbed).unwrap().to_bits(), base.to_bits());
    }
}

#[test]
fn duplicating_the_batch_keeps_the_mean() {
    let (cfg, vlm, store) = tiny(12, 6);
    let batch = common::random_batch(&cfg, 3, 6);
    let doubled: Vec<PreparedExample> = batch.iter().chain(&batch).cloned().collect();
    let a = vlm.sft_loss(&store, &batch).unwrap();
    let b = vlm.sft_loss(&store, &doubled).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn loss_matches_manual_negative_log_softmax() {
    let (cfg, vlm, store) = tiny(12, 7);
    let ex = PreparedExample {
        image: common::random_image(16, &mut common::rng(7)),
        text: TextStream::from_ids(&[5, 6], &[9]).unwrap(),
    };
    let seq = vlm.assemble_example(&store, &ex).unwrap();
    let targets = seq.targets.clone();
    let logits = vlm.lm.forward_logits(&store, &seq.into_embedding()).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for (row, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let z = logits.row(row);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[*t];
            count += 1.0;
        }
    }
    assert_eq!(count, 2.0);
    let got = vlm.sft_loss(&store, &[ex]).unwrap();
    assert!((got - total / count).abs() <= 1e-10, "{got} vs {}", total / count);
    let _ = cfg;
}

#[test]
fn untrained_loss_near_log_vocab() {
    let (cfg, vlm, store) = tiny(32, 8);
    let batch = common::random_batch(&cfg, 8, 8);
    let l = vlm.sft_loss(&store, &batch).unwrap();
    let ln_v = 32f64.ln();
    assert!((l - ln_v).abs() <= 0.1 * ln_v, "{l}");
}
