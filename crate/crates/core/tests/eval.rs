mod common;

use std::collections::HashSet;

use common::{rng, tiny_run};
use proptest::prelude::*;
use rand::Rng;
use vitp_core::eval::sweeps::{
    ablation_sweeps, data_efficiency_sweep, parse_csv, pretrained_backbone, random_backbone, Downstream, SweepKind,
    FRACTIONS,
};
use vitp_core::eval::{
    evaluate_miou, finetune_segmentation, patch_labels, robustness_eval, upsample, EvalReport, IouAccumulator,
    RobustnessSpec, SegDataset, NUM_CLASSES,
};
use vitp_core::eval::segmentation::evaluate_head;
use vitp_core::eval::FeatureSet;
use vitp_core::trainer::checkpoint::HeadExport;
use vitp_core::trainer::config::RunConfig;

/// Per-class IoU from explicit pixel-index sets.
fn brute_miou(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let set = |m: &[Vec<u8>]| -> HashSet<(usize, usize)> {
            m.iter()
                .enumerate()
                .flat_map(|(i, v)| v.iter().enumerate().filter(|(_, &x)| x == c).map(move |(j, _)| (i, j)))
                .collect()
        };
        let (p, g) = (set(pred), set(gt));
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn miou_matches_brute_force(seed in any::<u64>(), classes in 2usize..6, images in 1usize..4) {
        let mut r = rng(seed);
        let mut mask = || (0..256).map(|_| r.random_range(0..classes as u8)).collect::<Vec<u8>>();
        let pred: Vec<Vec<u8>> = (0..images).map(|_| mask()).collect();
        let gt: Vec<Vec<u8>> = (0..images).map(|_| mask()).collect();
        let got = evaluate_miou(&pred, &gt, classes).unwrap();
        prop_assert_eq!(Some(got.miou), brute_miou(&pred, &gt, classes));
    }
}

#[test]
fn miou_examples_and_errors() {
    let gt = vec![vec![0u8, 1, 2, 3, 1, 1, 0, 0]];
    assert_eq!(evaluate_miou(&gt, &gt, 4).unwrap().miou, 1.0);
    let r = evaluate_miou(&[vec![1u8, 1, 0, 0]], &[vec![0u8, 0, 1, 1]], 2).unwrap();
    assert_eq!(r.miou, 0.0);
    let half = evaluate_miou(&[vec![1u8, 1, 0, 0]], &[vec![0u8, 1, 1, 0]], 2).unwrap();
    assert_eq!(half.per_class[1], Some(1.0 / 3.0));
    // Class 3 never appears in either mask and is left out.
    let absent = evaluate_miou(&[vec![0u8, 1]], &[vec![0u8, 1]], 4).unwrap();
    assert_eq!(absent.per_class[3], None);
    assert_eq!(absent.miou, 1.0);
    assert!(evaluate_miou(&[vec![0u8, 1]], &[vec![0u8]], 2).is_err());
    assert!(evaluate_miou(&[vec![0u8, 5]], &[vec![0u8, 1]], 2).is_err());
    let mut acc = IouAccumulator::new(2);
    assert!(acc.add(&[0, 1], &[0]).is_err());
}

#[test]
fn patch_labels_and_upsampling() {
    // 4x4 mask, patch 2: majority per block, ties to the lower class.
    let mask = vec![
        1, 1, 0, 2, //
        1, 0, 2, 0, //
        3, 3, 0, 0, //
        0, 0, 1, 0,
    ];
    assert_eq!(patch_labels(&mask, 4, 2), vec![1, 0, 0, 0]);
    let up = upsample(&[1, 2, 3, 0], 4, 2);
    assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 0, 0, 3, 3, 0, 0]);
}

fn small_cfg() -> RunConfig {
    let mut c = tiny_run(8);
    c.set("image_size", "32").unwrap();
    c
}

#[test]
fn oracle_head_input_scores_perfectly_and_fractions_validate() {
    let data = SegDataset::generate(10, 32, 4, 0);
    let masks: Vec<Vec<u8>> = data.samples.iter().map(|s| s.mask.clone()).collect();
    assert_eq!(evaluate_miou(&masks, &masks, NUM_CLASSES).unwrap().miou, 1.0);
    assert_eq!(data.fraction(0.5).unwrap().len(), 5);
    assert_eq!(data.fraction(1.0).unwrap(), data);
    assert!(data.fraction(0.0).is_err());
    assert!(data.fraction(1.5).is_err());
    assert!(data.fraction(0.05).is_err());
    assert_eq!(SegDataset::generate(10, 32, 4, 0), data);
    assert_ne!(SegDataset::generate(10, 32, 4, 1), data);
}

#[test]
fn frozen_finetune_leaves_backbone_bitwise() {
    let mut cfg = small_cfg();
    cfg.finetune.freeze_backbone = true;
    let data = Downstream::new(&cfg);
    let b = random_backbone(&cfg, 0).unwrap();
    let out = data.finetune(&b, 0, "d").unwrap();
    assert!(out.backbone.params.bitwise_eq(&b.params));

    cfg.finetune.freeze_backbone = false;
    let moved = Downstream::new(&cfg).finetune(&b, 0, "d").unwrap();
    assert!(!moved.backbone.params.bitwise_eq(&b.params));

    let saved = HeadExport {
        head: moved.head.clone(),
        seen: moved.seen.clone(),
    };
    let back = HeadExport::from_bytes(&saved.to_bytes()).unwrap();
    assert_eq!(back, saved);
    let test = FeatureSet::build(&moved.backbone, &data.test).unwrap();
    let again = evaluate_head(&back.head, &test, &back.seen).unwrap();
    assert_eq!(EvalReport::from_miou(&again, 0, "d"), moved.report);
    assert!(HeadExport::from_bytes(&moved.backbone.to_bytes()).is_err());
}

#[test]
fn reports_reproduce_by_seed_and_digest() {
    let cfg = small_cfg();
    let data = Downstream::new(&cfg);
    let b = random_backbone(&cfg, 1).unwrap();
    let digest = cfg.digest(1);
    let a = finetune_segmentation(&b, &data.train, &data.test, &data.ft, 1, &digest).unwrap().report;
    let again = finetune_segmentation(&b, &data.train, &data.test, &data.ft, 1, &digest).unwrap().report;
    assert_eq!(a.to_text(), again.to_text());
    assert_eq!(EvalReport::from_text(&a.to_text()).unwrap(), a);
    assert_eq!((a.metric.as_str(), a.seed, a.config_digest.as_str()), ("mIoU", 1, digest.as_str()));
    assert!((0.0..=1.0).contains(&a.value));
}

#[test]
fn identity_corruptions_have_zero_gap() {
    let cfg = small_cfg();
    let data = Downstream::new(&cfg);
    let out = data.finetune(&random_backbone(&cfg, 0).unwrap(), 0, "d").unwrap();
    let spec = RobustnessSpec {
        magnitude_scale: 0.0,
        ..RobustnessSpec::default()
    };
    let r = robustness_eval(&out, &data.test, &spec, 0).unwrap();
    assert_eq!(r.per_corruption.len(), 6);
    assert!(r.per_corruption.iter().all(|(_, v)| *v == r.clean));
    assert!(r.delta_tp.abs() < 1e-12);
    assert_eq!(r.clean, out.report.value);
    assert!(RobustnessSpec::parse(&["fog"], &[1]).is_err());
    assert!(RobustnessSpec::parse(&["gaussian_noise"], &[4]).is_err());
}

#[test]
fn efficiency_sweep_full_row_matches_plain_finetune() {
    let cfg = small_cfg();
    let data = Downstream::new(&cfg);
    let b = pretrained_backbone(&cfg, 0).unwrap();
    let rows = data_efficiency_sweep(&b, &data, &[1.0, 0.5], 0, "d").unwrap();
    let plain = data.finetune(&b, 0, "d").unwrap().report.value;
    assert_eq!(rows[0].metric, plain);
    assert_eq!(rows[0].drop, 0.0);
    assert_eq!(rows[1].drop, plain - rows[1].metric);
    // 2% of 24 images is empty.
    assert!(data_efficiency_sweep(&b, &data, &FRACTIONS, 0, "d").is_err());
}

#[test]
fn drop_ratio_sweep_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.train.total_steps = 2;
    cfg.finetune.test_size = 4;
    let files = ablation_sweeps(&cfg, &[SweepKind::Vrl], &[0], dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let rows = parse_csv(&std::fs::read_to_string(dir.path().join("sweep_vrl.csv")).unwrap()).unwrap();
    let arms: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(arms, ["r_0", "r_0.25", "r_0.5", "r_0.75", "r_0.9"]);
    assert!(rows.iter().all(|r| r.metric == "mIoU" && (0.0..=1.0).contains(&r.value)));
    let gaps = parse_csv(&std::fs::read_to_string(dir.path().join("sweep_vrl_robustness.csv")).unwrap()).unwrap();
    assert_eq!(gaps.len(), 5);
    assert!(std::fs::read_to_string(dir.path().join("sweep_vrl.svg")).unwrap().contains("<svg"));
}

#[test]
fn recipe_sweep_has_the_five_arms() {
    let base = RunConfig::preset(vitp_core::trainer::config::Preset::DeskDefault);
    let names: Vec<String> = SweepKind::Recipe.arms(&base).into_iter().map(|a| a.0).collect();
    assert_eq!(names, ["full", "wo_diversity", "wo_sar", "wo_grounding", "wo_general"]);
    let lm: Vec<usize> = SweepKind::LmDepth.arms(&base).iter().map(|a| a.1.model.lm_depth).collect();
    assert_eq!(lm, [2, 4, 8]);
    assert!(SweepKind::parse("nope").is_err());
}
