mod common;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vitp_core::image::Image;
use vitp_core::recipe::corrupt::{corrupt, corrupt_with_magnitude, CorruptionKind};
use vitp_core::recipe::synth::*;
use vitp_core::recipe::*;
use vitp_core::rng::{self, Purpose};

fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn draw_counts(spec: &MixtureSpec, draws: u64, seed: u64) -> Vec<usize> {
    let s = MixtureSampler::new(spec).unwrap();
    let mut r = rng::stream(seed, Purpose::Batch, 0, 0);
    let mut counts = vec![0; spec.entries.len()];
    for _ in 0..draws {
        counts[s.sample(&mut r)] += 1;
    }
    counts
}

#[test]
fn reference_weights_match_rows() {
    let spec = reference_recipe();
    let w = |name: &str| spec.entries.iter().find(|e| e.name == name).unwrap().weight();
    assert_eq!(w("GeoChat"), 128_000.0);
    assert_eq!(w("VRSBench"), 190_000.0);
    let p = spec.probabilities().unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(validate_recipe(&spec, &Requirements::default()).all_pass());
}

#[test]
fn principle_failures() {
    let spec = reference_recipe();
    let no_general = spec.without_where(|e| e.has(TaskTag::General)).unwrap();
    let rep = validate_recipe(&no_general, &Requirements::default());
    assert!(!rep.generality);
    let single = MixtureSpec::new(vec![spec.entries[0].clone()]).unwrap();
    assert!(!validate_recipe(&single, &Requirements::default()).scale_diversity);
    let a = RecipeEntry::new("a", 10, 1.0, &[TaskTag::Vqa], "optical").unwrap();
    let b = RecipeEntry::new("b", 5, 2.0, &[TaskTag::Vqa], "optical").unwrap();
    assert_eq!(MixtureSpec::new(vec![a.clone(), b]).unwrap().probabilities().unwrap(), vec![0.5, 0.5]);
    let zero = RecipeEntry::new("z", 10, 0.0, &[TaskTag::Vqa], "optical").unwrap();
    assert!(MixtureSpec::new(vec![zero]).and_then(|s| s.probabilities()).is_err());
    assert!(RecipeEntry::new("e", 0, 1.0, &[TaskTag::Vqa], "optical").is_err());
    assert!(RecipeEntry::new("e", 1, 1.0, &[], "optical").is_err());
}

#[test]
fn reference_sampler_passes_chi_square() {
    let spec = reference_recipe();
    let counts = draw_counts(&spec, 100_000, 7);
    let p = chi_square_p(&counts, &spec.probabilities().unwrap());
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn five_entry_sampler_is_unbiased() {
    let entries = (0..5)
        .map(|i| RecipeEntry::new(&format!("d{i}"), 100 * (i + 1), 1.0 + i as f64, &[TaskTag::Vqa], "optical").unwrap())
        .collect();
    let spec = MixtureSpec::new(entries).unwrap();
    let counts = draw_counts(&spec, 100_000, 3);
    assert!(chi_square_p(&counts, &spec.probabilities().unwrap()) > 0.01);
}

#[test]
fn skewed_pair_within_three_sigma() {
    let a = RecipeEntry::new("a", 9, 1.0, &[TaskTag::Vqa], "optical").unwrap();
    let b = RecipeEntry::new("b", 1, 1.0, &[TaskTag::Vqa], "optical").unwrap();
    let spec = MixtureSpec::new(vec![a, b]).unwrap();
    let n = 100_000;
    let c = draw_counts(&spec, n, 5);
    let sigma = (0.09 / n as f64).sqrt();
    assert!((c[0] as f64 / n as f64 - 0.9).abs() <= 3.0 * sigma);
}

#[test]
fn batches_are_deterministic_and_need_handles() {
    let spec = desk_recipe();
    let ds: Vec<Option<SyntheticDataset>> = synthetic_datasets(&spec, 32, 0).into_iter().map(Some).collect();
    let a = step_batch(&spec, &ds, 1, 4, 6).unwrap();
    let b = step_batch(&spec, &ds, 1, 4, 6).unwrap();
    assert_eq!(a, b);
    let mut missing = ds.clone();
    missing[2] = None;
    let mut hit = false;
    for step in 0..50 {
        hit |= step_batch(&spec, &missing, 1, step, 16).is_err();
    }
    assert!(hit, "a draw from an entry without a dataset must fail");

    let single = MixtureSpec::new(vec![spec.entries[3].clone()]).unwrap();
    let one = synthetic_datasets(&single, 32, 0).into_iter().map(Some).collect::<Vec<_>>();
    assert!(step_batch(&single, &one, 0, 0, 8).unwrap().iter().all(|e| e.source == spec.entries[3].name));
}

#[test]
fn grounding_box_example() {
    let cfg = SynthConfig::default();
    let sq = PlacedShape { kind: ShapeKind::Square, color: Color::ALL[0], cell: (0, 0), x0: 8, y0: 8, extent: 8 };
    let w = SyntheticWorld::with_shapes(cfg, vec![sq], 0).unwrap();
    assert_eq!(w.pixel_box(0), (8, 8, 15, 15));
    assert_eq!(format_box(w.grounding_box(0)), "[25,25,46,46]");
    let empty = SyntheticWorld::with_shapes(cfg, vec![], 0).unwrap();
    assert_eq!(empty.caption(), "empty,empty,empty,empty");
}

#[test]
fn counting_disks() {
    let cfg = SynthConfig::default();
    let disk = |cell: (usize, usize)| PlacedShape {
        kind: ShapeKind::Disk,
        color: Color::ALL[1],
        cell,
        x0: cell.1 * 16 + 2,
        y0: cell.0 * 16 + 2,
        extent: 10,
    };
    let w = SyntheticWorld::with_shapes(cfg, vec![disk((0, 0)), disk((0, 1)), disk((1, 1))], 0).unwrap();
    let mut r = common::rng(0);
    let mut seen = false;
    for _ in 0..50 {
        if let Some((q, a)) = instruction(&w, Task::Vqa, &mut r) {
            if q == count_query(ShapeKind::Disk) {
                assert_eq!(a, "3");
                seen = true;
            }
        }
    }
    assert!(seen);
}

#[test]
fn grounding_answers_cover_their_shape() {
    let cfg = SynthConfig::default();
    for seed in 0..300u64 {
        let ex = synth_generate(seed, Task::Grounding, &cfg).unwrap();
        let b = parse_box(&ex.response).expect("grounding answer parses");
        // rebuild the world that produced the example
        let world = (0..1000u64)
            .map(|a| {
                let mut r = rng::stream(seed, Purpose::World, 0, a);
                let w = SyntheticWorld::random(cfg, &mut r);
                (w.clone(), instruction(&w, Task::Grounding, &mut r))
            })
            .find_map(|(w, i)| i.map(|_| w))
            .unwrap();
        let target = world
            .shapes
            .iter()
            .position(|s| grounding_query(s.color, s.kind) == ex.query)
            .unwrap();
        let owner = world.owner_mask();
        let (mut inside, mut total) = (0, 0);
        for y in 0..32 {
            for x in 0..32 {
                if owner[y * 32 + x] == Some(target) {
                    total += 1;
                    let (hx, hy) = (x * 100 / 32, y * 100 / 32);
                    if b[0] <= hx && hx <= b[2] && b[1] <= hy && hy <= b[3] {
                        inside += 1;
                    }
                }
            }
        }
        assert!(inside as f64 >= 0.9 * total as f64, "seed {seed}: {inside}/{total}");
    }
}

#[test]
fn generated_examples_are_well_formed() {
    let cfg = SynthConfig::default();
    for seed in 0..200 {
        for task in [Task::Caption, Task::Vqa, Task::Grounding, Task::Classification] {
            let ex = synth_generate(seed, task, &cfg).unwrap();
            assert!(!ex.response.is_empty());
            if task == Task::Grounding {
                assert!(parse_box(&ex.response).is_some());
            }
        }
    }
}

#[test]
fn worlds_partition_pixels() {
    let mut r = common::rng(1);
    for _ in 0..100 {
        let w = SyntheticWorld::random(SynthConfig::default(), &mut r);
        let owner = w.owner_mask();
        for (i, s) in w.shapes.iter().enumerate() {
            for y in 0..32 {
                for x in 0..32 {
                    if s.covers(x, y) {
                        assert_eq!(owner[y * 32 + x], Some(i));
                    }
                }
            }
        }
    }
}

#[test]
fn zero_magnitude_is_identity() {
    let img = common::random_image(32, &mut common::rng(2));
    for kind in CorruptionKind::ALL {
        let (out, _) = corrupt_with_magnitude(&img, None, kind, 0.0, &mut common::rng(3));
        assert!(out == img, "{}", kind.name());
    }
    assert!(CorruptionKind::parse("fog").is_err());
}

#[test]
fn salt_pepper_flips_five_percent() {
    let img = Image::filled(32, 32, [0.5; 3]);
    let out = corrupt(&img, CorruptionKind::SaltPepper, 2, &mut common::rng(4)).unwrap();
    let flipped = (0..32)
        .flat_map(|y| (0..32).map(move |x| (y, x)))
        .filter(|&(y, x)| out.pixel(y, x) != [0.5; 3])
        .count();
    assert_eq!(flipped, (0.05f64 * 1024.0).round() as usize);
    assert!(out.data().iter().all(|&v| v == 0.0 || v == 0.5 || v == 1.0));
}

#[test]
fn data_gaps_area_grows() {
    let img = Image::filled(32, 32, [0.7; 3]);
    let mut areas = Vec::new();
    for s in 1..=3 {
        let out = corrupt(&img, CorruptionKind::DataGaps, s, &mut common::rng(5)).unwrap();
        areas.push(out.data().chunks(3).filter(|p| p.iter().all(|&v| v == 0.0)).count());
    }
    assert!(areas[0] > 0 && areas[0] < areas[1] && areas[1] < areas[2], "{areas:?}");
}

#[test]
fn corruption_energy_is_monotone_in_severity() {
    let mut r = common::rng(6);
    let images: Vec<Image> = (0..100)
        .map(|_| SyntheticWorld::random(SynthConfig::default(), &mut r).render())
        .collect();
    for kind in CorruptionKind::ALL {
        let mut mse = [0.0; 3];
        for (i, img) in images.iter().enumerate() {
            for s in 1..=3u8 {
                let mut cr = rng::stream(9, Purpose::Corrupt, i as u64, 0);
                let out = corrupt(img, kind, s, &mut cr).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                mse[usize::from(s) - 1] += img.mse(&out) / images.len() as f64;
            }
        }
        assert!(mse[0] <= mse[1] && mse[1] <= mse[2], "{}: {mse:?}", kind.name());
    }
}

#[test]
fn translate_moves_the_mask() {
    let cfg = SynthConfig::default();
    let sq = PlacedShape { kind: ShapeKind::Square, color: Color::ALL[2], cell: (0, 0), x0: 4, y0: 4, extent: 8 };
    let w = SyntheticWorld::with_shapes(cfg, vec![sq], 0).unwrap();
    let mask = w.class_mask();
    let mut r = common::rng(7);
    let (_, moved) = corrupt_with_magnitude(&w.render(), Some(&mask), CorruptionKind::Translate, 2.0, &mut r);
    let moved = moved.unwrap();
    assert_eq!(moved.iter().filter(|&&c| c != 0).count(), mask.iter().filter(|&&c| c != 0).count());
    assert_ne!(moved, mask);
    let _ = r.random::<u8>();
}
