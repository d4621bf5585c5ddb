mod common;

use proptest::prelude::*;
use vitp_autodiff::{Graph, Tensor};
use vitp_core::image::{patchify, unpatchify, Image};
use vitp_core::params::{Declarer, ParamStore};
use vitp_core::pipeline::{DropPlan, Vlm, VlmConfig};
use vitp_core::rng::{self, Purpose};
use vitp_core::vision::{VisionEncoder, VitConfig};

fn encoder(cfg: &VitConfig, seed: u64) -> (VisionEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, Purpose::Init, 0, 0);
    let enc = VisionEncoder::declare(cfg, &mut Declarer::create(&mut store, &mut r)).unwrap();
    (enc, store)
}

#[test]
fn patchify_examples() {
    let mut r = common::rng(1);
    let img = common::random_image(32, &mut r);
    let rows = patchify(&img, 8).unwrap();
    assert_eq!(rows.len(), 16 * 192);
    // row 5 is grid (1, 1): pixel (8, 8) opens it
    assert_eq!(&rows[5 * 192..5 * 192 + 3], &img.pixel(8, 8));
    assert!(unpatchify(&rows, 32, 32, 8).unwrap() == img);

    let small = common::random_image(8, &mut r);
    assert_eq!(patchify(&small, 8).unwrap(), small.data());
    assert!(patchify(&common::random_image(12, &mut r), 8).is_err());
}

#[test]
fn desk_shape_contract() {
    let cfg = VitConfig::default();
    let (enc, store) = encoder(&cfg, 0);
    let img = common::random_image(32, &mut common::rng(2));
    let v = enc.encode(&store, &img).unwrap();
    assert_eq!(v.tokens.shape(), &[16, 64]);
    assert_eq!(v.positions, (0..16).collect::<Vec<_>>());
    assert!(v.cls_used);
    assert!(v.tokens.all_finite());
    // CLS holds its own positional slot but never leaves the encoder
    assert_eq!(store.by_name("vit.pos").unwrap().shape(), &[17, 64]);
    assert!(enc.encode(&store, &common::random_image(16, &mut common::rng(2))).is_err());
}

#[test]
fn zero_image_zero_weights_give_zero_tokens() {
    let cfg = VitConfig::default();
    let (enc, mut store) = encoder(&cfg, 0);
    common::overwrite(&mut store, |_| true, |name, shape| {
        if name.ends_with(".g") { Tensor::full(shape, 1.0) } else { Tensor::zeros(shape) }
    });
    let v = enc.encode(&store, &Image::filled(32, 32, [0.0; 3])).unwrap();
    assert!(v.tokens.data().iter().all(|&x| x == 0.0));
}

#[test]
fn swapping_patches_swaps_embedding_rows() {
    let cfg = VitConfig::default();
    let (enc, store) = encoder(&cfg, 3);
    let img = common::random_image(32, &mut common::rng(4));
    let mut rows = patchify(&img, 8).unwrap();
    let (a, b) = (2usize, 13usize);
    for k in 0..192 {
        rows.swap(a * 192 + k, b * 192 + k);
    }
    let swapped = unpatchify(&rows, 32, 32, 8).unwrap();
    let embed = |im: &Image| {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, |_| false);
        let v = enc.patch_embed(&mut g, &p, &[im]).unwrap();
        g.value(v).clone()
    };
    let (e0, e1) = (embed(&img), embed(&swapped));
    for k in 0..16 {
        let src = if k == a { b } else if k == b { a } else { k };
        assert_eq!(e1.row(k), e0.row(src));
    }
}

#[test]
fn gradient_reaches_patch_embedding() {
    let cfg = VlmConfig::desk(40);
    let (vlm, store) = Vlm::init::<f32>(&cfg, 5).unwrap();
    let batch = common::random_batch(&cfg, 4, 6);
    let plans = vec![DropPlan::identity(16); 4];
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| true);
    let loss = vlm.batch_loss(&mut g, &p, &batch, &plans).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.tensor(p[vlm.vit.patch_weight()]);
    let norm: f64 = gw.to_f64_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0, "patch embedding received no gradient");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn token_count_depends_only_on_geometry(grid in 1usize..5, patch in prop::sample::select(vec![2usize, 4, 8]), seed in 0u64..100) {
        let cfg = VitConfig { image_size: grid * patch, patch_size: patch, embed_dim: 8, depth: 1, heads: 2, include_cls: seed % 2 == 0, mlp_ratio: 2 };
        let (enc, store) = encoder(&cfg, seed);
        let img = common::random_image(grid * patch, &mut common::rng(seed));
        let v = enc.encode(&store, &img).unwrap();
        prop_assert_eq!(v.tokens.rows(), grid * grid);
        prop_assert_eq!(cfg.num_tokens(), grid * grid);
    }
}
