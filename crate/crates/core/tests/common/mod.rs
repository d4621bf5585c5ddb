#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitp_autodiff::{Element, Tensor};
use vitp_core::decoder::LmConfig;
use vitp_core::image::Image;
use vitp_core::params::ParamStore;
use vitp_core::pipeline::{PreparedExample, TextStream, VlmConfig};
use vitp_core::vision::VitConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(size: usize, r: &mut impl Rng) -> Image {
    Image::new(size, size, (0..size * size * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// 16x16 images, patch 8: four tokens, small widths.
pub fn tiny_vlm(vocab: usize) -> VlmConfig {
    let vit = VitConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        include_cls: true,
        mlp_ratio: 2,
    };
    let n = vit.num_tokens();
    VlmConfig {
        vit,
        projector_hidden: 12,
        lm: LmConfig {
            vocab_size: vocab,
            model_dim: 8,
            depth: 1,
            heads: 2,
            max_sequence_len: n + 12,
            image_slots: n,
            mlp_ratio: 2,
        },
    }
}

/// A batch of random examples with short token streams over `vocab` ids.
pub fn random_batch(cfg: &VlmConfig, b: usize, seed: u64) -> Vec<PreparedExample> {
    let mut r = rng(seed);
    (0..b)
        .map(|_| {
            let q: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(4..cfg.lm.vocab_size)).collect();
            let a: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(4..cfg.lm.vocab_size)).collect();
            PreparedExample {
                image: random_image(cfg.vit.image_size, &mut r),
                text: TextStream::from_ids(&q, &a).unwrap(),
            }
        })
        .collect()
}

/// Overwrites every parameter whose name passes `pick` with `f(name, shape)`.
pub fn overwrite<T: Element>(store: &mut ParamStore<T>, pick: impl Fn(&str) -> bool, f: impl Fn(&str, &[usize]) -> Tensor<T>) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| pick(n))
        .map(|(id, n, t)| (id, n.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        store.set(id, f(&name, &shape)).unwrap();
    }
}

/// A desk run shrunk to 16x16 images and width 16 so full training loops finish in seconds.
pub fn tiny_run(steps: u64) -> vitp_core::trainer::config::RunConfig {
    use vitp_core::trainer::config::{Preset, RunConfig};
    let mut c = RunConfig::preset(Preset::DeskDefault);
    for (k, v) in [
        ("image_size", "16"),
        ("vit_dim", "16"),
        ("vit_depth", "1"),
        ("vit_heads", "2"),
        ("projector_hidden", "16"),
        ("lm_dim", "16"),
        ("lm_depth", "1"),
        ("lm_heads", "2"),
        ("batch_size", "4"),
        ("base_lr", "1e-3"),
        ("ft_steps", "20"),
        ("ft_train_size", "24"),
        ("ft_test_size", "12"),
        ("ft_batch_size", "4"),
    ] {
        c.set(k, v).unwrap();
    }
    c.train.total_steps = steps;
    c.train.checkpoint_every = (steps / 2).max(1);
    c
}
