//! Run configuration: line-oriented `key=value` text over a named preset.

use sha2::{Digest, Sha256};

use crate::decoder::LmConfig;
use crate::error::{Result, VitpError};
use crate::pipeline::{VlmConfig, VrlConfig};
use crate::vision::VitConfig;

use super::schedule::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    DeskDefault,
    FullScale,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk-default" => Ok(Preset::DeskDefault),
            "paper-scale" => Ok(Preset::FullScale),
            _ => Err(VitpError::Config(format!("unknown preset {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::DeskDefault => "desk-default",
            Preset::FullScale => "paper-scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_cls: bool,
    pub mlp_ratio: usize,
    pub projector_hidden: usize,
    pub lm_dim: usize,
    pub lm_depth: usize,
    pub lm_heads: usize,
    pub max_text_len: usize,
}

impl ModelConfig {
    pub fn vit(&self) -> VitConfig {
        VitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            embed_dim: self.vit_dim,
            depth: self.vit_depth,
            heads: self.vit_heads,
            include_cls: self.vit_cls,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn vlm(&self, vocab_size: usize) -> VlmConfig {
        let vit = self.vit();
        let slots = vit.num_tokens();
        VlmConfig {
            vit,
            projector_hidden: self.projector_hidden,
            lm: LmConfig {
                vocab_size,
                model_dim: self.lm_dim,
                depth: self.lm_depth,
                heads: self.lm_heads,
                max_sequence_len: slots + self.max_text_len,
                image_slots: slots,
                mlp_ratio: self.mlp_ratio,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub drop_ratio: f64,
    pub vrl: bool,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            total_steps: self.total_steps,
            warmup_fraction: self.warmup_fraction,
        }
    }

    pub fn vrl_config(&self, seed: u64) -> VrlConfig {
        VrlConfig {
            drop_ratio: self.drop_ratio,
            enabled: self.vrl,
            stream: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub freeze_backbone: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// `desk`, `reference`, or a manifest path.
    pub recipe: String,
    /// Seeds the synthetic datasets; shared across training seeds.
    pub data_seed: u64,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let model = ModelConfig {
            image_size: 32,
            patch_size: 8,
            vit_dim: 64,
            vit_depth: 2,
            vit_heads: 4,
            vit_cls: true,
            mlp_ratio: 4,
            projector_hidden: 128,
            lm_dim: 64,
            lm_depth: 2,
            lm_heads: 4,
            max_text_len: 80,
        };
        let train = match p {
            Preset::DeskDefault => TrainConfig {
                base_lr: 3e-4,
                total_steps: 2000,
                warmup_fraction: 0.03,
                batch_size: 16,
                weight_decay: 0.01,
                grad_clip: 1.0,
                drop_ratio: 0.75,
                vrl: true,
                checkpoint_every: 500,
            },
            Preset::FullScale => TrainConfig {
                base_lr: 2e-5,
                total_steps: 8000,
                warmup_fraction: 0.0,
                batch_size: 128,
                weight_decay: 0.01,
                grad_clip: 1.0,
                drop_ratio: 0.75,
                vrl: true,
                checkpoint_every: 1000,
            },
        };
        RunConfig {
            preset: p,
            model,
            train,
            finetune: FinetuneConfig {
                steps: 500,
                lr: 1e-2,
                batch_size: 16,
                train_size: 400,
                test_size: 200,
                freeze_backbone: false,
            },
            recipe: "desk".into(),
            data_seed: 0,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| VitpError::Config(format!("bad value {v:?} for {key}")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let f = &mut self.finetune;
        match key {
            "image_size" => m.image_size = p(key, value)?,
            "patch_size" => m.patch_size = p(key, value)?,
            "vit_dim" => m.vit_dim = p(key, value)?,
            "vit_depth" => m.vit_depth = p(key, value)?,
            "vit_heads" => m.vit_heads = p(key, value)?,
            "vit_cls" => m.vit_cls = p(key, value)?,
            "mlp_ratio" => m.mlp_ratio = p(key, value)?,
            "projector_hidden" => m.projector_hidden = p(key, value)?,
            "lm_dim" => m.lm_dim = p(key, value)?,
            "lm_depth" => m.lm_depth = p(key, value)?,
            "lm_heads" => m.lm_heads = p(key, value)?,
            "max_text_len" => m.max_text_len = p(key, value)?,
            "base_lr" => t.base_lr = p(key, value)?,
            "total_steps" => t.total_steps = p(key, value)?,
            "warmup_fraction" => t.warmup_fraction = p(key, value)?,
            "batch_size" => t.batch_size = p(key, value)?,
            "weight_decay" => t.weight_decay = p(key, value)?,
            "grad_clip" => t.grad_clip = p(key, value)?,
            "drop_ratio" => t.drop_ratio = p(key, value)?,
            "vrl" => t.vrl = p(key, value)?,
            "checkpoint_every" => t.checkpoint_every = p(key, value)?,
            "ft_steps" => f.steps = p(key, value)?,
            "ft_lr" => f.lr = p(key, value)?,
            "ft_batch_size" => f.batch_size = p(key, value)?,
            "ft_train_size" => f.train_size = p(key, value)?,
            "ft_test_size" => f.test_size = p(key, value)?,
            "ft_freeze_backbone" => f.freeze_backbone = p(key, value)?,
            "recipe" => self.recipe = value.to_string(),
            "data_seed" => self.data_seed = p(key, value)?,
            "preset" => {
                return Err(VitpError::Config("preset is chosen on the command line".into()));
            }
            _ => return Err(VitpError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| VitpError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn parse(text: &str, preset: Preset) -> Result<Self> {
        let mut c = RunConfig::preset(preset);
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(0.0..1.0).contains(&t.drop_ratio) {
            return Err(VitpError::DropRatio(t.drop_ratio));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(VitpError::Config(format!("warmup_fraction {} outside [0, 1)", t.warmup_fraction)));
        }
        if t.total_steps == 0 || t.batch_size == 0 {
            return Err(VitpError::Config("total_steps and batch_size must be at least 1".into()));
        }
        if !(t.base_lr.is_finite() && t.base_lr >= 0.0) || !(t.grad_clip > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(VitpError::Config("base_lr, grad_clip and weight_decay must be non-negative (grad_clip positive)".into()));
        }
        let f = &self.finetune;
        if f.batch_size == 0 || f.train_size == 0 || f.test_size == 0 {
            return Err(VitpError::Config("finetune sizes must be at least 1".into()));
        }
        self.model.vlm(crate::tokenizer::IMG + 1).validate()
    }

    /// Canonical text: every key in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let f = &self.finetune;
        let rows: Vec<(&str, String)> = vec![
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("vit_dim", m.vit_dim.to_string()),
            ("vit_depth", m.vit_depth.to_string()),
            ("vit_heads", m.vit_heads.to_string()),
            ("vit_cls", m.vit_cls.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("projector_hidden", m.projector_hidden.to_string()),
            ("lm_dim", m.lm_dim.to_string()),
            ("lm_depth", m.lm_depth.to_string()),
            ("lm_heads", m.lm_heads.to_string()),
            ("max_text_len", m.max_text_len.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("drop_ratio", t.drop_ratio.to_string()),
            ("vrl", t.vrl.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("ft_steps", f.steps.to_string()),
            ("ft_lr", f.lr.to_string()),
            ("ft_batch_size", f.batch_size.to_string()),
            ("ft_train_size", f.train_size.to_string()),
            ("ft_test_size", f.test_size.to_string()),
            ("ft_freeze_backbone", f.freeze_backbone.to_string()),
            ("recipe", self.recipe.clone()),
            ("data_seed", self.data_seed.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Short hex digest of the canonical config, the preset and `seed`.
    pub fn digest(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(self.preset.name().as_bytes());
        h.update(b"\n");
        h.update(self.to_text().as_bytes());
        h.update(format!("seed={seed}\n").as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}
