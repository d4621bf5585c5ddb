//! Patch-level semantic segmentation on top of a pretrained encoder.

use rand::Rng;
use vitp_autodiff::{Graph, Tensor};

use crate::block::INIT_STD;
use crate::error::{Result, VitpError};
use crate::image::Image;
use crate::params::{Declarer, ParamStore};
use crate::recipe::synth::{RenderMode, SynthConfig, SyntheticWorld};
use crate::rng::{self, Purpose};
use crate::trainer::adamw::{adamw_step, adamw_step_with, AdamWConfig, OptimizerState};
use crate::trainer::checkpoint::BackboneExport;
use crate::trainer::config::FinetuneConfig;
use crate::vision::VisionEncoder;

use super::miou::{IouAccumulator, MiouResult};

/// Background plus one class per shape kind.
pub const NUM_CLASSES: usize = 4;

/// Encoder learning rate relative to the head when the backbone is not frozen.
pub const BACKBONE_LR_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegDataset {
    pub samples: Vec<SegSample>,
    pub image_size: usize,
}

impl SegDataset {
    /// Alternating optical and SAR renderings of random worlds.
    pub fn generate(n: usize, image_size: usize, seed: u64, split: u64) -> Self {
        let samples = (0..n)
            .map(|i| {
                let mode = if i % 2 == 0 { RenderMode::Optical } else { RenderMode::Sar };
                let cfg = SynthConfig {
                    image_size,
                    mode,
                    ..SynthConfig::default()
                };
                let mut r = rng::stream(seed, Purpose::Split, split, i as u64);
                let w = SyntheticWorld::random(cfg, &mut r);
                SegSample {
                    image: w.render(),
                    mask: w.class_mask(),
                }
            })
            .collect();
        SegDataset { samples, image_size }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `floor(fraction * len)` samples.
    pub fn fraction(&self, fraction: f64) -> Result<SegDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(VitpError::Eval(format!("fraction {fraction} outside (0, 1]")));
        }
        let n = (fraction * self.len() as f64 + 1e-9).floor() as usize;
        if n == 0 {
            return Err(VitpError::Eval(format!(
                "fraction {fraction} of {} samples leaves no example",
                self.len()
            )));
        }
        Ok(SegDataset {
            samples: self.samples[..n].to_vec(),
            image_size: self.image_size,
        })
    }
}

/// Majority class of every `patch x patch` block, grid row-major; ties go to the lower class.
pub fn patch_labels(mask: &[u8], size: usize, patch: usize) -> Vec<u8> {
    let g = size / patch;
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut counts = [0usize; 256];
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    counts[usize::from(mask[y * size + x])] += 1;
                }
            }
            let best = (0..256).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
            out.push(best as u8);
        }
    }
    out
}

/// Nearest-neighbour upsampling of patch labels to pixels.
pub fn upsample(labels: &[u8], size: usize, patch: usize) -> Vec<u8> {
    let g = size / patch;
    (0..size * size)
        .map(|i| labels[(i / size / patch) * g + (i % size) / patch])
        .collect()
}

/// Per-patch linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationHead {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
    pub classes: usize,
}

impl SegmentationHead {
    pub fn init(dim: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, Purpose::Head, 0, 0);
        SegmentationHead {
            w: Tensor::trunc_normal(&[dim, classes], INIT_STD, &mut r),
            b: Tensor::zeros(&[classes]),
            classes,
        }
    }

    /// Argmax class for every feature row.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let z = g.matmul(x, w)?;
        let z = g.add_bias(z, b)?;
        let v = g.value(z);
        Ok((0..v.rows())
            .map(|r| crate::decoder::argmax(v.row(r)) as u8)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_miou(r: &MiouResult, seed: u64, digest: &str) -> Self {
        EvalReport {
            metric: "mIoU".into(),
            value: r.miou,
            per_class: r.per_class.clone(),
            seed,
            config_digest: digest.to_string(),
        }
    }

    pub fn to_text(&self) -> String {
        let per: Vec<String> = self
            .per_class
            .iter()
            .map(|c| c.map_or("-".to_string(), |v| format!("{v}")))
            .collect();
        format!(
            "metric={}\nvalue={}\nper_class={}\nseed={}\nconfig_digest={}\n",
            self.metric,
            self.value,
            per.join(","),
            self.seed,
            self.config_digest
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let get = |k: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.strip_prefix(&format!("{k}=")).map(str::to_string))
                .ok_or_else(|| VitpError::Format(format!("report lacks {k}")))
        };
        let bad = |k: &str| VitpError::Format(format!("bad report field {k}"));
        let per_class = get("per_class")?
            .split(',')
            .map(|s| if s == "-" { Ok(None) } else { s.parse().map(Some).map_err(|_| bad("per_class")) })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            metric: get("metric")?,
            value: get("value")?.parse().map_err(|_| bad("value"))?,
            per_class,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            config_digest: get("config_digest")?,
        })
    }
}

/// Encoder features for every sample, one `[N, D]` tensor each.
pub fn encode_features(encoder: &VisionEncoder, params: &ParamStore<f32>, images: &[&Image]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        out.extend(encoder.encode_batch(params, chunk)?.into_iter().map(|v| v.tokens));
    }
    Ok(out)
}

/// Patch features and labels ready for head training.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<u8>>,
    pub masks: Vec<Vec<u8>>,
    pub image_size: usize,
    pub patch: usize,
}

impl FeatureSet {
    pub fn build(backbone: &BackboneExport, data: &SegDataset) -> Result<Self> {
        let enc = backbone.encoder()?;
        let images: Vec<&Image> = data.samples.iter().map(|s| &s.image).collect();
        let masks: Vec<Vec<u8>> = data.samples.iter().map(|s| s.mask.clone()).collect();
        Self::from_parts(&enc, &backbone.params, &images, masks, data.image_size)
    }

    pub fn from_parts(
        enc: &VisionEncoder,
        params: &ParamStore<f32>,
        images: &[&Image],
        masks: Vec<Vec<u8>>,
        image_size: usize,
    ) -> Result<Self> {
        let patch = enc.config().patch_size;
        Ok(FeatureSet {
            features: encode_features(enc, params, images)?,
            labels: masks.iter().map(|m| patch_labels(m, image_size, patch)).collect(),
            masks,
            image_size,
            patch,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn prefix(&self, n: usize) -> FeatureSet {
        FeatureSet {
            features: self.features[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            masks: self.masks[..n].to_vec(),
            image_size: self.image_size,
            patch: self.patch,
        }
    }

    /// Classes that occur in the patch labels.
    pub fn present_classes(&self, classes: usize) -> Vec<bool> {
        let mut p = vec![false; classes];
        for l in self.labels.iter().flatten() {
            p[usize::from(*l)] = true;
        }
        p
    }
}

/// Trains a linear head on frozen features with minibatches of images.
pub fn train_head(train: &FeatureSet, ft: &FinetuneConfig, classes: usize, seed: u64) -> Result<SegmentationHead> {
    if train.is_empty() {
        return Err(VitpError::Eval("empty training split".into()));
    }
    let dim = train.features[0].cols();
    let mut head = SegmentationHead::init(dim, classes, seed);
    let mut store = ParamStore::new();
    let w = store.insert("head.w", head.w.clone())?;
    let b = store.insert("head.b", head.b.clone())?;
    let mut opt = OptimizerState::new(&store);
    let adam = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let bs = ft.batch_size.min(train.len());
    for step in 1..=ft.steps {
        let mut r = rng::stream(seed, Purpose::Finetune, step, 0);
        let idx: Vec<usize> = (0..bs).map(|_| r.random_range(0..train.len())).collect();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for &i in &idx {
            rows.extend_from_slice(train.features[i].data());
            targets.extend(train.labels[i].iter().map(|&l| Some(usize::from(l))));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec2(targets.len(), dim, rows)?);
        let p = store.bind(&mut g, |_| true);
        let z = g.matmul(x, p[w])?;
        let z = g.add_bias(z, p[b])?;
        let loss = g.cross_entropy(z, &targets)?;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        let lr = ft.lr * 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / ft.steps as f64).cos());
        adamw_step(&mut store, &gs, &mut opt, lr, &adam)?;
    }
    head.w = store.get(w).clone();
    head.b = store.get(b).clone();
    Ok(head)
}

/// Pixel-level mIoU of `head` on `test`, counting only classes seen in training.
pub fn evaluate_head(head: &SegmentationHead, test: &FeatureSet, seen: &[bool]) -> Result<MiouResult> {
    let mut acc = IouAccumulator::new(head.classes);
    for (f, m) in test.features.iter().zip(&test.masks) {
        let pred = upsample(&head.predict(f)?, test.image_size, test.patch);
        acc.add(&pred, m)?;
    }
    Ok(acc.result(|c| seen[c]))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub head: SegmentationHead,
    pub backbone: BackboneExport,
    pub report: EvalReport,
    /// Classes present in the training split; the others are excluded from mIoU.
    pub seen: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Finetunes a segmentation head (and, unless frozen, the encoder) and
/// reports pixel mIoU on `test`.
pub fn finetune_segmentation(
    backbone: &BackboneExport,
    train: &SegDataset,
    test: &SegDataset,
    ft: &FinetuneConfig,
    seed: u64,
    digest: &str,
) -> Result<FinetuneOutcome> {
    let backbone = if ft.freeze_backbone {
        backbone.clone()
    } else {
        finetune_encoder(backbone, train, ft, seed)?
    };
    let train_f = FeatureSet::build(&backbone, train)?;
    let test_f = FeatureSet::build(&backbone, test)?;
    probe(backbone, &train_f, &test_f, ft, seed, digest)
}

/// Head training and evaluation on precomputed features of `backbone`.
pub fn probe(
    backbone: BackboneExport,
    train: &FeatureSet,
    test: &FeatureSet,
    ft: &FinetuneConfig,
    seed: u64,
    digest: &str,
) -> Result<FinetuneOutcome> {
    let head = train_head(train, ft, NUM_CLASSES, seed)?;
    let seen = train.present_classes(NUM_CLASSES);
    let warnings = seen
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(c, _)| format!("class {c} absent from the training split; excluded from mIoU"))
        .collect();
    let r = evaluate_head(&head, test, &seen)?;
    Ok(FinetuneOutcome {
        head,
        backbone,
        report: EvalReport::from_miou(&r, seed, digest),
        seen,
        warnings,
    })
}

/// Joint training of encoder and a throwaway linear head; the encoder is
/// updated at a tenth of the head learning rate.
fn finetune_encoder(backbone: &BackboneExport, train: &SegDataset, ft: &FinetuneConfig, seed: u64) -> Result<BackboneExport> {
    let mut params = backbone.params.clone();
    let enc = VisionEncoder::declare(&backbone.vit, &mut Declarer::attach(&mut params))?;
    let head = SegmentationHead::init(backbone.vit.embed_dim, NUM_CLASSES, seed);
    let n_backbone = params.len();
    let hw = params.insert("head.w", head.w)?;
    let hb = params.insert("head.b", head.b)?;
    let mut opt = OptimizerState::new(&params);
    let adam = AdamWConfig::default();
    let patch = backbone.vit.patch_size;
    let labels: Vec<Vec<u8>> = train
        .samples
        .iter()
        .map(|s| patch_labels(&s.mask, train.image_size, patch))
        .collect();
    let bs = ft.batch_size.min(train.len());
    for step in 1..=ft.steps {
        let mut r = rng::stream(seed, Purpose::Finetune, step, 1);
        let idx: Vec<usize> = (0..bs).map(|_| r.random_range(0..train.len())).collect();
        let images: Vec<&Image> = idx.iter().map(|&i| &train.samples[i].image).collect();
        let targets: Vec<Option<usize>> = idx
            .iter()
            .flat_map(|&i| labels[i].iter().map(|&l| Some(usize::from(l))))
            .collect();
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| true);
        let x = enc.forward(&mut g, &p, &images)?;
        let z = g.matmul(x, p[hw])?;
        let z = g.add_bias(z, p[hb])?;
        let loss = g.cross_entropy(z, &targets)?;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        let lr = ft.lr * 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / ft.steps as f64).cos());
        // The backbone moves ten times slower than the fresh head.
        let lr_of = |i: usize| if i < n_backbone { lr * BACKBONE_LR_SCALE } else { lr };
        adamw_step_with(&mut params, &gs, &mut opt, lr_of, &adam)?;
    }
    Ok(BackboneExport {
        vit: backbone.vit.clone(),
        params: params.subset("vit."),
    })
}
