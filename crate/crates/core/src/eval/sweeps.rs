//! Pretraining arms, data-efficiency tables and the ablation sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Result, VitpError};
use crate::pipeline::Vlm;
use crate::trainer::checkpoint::BackboneExport;
use crate::trainer::config::{FinetuneConfig, RunConfig};
use crate::trainer::pretrain::{pretrain, resolve_recipe, world_vocabulary};
use crate::recipe::RecipeArm;

use super::robustness::{robustness_eval, RobustnessReport, RobustnessSpec};
use super::segmentation::{finetune_segmentation, probe, FeatureSet, FinetuneOutcome, SegDataset};

pub const FRACTIONS: [f64; 5] = [1.0, 0.2, 0.1, 0.05, 0.02];
pub const DROP_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 0.9];
pub const LM_DEPTHS: [usize; 3] = [2, 4, 8];

/// Downstream train and test splits with their finetuning settings.
#[derive(Clone, Debug)]
pub struct Downstream {
    pub train: SegDataset,
    pub test: SegDataset,
    pub ft: FinetuneConfig,
}

impl Downstream {
    pub fn new(cfg: &RunConfig) -> Self {
        let f = &cfg.finetune;
        let size = cfg.model.image_size;
        Downstream {
            train: SegDataset::generate(f.train_size, size, cfg.data_seed, 0),
            test: SegDataset::generate(f.test_size, size, cfg.data_seed, 1),
            ft: f.clone(),
        }
    }

    pub fn finetune(&self, backbone: &BackboneExport, seed: u64, digest: &str) -> Result<FinetuneOutcome> {
        finetune_segmentation(backbone, &self.train, &self.test, &self.ft, seed, digest)
    }
}

/// The vision encoder as initialised for `seed`, before any training.
pub fn random_backbone(cfg: &RunConfig, seed: u64) -> Result<BackboneExport> {
    let vlm = cfg.model.vlm(world_vocabulary().len());
    let (_, params) = Vlm::init::<f32>(&vlm, seed)?;
    BackboneExport::from_params(&vlm.vit, &params)
}

/// Pretrains `cfg` from `seed` and extracts the encoder.
pub fn pretrained_backbone(cfg: &RunConfig, seed: u64) -> Result<BackboneExport> {
    cfg.validate()?;
    let spec = resolve_recipe(&cfg.recipe)?;
    let (ckpt, _) = pretrain(cfg, &spec, seed)?;
    BackboneExport::from_checkpoint(&ckpt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub metric: f64,
    /// Full-data metric minus this fraction's metric.
    pub drop: f64,
}

/// Finetunes on leading fractions of the train split; the full split is
/// always evaluated so drops are defined even when 1.0 is not requested.
pub fn data_efficiency_sweep(
    backbone: &BackboneExport,
    data: &Downstream,
    fractions: &[f64],
    seed: u64,
    digest: &str,
) -> Result<Vec<EfficiencyRow>> {
    let subsets = fractions
        .iter()
        .map(|&f| data.train.fraction(f))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<f64> = if data.ft.freeze_backbone {
        let train_f = FeatureSet::build(backbone, &data.train)?;
        let test_f = FeatureSet::build(backbone, &data.test)?;
        let full = probe(backbone.clone(), &train_f, &test_f, &data.ft, seed, digest)?.report.value;
        let mut out = vec![full];
        for s in &subsets {
            let sub = train_f.prefix(s.len());
            out.push(probe(backbone.clone(), &sub, &test_f, &data.ft, seed, digest)?.report.value);
        }
        out
    } else {
        let mut out = vec![data.finetune(backbone, seed, digest)?.report.value];
        for s in &subsets {
            out.push(finetune_segmentation(backbone, s, &data.test, &data.ft, seed, digest)?.report.value);
        }
        out
    };
    Ok(fractions
        .iter()
        .zip(&metrics[1..])
        .map(|(&fraction, &metric)| EfficiencyRow {
            fraction,
            metric,
            drop: metrics[0] - metric,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("arm,seed,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.arm, r.seed, r.metric, r.value);
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("arm,seed,metric,value") {
        return Err(VitpError::Format("sweep csv header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || VitpError::Format(format!("bad sweep row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(SweepRow {
                arm: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad())?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes through a sibling temp file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Mean value per arm for `metric`, arms in first-seen order.
pub fn arm_means(rows: &[SweepRow], metric: &str) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        match out.iter_mut().find(|(a, _, _)| *a == r.arm) {
            Some(e) => {
                e.1 += r.value;
                e.2 += 1;
            }
            None => out.push((r.arm.clone(), r.value, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

/// A small polyline chart of per-arm means in arm order.
pub fn svg_chart(title: &str, points: &[(String, f64)]) -> String {
    let (w, h, m) = (480.0, 300.0, 48.0);
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = points.len().max(2) - 1;
    let xy: Vec<(f64, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (m + (w - 2.0 * m) * i as f64 / n as f64, h - m - (h - 2.0 * m) * (p.1 - lo) / span))
        .collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"{m}\" y=\"24\" font-size=\"14\">{title}</text>\n"
    );
    let path: Vec<String> = xy.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"black\" points=\"{}\"/>", path.join(" "));
    for ((x, y), (label, v)) in xy.iter().zip(points) {
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\"/>");
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>", h - m + 16.0);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>", y - 8.0);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Steps,
    Vrl,
    LmDepth,
    Recipe,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [SweepKind::Steps, SweepKind::Vrl, SweepKind::LmDepth, SweepKind::Recipe];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Steps => "steps",
            SweepKind::Vrl => "vrl",
            SweepKind::LmDepth => "lm_depth",
            SweepKind::Recipe => "recipe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| VitpError::Config(format!("unknown sweep {s:?}")))
    }

    pub fn file_name(self) -> String {
        format!("sweep_{}.csv", self.name())
    }

    /// Named pretraining configs derived from `base`.
    pub fn arms(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            SweepKind::Steps => {
                let total = base.train.total_steps;
                let mut grid: Vec<u64> = [8, 4, 2, 1].iter().map(|d| (total / d).max(1)).collect();
                grid.dedup();
                grid.into_iter()
                    .map(|s| (format!("steps_{s}"), with(&|c| c.train.total_steps = s)))
                    .collect()
            }
            SweepKind::Vrl => DROP_RATIOS
                .iter()
                .map(|&r| {
                    (format!("r_{r}"), with(&|c| {
                        c.train.drop_ratio = r;
                        c.train.vrl = r > 0.0;
                    }))
                })
                .collect(),
            SweepKind::LmDepth => LM_DEPTHS
                .iter()
                .map(|&d| (format!("lm_depth_{d}"), with(&|c| c.model.lm_depth = d)))
                .collect(),
            SweepKind::Recipe => RecipeArm::ALL
                .iter()
                .map(|a| {
                    let recipe = format!("{}:{}", base.recipe, a.name());
                    (a.name().to_string(), with(&|c| c.recipe = recipe.clone()))
                })
                .collect(),
        }
    }
}

/// Outcome of one pretraining arm under one seed.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub miou: f64,
    pub robustness: Option<RobustnessReport>,
}

/// Pretrains, finetunes on the downstream split of `cfg`, and optionally
/// runs the corruption suite.
pub fn run_arm(arm: &str, cfg: &RunConfig, seed: u64, robust: Option<&RobustnessSpec>) -> Result<ArmResult> {
    let backbone = pretrained_backbone(cfg, seed)?;
    let data = Downstream::new(cfg);
    let out = data.finetune(&backbone, seed, &cfg.digest(seed))?;
    let robustness = robust
        .map(|spec| robustness_eval(&out, &data.test, spec, seed))
        .transpose()?;
    Ok(ArmResult {
        arm: arm.to_string(),
        seed,
        miou: out.report.value,
        robustness,
    })
}

/// Runs every arm of `kind` for every seed, arms in parallel.
pub fn run_sweep(kind: SweepKind, base: &RunConfig, seeds: &[u64], robust: Option<&RobustnessSpec>) -> Result<Vec<ArmResult>> {
    let jobs: Vec<(String, RunConfig, u64)> = kind
        .arms(base)
        .into_iter()
        .flat_map(|(a, c)| seeds.iter().map(move |&s| (a.clone(), c.clone(), s)))
        .collect();
    jobs.par_iter()
        .map(|(a, c, s)| run_arm(a, c, *s, robust))
        .collect()
}

pub fn sweep_rows(results: &[ArmResult]) -> Vec<SweepRow> {
    results
        .iter()
        .map(|r| SweepRow {
            arm: r.arm.clone(),
            seed: r.seed,
            metric: "mIoU".into(),
            value: r.miou,
        })
        .collect()
}

/// Runs the requested sweeps and writes `sweep_<name>.csv` plus an SVG
/// chart of the per-arm means into `out_dir`. The drop-ratio sweep also
/// writes its corruption gaps to `sweep_vrl_robustness.csv`.
pub fn ablation_sweeps(base: &RunConfig, kinds: &[SweepKind], seeds: &[u64], out_dir: &Path) -> Result<Vec<PathBuf>> {
    base.validate()?;
    let mut written = Vec::new();
    for &kind in kinds {
        let robust = (kind == SweepKind::Vrl).then(RobustnessSpec::default);
        let results = run_sweep(kind, base, seeds, robust.as_ref())?;
        let rows = sweep_rows(&results);
        let csv = out_dir.join(kind.file_name());
        write_atomic(&csv, rows_to_csv(&rows).as_bytes())?;
        written.push(csv);
        let svg = out_dir.join(format!("sweep_{}.svg", kind.name()));
        write_atomic(&svg, svg_chart(kind.name(), &arm_means(&rows, "mIoU")).as_bytes())?;
        written.push(svg);
        if robust.is_some() {
            let rrows: Vec<SweepRow> = results
                .iter()
                .filter_map(|r| {
                    r.robustness.as_ref().map(|rb| SweepRow {
                        arm: r.arm.clone(),
                        seed: r.seed,
                        metric: "delta_tp".into(),
                        value: rb.delta_tp,
                    })
                })
                .collect();
            let p = out_dir.join("sweep_vrl_robustness.csv");
            write_atomic(&p, rows_to_csv(&rrows).as_bytes())?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::config::Preset;

    #[test]
    fn arm_grids() {
        let base = RunConfig::preset(Preset::DeskDefault);
        assert_eq!(SweepKind::Vrl.arms(&base).len(), 5);
        assert_eq!(SweepKind::Recipe.arms(&base).len(), 5);
        let steps: Vec<u64> = SweepKind::Steps.arms(&base).iter().map(|a| a.1.train.total_steps).collect();
        assert_eq!(steps, vec![250, 500, 1000, 2000]);
        for (_, c) in SweepKind::Recipe.arms(&base) {
            resolve_recipe(&c.recipe).unwrap();
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![SweepRow { arm: "r_0.75".into(), seed: 3, metric: "mIoU".into(), value: 0.4125 }];
        assert_eq!(parse_csv(&rows_to_csv(&rows)).unwrap(), rows);
        assert!(svg_chart("t", &arm_means(&rows, "mIoU")).starts_with("<svg"));
    }
}
