use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vitp_autodiff::gradcheck::run_suite;
use vitp_core::eval::segmentation::evaluate_head;
use vitp_core::eval::sweeps::{ablation_sweeps, random_backbone, write_atomic, Downstream, SweepKind};
use vitp_core::eval::{robustness_eval, EvalReport, FeatureSet, FinetuneOutcome, RobustnessSpec};
use vitp_core::recipe::{validate_recipe, Requirements};
use vitp_core::trainer::checkpoint::HeadExport;
use vitp_core::trainer::pretrain::{read_curve, resolve_recipe, save_curve, Outputs, Pretrainer};
use vitp_core::trainer::{BackboneExport, Checkpoint, Preset, RunConfig};
use vitp_core::VitpError;

use vitp_cli::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "vitp", version, about = "Visual instruction pretraining of a small ViT, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// File of key=value lines applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Determines all randomness of the command.
    #[arg(long)]
    seed: u64,
    /// Root under which `<digest>/` run directories are created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value = "desk-default", value_parser = Preset::parse)]
    preset: Preset,
    /// Single override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the VLM and save checkpoints plus the loss curve.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint; the config must match the one it was trained with.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract the vision encoder from a checkpoint.
    Export {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finetune a backbone for segmentation and report mIoU.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's exported backbone.
        #[arg(long, conflicts_with = "random")]
        backbone: Option<PathBuf>,
        /// Start from a randomly initialised encoder instead.
        #[arg(long)]
        random: bool,
    },
    /// Re-evaluate a finetuned backbone and head, clean and corrupted.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `pretrained` or `random`; picks the default backbone and head files.
        #[arg(long, default_value = "pretrained")]
        label: String,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Run ablation sweeps and write one CSV per sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// steps, vrl, lm_depth or recipe; repeatable.
        #[arg(long = "kind", required = true, value_parser = SweepKind::parse)]
        kinds: Vec<SweepKind>,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(self.preset);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| VitpError::Config(format!("--set {kv:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.join(cfg.digest(self.seed))
    }
}

fn rel(parts: &[&str]) -> PathBuf {
    parts.iter().collect()
}

fn write_config(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# preset {}\n{}", cfg.preset.name(), cfg.to_text());
    write_atomic(&run_dir.join("manifest").join("config.txt"), text.as_bytes())?;
    Ok(())
}

fn pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let seed = common.seed;
    let spec = resolve_recipe(&cfg.recipe)?;
    let report = validate_recipe(&spec, &Requirements::default());
    for note in &report.notes {
        eprintln!("warning: recipe {}: {note}", cfg.recipe);
    }
    let resumed = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.seed != seed || ckpt.config != cfg {
                return Err(VitpError::Config(format!(
                    "{} was trained with seed {} and config digest {}; this command has seed {seed} and digest {}",
                    p.display(),
                    ckpt.seed,
                    ckpt.config.digest(ckpt.seed),
                    cfg.digest(seed)
                ))
                .into());
            }
            Some(ckpt)
        }
        None => None,
    };

    let run_dir = common.run_dir(&cfg);
    let digest = cfg.digest(seed);
    let every = cfg.train.checkpoint_every;
    let mut planned = vec![rel(&["manifest", "config.txt"]), rel(&["curves", "loss.csv"]), rel(&["ckpt", "final.ckpt"])];
    if every > 0 {
        for k in 1..=cfg.train.total_steps / every {
            planned.push(rel(&["ckpt", &format!("step{:06}.ckpt", k * every)]));
        }
    }
    let manifest = RunManifest::begin(&run_dir, "pretrain", &digest, seed, planned)?;
    write_config(&run_dir, &cfg)?;

    let curve_path = run_dir.join("curves").join("loss.csv");
    let (mut trainer, mut curve) = match &resumed {
        Some(ckpt) => {
            let earlier = match std::fs::read_to_string(&curve_path) {
                Ok(text) => read_curve(&text)?.into_iter().filter(|p| p.step <= ckpt.step).collect(),
                Err(_) => Vec::new(),
            };
            (Pretrainer::resume(ckpt, &spec)?, earlier)
        }
        None => (Pretrainer::new(&cfg, &spec, seed)?, Vec::new()),
    };
    let out = Outputs {
        checkpoint_dir: Some(run_dir.join("ckpt")),
    };
    let total = cfg.train.total_steps;
    let chunk = (total / 20).max(1);
    eprintln!("pretraining {digest} from step {} to {total}", trainer.step);
    while trainer.step < total {
        let until = (trainer.step + chunk).min(total);
        match trainer.run(Some(until), &out) {
            Ok(points) => {
                let mean = points.iter().map(|p| p.loss).sum::<f64>() / points.len().max(1) as f64;
                eprintln!("step {until:>6}  loss {mean:.4}");
                curve.extend(points);
            }
            Err(e) => {
                save_curve(&curve_path, &curve)?;
                let extra = match &e {
                    VitpError::Diverged { checkpoint: Some(_), .. } => vec![rel(&["ckpt", "last_finite.ckpt"])],
                    _ => Vec::new(),
                };
                manifest.finish(&run_dir, extra)?;
                return Err(e.into());
            }
        }
    }
    save_curve(&curve_path, &curve)?;
    trainer.checkpoint().save(&run_dir.join("ckpt").join("final.ckpt"))?;
    manifest.finish(&run_dir, [])?;
    println!("{}", run_dir.display());
    Ok(())
}

fn export(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => common.run_dir(&common.run_config()?).join("ckpt").join("final.ckpt"),
    };
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let digest = ckpt.config.digest(ckpt.seed);
    let run_dir = common.out.join(&digest);
    let target = rel(&["ckpt", "backbone.bin"]);
    let manifest = RunManifest::begin(&run_dir, "export", &digest, ckpt.seed, vec![target.clone()])?;
    BackboneExport::from_checkpoint(&ckpt)?.save(&run_dir.join(&target))?;
    manifest.finish(&run_dir, [])?;
    println!("{}", run_dir.join(target).display());
    Ok(())
}

fn finetune(common: &Common, backbone: Option<&Path>, random: bool) -> Result<()> {
    let cfg = common.run_config()?;
    let run_dir = common.run_dir(&cfg);
    let digest = cfg.digest(common.seed);
    let (label, b) = if random {
        ("random", random_backbone(&cfg, common.seed)?)
    } else {
        let p = backbone.map_or_else(|| run_dir.join("ckpt").join("backbone.bin"), Path::to_path_buf);
        ("pretrained", BackboneExport::load(&p).with_context(|| format!("loading {}", p.display()))?)
    };
    let report_path = rel(&["reports", &format!("finetune_{label}.txt")]);
    let backbone_path = rel(&["ckpt", &format!("finetuned_{label}.bin")]);
    let head_path = rel(&["ckpt", &format!("head_{label}.bin")]);
    let manifest = RunManifest::begin(
        &run_dir,
        &format!("finetune_{label}"),
        &digest,
        common.seed,
        vec![rel(&["manifest", "config.txt"]), report_path.clone(), backbone_path.clone(), head_path.clone()],
    )?;
    write_config(&run_dir, &cfg)?;
    let out = Downstream::new(&cfg).finetune(&b, common.seed, &digest)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    out.backbone.save(&run_dir.join(&backbone_path))?;
    HeadExport {
        head: out.head.clone(),
        seen: out.seen.clone(),
    }
    .save(&run_dir.join(&head_path))?;
    write_atomic(&run_dir.join(&report_path), out.report.to_text().as_bytes())?;
    manifest.finish(&run_dir, [])?;
    println!("{label} mIoU {:.4}", out.report.value);
    Ok(())
}

fn eval(common: &Common, label: &str, backbone: Option<&Path>, head: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let run_dir = common.run_dir(&cfg);
    let digest = cfg.digest(common.seed);
    let bp = backbone.map_or_else(|| run_dir.join("ckpt").join(format!("finetuned_{label}.bin")), Path::to_path_buf);
    let hp = head.map_or_else(|| run_dir.join("ckpt").join(format!("head_{label}.bin")), Path::to_path_buf);
    let b = BackboneExport::load(&bp).with_context(|| format!("loading {}", bp.display()))?;
    let h = HeadExport::load(&hp).with_context(|| format!("loading {}", hp.display()))?;
    let report_path = rel(&["reports", &format!("eval_{label}.txt")]);
    let robust_path = rel(&["reports", &format!("robustness_{label}.csv")]);
    let manifest = RunManifest::begin(
        &run_dir,
        &format!("eval_{label}"),
        &digest,
        common.seed,
        vec![report_path.clone(), robust_path.clone()],
    )?;
    let data = Downstream::new(&cfg);
    let test = FeatureSet::build(&b, &data.test)?;
    let r = evaluate_head(&h.head, &test, &h.seen)?;
    let report = EvalReport::from_miou(&r, common.seed, &digest);
    write_atomic(&run_dir.join(&report_path), report.to_text().as_bytes())?;
    let outcome = FinetuneOutcome {
        head: h.head,
        backbone: b,
        report: report.clone(),
        seen: h.seen,
        warnings: Vec::new(),
    };
    let robust = robustness_eval(&outcome, &data.test, &RobustnessSpec::default(), common.seed)?;
    write_atomic(&run_dir.join(&robust_path), robust.to_csv().as_bytes())?;
    manifest.finish(&run_dir, [])?;
    let stored = std::fs::read_to_string(run_dir.join("reports").join(format!("finetune_{label}.txt"))).ok();
    let agreement = match stored.map(|s| EvalReport::from_text(&s)) {
        Some(Ok(s)) if s.value.to_bits() == report.value.to_bits() => " (matches the finetune report)",
        Some(Ok(_)) => " (DIFFERS from the finetune report)",
        _ => "",
    };
    println!("{label} mIoU {:.4}{agreement}; delta_TP {:.4}", report.value, robust.delta_tp);
    Ok(())
}

fn sweep(common: &Common, kinds: &[SweepKind], seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(VitpError::Config("--seeds must be at least 1".into()).into());
    }
    let cfg = common.run_config()?;
    let run_dir = common.run_dir(&cfg);
    let digest = cfg.digest(common.seed);
    let mut planned = vec![rel(&["manifest", "config.txt"])];
    for k in kinds {
        planned.push(rel(&["reports", &k.file_name()]));
        planned.push(rel(&["reports", &format!("sweep_{}.svg", k.name())]));
        if *k == SweepKind::Vrl {
            planned.push(rel(&["reports", "sweep_vrl_robustness.csv"]));
        }
    }
    let manifest = RunManifest::begin(&run_dir, "sweep", &digest, common.seed, planned)?;
    write_config(&run_dir, &cfg)?;
    let seed_list: Vec<u64> = (common.seed..common.seed + seeds).collect();
    let written = ablation_sweeps(&cfg, kinds, &seed_list, &run_dir.join("reports"))?;
    manifest.finish(&run_dir, [])?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck(common: &Common, shapes: usize, eps: f64, tolerance: f64) -> Result<()> {
    let cfg = common.run_config()?;
    let run_dir = common.run_dir(&cfg);
    let csv_path = rel(&["reports", "gradcheck.csv"]);
    let manifest = RunManifest::begin(&run_dir, "gradcheck", &cfg.digest(common.seed), common.seed, vec![csv_path.clone()])?;
    let checks = run_suite(common.seed, shapes, eps)?;
    let mut csv = String::from("op,shapes,checked,kinks,max_rel_error\n");
    println!("{:<18} {:>6} {:>8} {:>6} {:>14}", "op", "shapes", "checked", "kinks", "max rel error");
    let mut failing = Vec::new();
    for c in &checks {
        let r = &c.report;
        let ok = r.max_rel_error <= tolerance;
        println!(
            "{:<18} {:>6} {:>8} {:>6} {:>14.3e}{}",
            c.op,
            c.shapes_tried,
            r.checked,
            r.kinks.len(),
            r.max_rel_error,
            if ok { "" } else { "  FAIL" }
        );
        csv.push_str(&format!("{},{},{},{},{}\n", c.op, c.shapes_tried, r.checked, r.kinks.len(), r.max_rel_error));
        if !ok {
            failing.push(c.op);
        }
    }
    write_atomic(&run_dir.join(&csv_path), csv.as_bytes())?;
    manifest.finish(&run_dir, [])?;
    if !failing.is_empty() {
        bail!("relative error above {tolerance:e} for {failing:?}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, resume } => pretrain(&common, resume.as_deref()),
        Command::Export { common, checkpoint } => export(&common, checkpoint.as_deref()),
        Command::Finetune { common, backbone, random } => finetune(&common, backbone.as_deref(), random),
        Command::Eval {
            common,
            label,
            backbone,
            head,
        } => eval(&common, &label, backbone.as_deref(), head.as_deref()),
        Command::Sweep { common, kinds, seeds } => sweep(&common, &kinds, seeds),
        Command::Gradcheck {
            common,
            shapes,
            eps,
            tolerance,
        } => gradcheck(&common, shapes, eps, tolerance),
    }
}

/// Configuration mistakes exit with 2, like argument errors; everything else with 1.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<VitpError>() {
        Some(VitpError::Config(_) | VitpError::DropRatio(_) | VitpError::Recipe(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("VITP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: VITP_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
