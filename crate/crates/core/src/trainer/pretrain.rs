//! The pretraining loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vitp_autodiff::{Graph, Tensor};

use crate::error::{Result, VitpError};
use crate::params::ParamStore;
use crate::pipeline::{PreparedExample, Vlm};
use crate::recipe::synth::corpus;
use crate::recipe::{desk_recipe, step_batch, synthetic_datasets, reference_recipe, MixtureSpec, RecipeArm, SyntheticDataset};
use crate::tokenizer::Vocabulary;

use super::adamw::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState};
use super::checkpoint::Checkpoint;
use super::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_curve(w: &mut impl Write, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.lr, p.loss)?;
    }
    Ok(())
}

pub fn read_curve(text: &str) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || VitpError::Format(format!("curve line {}", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(CurvePoint {
            step: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// The instruction vocabulary of the synthetic world.
pub fn world_vocabulary() -> Vocabulary {
    Vocabulary::build(&corpus()).expect("corpus is non-empty")
}

/// `desk`, `reference`, or a manifest path, optionally followed by
/// `:<arm>` (for example `desk:wo_sar`).
pub fn resolve_recipe(name: &str) -> Result<MixtureSpec> {
    if let Some((base, arm)) = name.rsplit_once(':') {
        if let Ok(arm) = RecipeArm::parse(arm) {
            return arm.apply(&resolve_recipe(base)?);
        }
    }
    match name {
        "desk" => Ok(desk_recipe()),
        "reference" => Ok(reference_recipe()),
        path => MixtureSpec::parse_manifest(&std::fs::read_to_string(path)?),
    }
}

/// Where periodic checkpoints and the divergence checkpoint go.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Pretrainer {
    pub cfg: RunConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub model: Vlm,
    pub params: ParamStore<f32>,
    pub opt: OptimizerState<f32>,
    pub step: u64,
    spec: MixtureSpec,
    datasets: Vec<Option<SyntheticDataset>>,
    adamw: AdamWConfig,
}

impl Pretrainer {
    pub fn new(cfg: &RunConfig, spec: &MixtureSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = world_vocabulary();
        let (model, params) = Vlm::init::<f32>(&cfg.model.vlm(vocab.len()), seed)?;
        let opt = OptimizerState::new(&params);
        Self::assemble(cfg, spec, seed, vocab, model, params, opt, 0)
    }

    /// Continues from a checkpoint; the step counter and optimizer resume.
    pub fn resume(ckpt: &Checkpoint, spec: &MixtureSpec) -> Result<Self> {
        let vocab = world_vocabulary();
        let mut params = ckpt.params.clone();
        let model = Vlm::attach(&ckpt.config.model.vlm(vocab.len()), &mut params)?;
        Self::assemble(&ckpt.config, spec, ckpt.seed, vocab, model, params, ckpt.opt.clone(), ckpt.step)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: &RunConfig,
        spec: &MixtureSpec,
        seed: u64,
        vocab: Vocabulary,
        model: Vlm,
        params: ParamStore<f32>,
        opt: OptimizerState<f32>,
        step: u64,
    ) -> Result<Self> {
        spec.probabilities()?;
        cfg.train.vrl_config(seed).validate()?;
        let datasets = synthetic_datasets(spec, cfg.model.image_size, cfg.data_seed)
            .into_iter()
            .map(Some)
            .collect();
        Ok(Pretrainer {
            cfg: cfg.clone(),
            seed,
            vocab,
            model,
            params,
            opt,
            step,
            spec: spec.clone(),
            datasets,
            adamw: AdamWConfig {
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            },
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            seed: self.seed,
            step: self.step,
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    /// Tokenized batch for training step `step` (1-based).
    pub fn batch(&self, step: u64) -> Result<Vec<PreparedExample>> {
        let raw = step_batch(&self.spec, &self.datasets, self.seed, step, self.cfg.train.batch_size)?;
        raw.into_par_iter()
            .map(|ex| self.model.prepare(&self.vocab, ex.image, &ex.query, &ex.response))
            .collect()
    }

    /// Loss and per-parameter gradients (in store order) for step `step`.
    pub fn gradients(&self, step: u64) -> Result<(f64, Vec<Tensor<f32>>)> {
        let batch = self.batch(step)?;
        let vrl = self.cfg.train.vrl_config(self.seed);
        let plans = self.model.draw_plans(batch.len(), &vrl, step)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| true);
        let loss = self.model.batch_loss(&mut g, &p, &batch, &plans)?;
        let value = f64::from(g.value(loss).item());
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, p.vars().iter().map(|&v| grads.take(v)).collect()))
    }

    /// One optimizer update. On a non-finite loss the parameters are left
    /// untouched and a divergence error is returned.
    pub fn train_step(&mut self) -> Result<CurvePoint> {
        let t = self.step + 1;
        let lr = self.cfg.train.schedule().lr(t)?;
        let (loss, mut grads) = self.gradients(t)?;
        if !loss.is_finite() {
            return Err(VitpError::Diverged {
                step: t as usize,
                checkpoint: None,
            });
        }
        clip_global_norm(&mut grads, self.cfg.train.grad_clip);
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, &self.adamw)?;
        self.step = t;
        Ok(CurvePoint { step: t, lr, loss })
    }

    /// Trains until `until` (default: `total_steps`), checkpointing every
    /// `checkpoint_every` steps when a directory is given.
    pub fn run(&mut self, until: Option<u64>, out: &Outputs) -> Result<Vec<CurvePoint>> {
        let end = until.unwrap_or(self.cfg.train.total_steps).min(self.cfg.train.total_steps);
        let mut curve = Vec::new();
        while self.step < end {
            match self.train_step() {
                Ok(p) => curve.push(p),
                Err(VitpError::Diverged { step, .. }) => {
                    let checkpoint = match &out.checkpoint_dir {
                        Some(dir) => {
                            let path = dir.join("last_finite.ckpt");
                            self.checkpoint().save(&path)?;
                            Some(path)
                        }
                        None => None,
                    };
                    return Err(VitpError::Diverged { step, checkpoint });
                }
                Err(e) => return Err(e),
            }
            let every = self.cfg.train.checkpoint_every;
            if let Some(dir) = &out.checkpoint_dir {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(curve)
    }
}

/// Fresh run from `seed` to `total_steps`.
pub fn pretrain(cfg: &RunConfig, spec: &MixtureSpec, seed: u64) -> Result<(Checkpoint, Vec<CurvePoint>)> {
    let mut t = Pretrainer::new(cfg, spec, seed)?;
    let curve = t.run(None, &Outputs::default())?;
    Ok((t.checkpoint(), curve))
}

pub fn save_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut buf = Vec::new();
    write_curve(&mut buf, curve)?;
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}
