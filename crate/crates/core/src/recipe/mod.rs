//! Data recipes: weighted dataset mixtures, the principle checks they must
//! satisfy, and the synthetic datasets backing each entry.

pub mod corrupt;
pub mod shard;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{Result, VitpError};
use crate::rng::{self, str_key, Purpose};
use synth::{synth_generate, RawExample, RenderMode, SynthConfig, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskTag {
    Caption,
    Vqa,
    Grounding,
    Classification,
    General,
}

impl TaskTag {
    pub const ALL: [TaskTag; 5] = [
        TaskTag::Caption,
        TaskTag::Vqa,
        TaskTag::Grounding,
        TaskTag::Classification,
        TaskTag::General,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Caption => "caption",
            TaskTag::Vqa => "vqa",
            TaskTag::Grounding => "grounding",
            TaskTag::Classification => "classification",
            TaskTag::General => "general",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| VitpError::Recipe(format!("unknown task tag {s:?}")))
    }

    pub fn task(self) -> Option<Task> {
        match self {
            TaskTag::Caption => Some(Task::Caption),
            TaskTag::Vqa => Some(Task::Vqa),
            TaskTag::Grounding => Some(Task::Grounding),
            TaskTag::Classification => Some(Task::Classification),
            TaskTag::General => None,
        }
    }
}

pub const OPTICAL: &str = "optical";
pub const SAR: &str = "sar";

#[derive(Clone, Debug, PartialEq)]
pub struct RecipeEntry {
    pub name: String,
    pub size: u64,
    pub sample_rate: f64,
    pub tags: BTreeSet<TaskTag>,
    pub modality: String,
}

impl RecipeEntry {
    pub fn new(name: &str, size: u64, sample_rate: f64, tags: &[TaskTag], modality: &str) -> Result<Self> {
        let e = RecipeEntry {
            name: name.to_string(),
            size,
            sample_rate,
            tags: tags.iter().copied().collect(),
            modality: modality.to_string(),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(VitpError::Recipe(format!("bad entry name {:?}", self.name)));
        }
        if self.size == 0 {
            return Err(VitpError::Recipe(format!("{}: size must be at least 1", self.name)));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate >= 0.0) {
            return Err(VitpError::Recipe(format!("{}: bad sample rate {}", self.name, self.sample_rate)));
        }
        if self.tags.is_empty() {
            return Err(VitpError::Recipe(format!("{}: needs at least one tag", self.name)));
        }
        if self.modality.is_empty() || self.modality.contains(char::is_whitespace) {
            return Err(VitpError::Recipe(format!("{}: bad modality", self.name)));
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.size as f64 * self.sample_rate
    }

    pub fn has(&self, t: TaskTag) -> bool {
        self.tags.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub entries: Vec<RecipeEntry>,
}

impl MixtureSpec {
    pub fn new(entries: Vec<RecipeEntry>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for e in &entries {
            e.validate()?;
            if !names.insert(e.name.clone()) {
                return Err(VitpError::Recipe(format!("duplicate entry {}", e.name)));
            }
        }
        Ok(MixtureSpec { entries })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(RecipeEntry::weight).collect()
    }

    /// `p_d = size_d * rate_d / sum of weights`.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(VitpError::Recipe("all mixture weights are zero".into()));
        }
        Ok(w.iter().map(|x| x / total).collect())
    }

    /// The mixture with the named entries removed; the rest renormalize implicitly.
    pub fn without(&self, names: &[&str]) -> Result<Self> {
        for n in names {
            if !self.entries.iter().any(|e| e.name == *n) {
                return Err(VitpError::Recipe(format!("no entry named {n}")));
            }
        }
        MixtureSpec::new(
            self.entries
                .iter()
                .filter(|e| !names.contains(&e.name.as_str()))
                .cloned()
                .collect(),
        )
    }

    pub fn without_where(&self, f: impl Fn(&RecipeEntry) -> bool) -> Result<Self> {
        MixtureSpec::new(self.entries.iter().filter(|e| !f(e)).cloned().collect())
    }

    /// `name<TAB>size<TAB>rate<TAB>tags[<TAB>modality]`; `#` starts a comment.
    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if !(4..=5).contains(&cols.len()) {
                return Err(VitpError::Recipe(format!(
                    "line {}: expected 4 or 5 tab-separated columns, got {}",
                    n + 1,
                    cols.len()
                )));
            }
            let size = parse_size(cols[1]).ok_or_else(|| VitpError::Recipe(format!("line {}: bad size {:?}", n + 1, cols[1])))?;
            let rate: f64 = cols[2]
                .parse()
                .map_err(|_| VitpError::Recipe(format!("line {}: bad rate {:?}", n + 1, cols[2])))?;
            let tags = cols[3].split(',').map(|t| TaskTag::parse(t.trim())).collect::<Result<Vec<_>>>()?;
            let modality = cols.get(4).copied().unwrap_or(OPTICAL);
            entries.push(RecipeEntry::new(cols[0], size, rate, &tags, modality)?);
        }
        if entries.is_empty() {
            return Err(VitpError::Recipe("manifest has no entries".into()));
        }
        MixtureSpec::new(entries)
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# name\tsize\trate\ttags\tmodality\n");
        for e in &self.entries {
            let tags: Vec<&str> = e.tags.iter().map(|t| t.name()).collect();
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.size,
                e.sample_rate,
                tags.join(","),
                e.modality
            ));
        }
        s
    }

    /// Probability mass of entries tagged `general`.
    pub fn general_share(&self) -> Result<f64> {
        let p = self.probabilities()?;
        Ok(self
            .entries
            .iter()
            .zip(&p)
            .filter(|(e, _)| e.has(TaskTag::General))
            .map(|(_, p)| p)
            .sum())
    }
}

/// Sizes may use a `k` suffix for thousands (`5.5k`).
fn parse_size(s: &str) -> Option<u64> {
    let (num, mult) = match s.strip_suffix('k') {
        Some(n) => (n, 1000.0),
        None => (s, 1.0),
    };
    let v: f64 = num.parse().ok()?;
    let v = v * mult;
    (v.is_finite() && v >= 0.0 && v.fract() == 0.0).then_some(v as u64)
}

impl fmt::Display for MixtureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_manifest())
    }
}

/// What the downstream use asks of a recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct Requirements {
    pub min_sources: usize,
    pub modalities: Vec<String>,
    pub localization: bool,
    pub general_band: (f64, f64),
}

impl Default for Requirements {
    fn default() -> Self {
        Requirements {
            min_sources: 3,
            modalities: vec![OPTICAL.into(), SAR.into()],
            localization: true,
            general_band: (0.01, 0.10),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrincipleReport {
    pub scale_diversity: bool,
    pub modality_coverage: bool,
    pub task_alignment: bool,
    pub generality: bool,
    pub general_share: f64,
    pub notes: Vec<String>,
}

impl PrincipleReport {
    pub fn all_pass(&self) -> bool {
        self.scale_diversity && self.modality_coverage && self.task_alignment && self.generality
    }
}

pub fn validate_recipe(spec: &MixtureSpec, req: &Requirements) -> PrincipleReport {
    let mut notes = Vec::new();
    let sources = spec.entries.iter().filter(|e| e.weight() > 0.0).count();
    let scale_diversity = sources >= req.min_sources;
    if !scale_diversity {
        notes.push(format!("{sources} weighted sources, need {}", req.min_sources));
    }
    let present: BTreeSet<&str> = spec
        .entries
        .iter()
        .filter(|e| e.weight() > 0.0)
        .map(|e| e.modality.as_str())
        .collect();
    let missing: Vec<&String> = req.modalities.iter().filter(|m| !present.contains(m.as_str())).collect();
    let modality_coverage = missing.is_empty();
    if !modality_coverage {
        notes.push(format!("missing modalities {missing:?}"));
    }
    let grounding = spec.entries.iter().any(|e| e.weight() > 0.0 && e.has(TaskTag::Grounding));
    let task_alignment = !req.localization || grounding;
    if !task_alignment {
        notes.push("localization downstream but no grounding data".into());
    }
    let general_share = spec.general_share().unwrap_or(0.0);
    let generality = general_share >= req.general_band.0 && general_share <= req.general_band.1;
    if !generality {
        notes.push(format!(
            "general share {general_share:.4} outside [{}, {}]",
            req.general_band.0, req.general_band.1
        ));
    }
    PrincipleReport {
        scale_diversity,
        modality_coverage,
        task_alignment,
        generality,
        general_share,
        notes,
    }
}

/// Categorical sampler over entries with probabilities proportional to weight.
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    cumulative: Vec<f64>,
}

impl MixtureSampler {
    pub fn new(spec: &MixtureSpec) -> Result<Self> {
        let p = spec.probabilities()?;
        let mut acc = 0.0;
        let cumulative = p
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        Ok(MixtureSampler { cumulative })
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let i = self.cumulative.partition_point(|&c| c <= u);
        // Never land on a zero-probability tail entry.
        let mut i = i.min(self.cumulative.len() - 1);
        while i > 0 && self.cumulative[i] == self.cumulative[i - 1] {
            i -= 1;
        }
        i
    }
}

/// Anything that can produce the `index`-th example of an entry.
pub trait ExampleSource {
    fn len(&self) -> u64;
    fn get(&self, index: u64) -> Result<RawExample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Synthetic stand-in for a recipe entry. Example `i` is a pure function of
/// `(world_seed, entry name, i)`.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub name: String,
    pub size: u64,
    pub tasks: Vec<Task>,
    pub synth: SynthConfig,
    pub world_seed: u64,
}

impl SyntheticDataset {
    pub fn for_entry(entry: &RecipeEntry, image_size: usize, world_seed: u64) -> Self {
        let mut tasks: Vec<Task> = entry.tags.iter().filter_map(|t| t.task()).collect();
        if tasks.is_empty() {
            tasks = vec![Task::Caption, Task::Vqa];
        }
        let mode = if entry.modality == SAR {
            RenderMode::Sar
        } else if entry.has(TaskTag::General) {
            RenderMode::Natural
        } else {
            RenderMode::Optical
        };
        SyntheticDataset {
            name: entry.name.clone(),
            size: entry.size,
            tasks,
            synth: SynthConfig {
                image_size,
                mode,
                ..SynthConfig::default()
            },
            world_seed,
        }
    }
}

impl ExampleSource for SyntheticDataset {
    fn len(&self) -> u64 {
        self.size
    }

    fn get(&self, index: u64) -> Result<RawExample> {
        if index >= self.size {
            return Err(VitpError::Recipe(format!("{}: index {index} out of range", self.name)));
        }
        let key = rng::mix(&[self.world_seed, str_key(&self.name), index]);
        let task = self.tasks[(key % self.tasks.len() as u64) as usize];
        let mut ex = synth_generate(key, task, &self.synth)?;
        ex.source = self.name.clone();
        Ok(ex)
    }
}

pub fn synthetic_datasets(spec: &MixtureSpec, image_size: usize, world_seed: u64) -> Vec<SyntheticDataset> {
    spec.entries
        .iter()
        .map(|e| SyntheticDataset::for_entry(e, image_size, world_seed))
        .collect()
}

/// Draws `b` examples: entry by mixture probability, then a uniform example in it.
pub fn sample_batch<S: ExampleSource>(
    spec: &MixtureSpec,
    datasets: &[Option<S>],
    rng: &mut dyn RngCore,
    b: usize,
) -> Result<Vec<RawExample>> {
    if datasets.len() != spec.entries.len() {
        return Err(VitpError::Recipe("dataset list does not match the recipe".into()));
    }
    if let Some(i) = datasets.iter().position(Option::is_none) {
        return Err(VitpError::Recipe(format!("no dataset behind entry {}", spec.entries[i].name)));
    }
    let sampler = MixtureSampler::new(spec)?;
    (0..b)
        .map(|_| {
            let d = sampler.sample(rng);
            let ds = datasets[d].as_ref().expect("checked above");
            let i = rng.random_range(0..ds.len());
            ds.get(i)
        })
        .collect()
}

/// Batch for training step `step`, drawn from its own stream.
pub fn step_batch<S: ExampleSource>(
    spec: &MixtureSpec,
    datasets: &[Option<S>],
    seed: u64,
    step: u64,
    b: usize,
) -> Result<Vec<RawExample>> {
    let mut r = rng::stream(seed, Purpose::Batch, step, 0);
    sample_batch(spec, datasets, &mut r, b)
}

/// The remote-sensing pretraining recipe with its published sizes and rates.
pub fn reference_recipe() -> MixtureSpec {
    use TaskTag::*;
    let rows: [(&str, u64, f64, &[TaskTag], &str); 13] = [
        ("Mini-InternVL", 1_394_000, 0.03, &[Caption, Vqa, General], OPTICAL),
        ("RSVQA", 100_000, 0.1, &[Vqa], OPTICAL),
        ("FIT_RS", 100_000, 0.1, &[Vqa], OPTICAL),
        ("GeoChat", 64_000, 2.0, &[Grounding], OPTICAL),
        ("VRSBench", 38_000, 5.0, &[Grounding], OPTICAL),
        ("RSVG", 5_500, 10.0, &[Grounding], OPTICAL),
        ("DIOR-RSVG", 27_000, 8.0, &[Grounding], OPTICAL),
        ("ISPRS_SAR", 1_500, 1.0, &[Classification], SAR),
        ("SAR_Sentinel-1&2", 16_000, 1.0, &[Classification], SAR),
        ("VHM", 223_000, 1.0, &[Caption, Vqa, Classification], OPTICAL),
        ("LevirCCcaptions", 50_000, 0.5, &[Caption], OPTICAL),
        ("GAIA", 33_000, 1.0, &[Caption], OPTICAL),
        ("Million-AID", 920_000, 0.05, &[Caption, Classification], OPTICAL),
    ];
    MixtureSpec::new(
        rows.iter()
            .map(|(n, s, r, t, m)| RecipeEntry::new(n, *s, *r, t, m).expect("valid row"))
            .collect(),
    )
    .expect("valid recipe")
}

/// Desk-scale synthetic recipe mirroring the same composition principles.
pub fn desk_recipe() -> MixtureSpec {
    use TaskTag::*;
    let rows: [(&str, u64, f64, &[TaskTag], &str); 10] = [
        ("general_mix", 4000, 0.025, &[Caption, Vqa, General], OPTICAL),
        ("scene_caption", 20000, 0.1, &[Caption], OPTICAL),
        ("sar_caption", 10000, 0.1, &[Caption], SAR),
        ("scene_vqa", 5000, 0.1, &[Vqa], OPTICAL),
        ("count_vqa", 5000, 0.1, &[Vqa], OPTICAL),
        ("sar_vqa", 3000, 0.1, &[Vqa], SAR),
        ("ground_a", 3000, 0.1, &[Grounding], OPTICAL),
        ("ground_b", 1500, 0.2, &[Grounding], OPTICAL),
        ("sar_cls", 2000, 0.1, &[Classification], SAR),
        ("caption_cls", 4000, 0.1, &[Caption, Classification], OPTICAL),
    ];
    MixtureSpec::new(
        rows.iter()
            .map(|(n, s, r, t, m)| RecipeEntry::new(n, *s, *r, t, m).expect("valid row"))
            .collect(),
    )
    .expect("valid recipe")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecipeArm {
    Full,
    WithoutDiversity,
    WithoutSar,
    WithoutGrounding,
    WithoutGeneral,
}

impl RecipeArm {
    pub const ALL: [RecipeArm; 5] = [
        RecipeArm::Full,
        RecipeArm::WithoutDiversity,
        RecipeArm::WithoutSar,
        RecipeArm::WithoutGrounding,
        RecipeArm::WithoutGeneral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecipeArm::Full => "full",
            RecipeArm::WithoutDiversity => "wo_diversity",
            RecipeArm::WithoutSar => "wo_sar",
            RecipeArm::WithoutGrounding => "wo_grounding",
            RecipeArm::WithoutGeneral => "wo_general",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| VitpError::Recipe(format!("unknown recipe arm {s:?}")))
    }

    /// Applies the arm to the desk recipe; remaining weights renormalize.
    pub fn apply(self, spec: &MixtureSpec) -> Result<MixtureSpec> {
        match self {
            RecipeArm::Full => Ok(spec.clone()),
            // One source per task and modality.
            RecipeArm::WithoutDiversity => spec.without(&["caption_cls", "count_vqa", "ground_b"]),
            RecipeArm::WithoutSar => spec.without_where(|e| e.modality == SAR),
            RecipeArm::WithoutGrounding => spec.without_where(|e| e.has(TaskTag::Grounding)),
            RecipeArm::WithoutGeneral => spec.without_where(|e| e.has(TaskTag::General)),
        }
    }
}
