use crate::error::{Result, VitpError};
use crate::image::Image;
use crate::recipe::corrupt::{corrupt_with_magnitude, CorruptionKind};
use crate::rng::{self, Purpose};

use super::segmentation::{evaluate_head, FeatureSet, FinetuneOutcome, SegDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessSpec {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Multiplies every magnitude; 0 turns each corruption into the identity.
    pub magnitude_scale: f64,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        RobustnessSpec {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: vec![1, 2, 3],
            magnitude_scale: 1.0,
        }
    }
}

impl RobustnessSpec {
    pub fn parse(kinds: &[&str], severities: &[u8]) -> Result<Self> {
        let kinds = kinds.iter().map(|k| CorruptionKind::parse(k)).collect::<Result<Vec<_>>>()?;
        if kinds.is_empty() || severities.is_empty() {
            return Err(VitpError::Config("robustness needs at least one kind and severity".into()));
        }
        for &s in severities {
            CorruptionKind::Translate.magnitude(s)?;
        }
        Ok(RobustnessSpec {
            kinds,
            severities: severities.to_vec(),
            magnitude_scale: 1.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub clean: f64,
    /// Per kind, the metric averaged over severities.
    pub per_corruption: Vec<(String, f64)>,
    pub average: f64,
    pub delta_tp: f64,
}

impl RobustnessReport {
    pub fn new(clean: f64, per_corruption: Vec<(String, f64)>) -> Self {
        let average = per_corruption.iter().map(|(_, v)| v).sum::<f64>() / per_corruption.len().max(1) as f64;
        RobustnessReport {
            clean,
            per_corruption,
            average,
            delta_tp: clean - average,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("corruption,value\n");
        s.push_str(&format!("clean,{}\n", self.clean));
        for (k, v) in &self.per_corruption {
            s.push_str(&format!("{k},{v}\n"));
        }
        s.push_str(&format!("average,{}\ndelta_tp,{}\n", self.average, self.delta_tp));
        s
    }
}

/// Evaluates a finetuned probe on clean and corrupted copies of `test`.
/// Corruption noise is keyed by (seed, kind, image) and shared across severities.
pub fn robustness_eval(
    probe: &FinetuneOutcome,
    test: &SegDataset,
    spec: &RobustnessSpec,
    seed: u64,
) -> Result<RobustnessReport> {
    let enc = probe.backbone.encoder()?;
    let params = &probe.backbone.params;
    let clean = FeatureSet::build(&probe.backbone, test)?;
    let clean_m = evaluate_head(&probe.head, &clean, &probe.seen)?.miou;
    let mut per = Vec::new();
    for (ki, &kind) in spec.kinds.iter().enumerate() {
        let mut total = 0.0;
        for &sev in &spec.severities {
            let m = kind.magnitude(sev)? * spec.magnitude_scale;
            let (images, masks): (Vec<Image>, Vec<Vec<u8>>) = test
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut r = rng::stream(seed, Purpose::Corrupt, ki as u64, i as u64);
                    let (img, mask) = corrupt_with_magnitude(&s.image, Some(&s.mask), kind, m, &mut r);
                    (img, mask.expect("mask passed in"))
                })
                .unzip();
            let refs: Vec<&Image> = images.iter().collect();
            let fs = FeatureSet::from_parts(&enc, params, &refs, masks, test.image_size)?;
            total += evaluate_head(&probe.head, &fs, &probe.seen)?.miou;
        }
        per.push((kind.name().to_string(), total / spec.severities.len() as f64));
    }
    Ok(RobustnessReport::new(clean_m, per))
}
