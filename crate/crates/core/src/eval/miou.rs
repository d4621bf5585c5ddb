use crate::error::{Result, VitpError};

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// `None` for classes excluded from the mean.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Accumulated intersections and unions over any number of masks.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(VitpError::Eval(format!(
                "mask sizes differ: {} vs {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.inter.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= c || g >= c {
                return Err(VitpError::Eval(format!("label outside {c} classes")));
            }
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Classes with an empty union, or rejected by `include`, are excluded.
    pub fn result(&self, include: impl Fn(usize) -> bool) -> MiouResult {
        let per_class: Vec<Option<f64>> = (0..self.inter.len())
            .map(|c| (self.union[c] > 0 && include(c)).then(|| self.inter[c] as f64 / self.union[c] as f64))
            .collect();
        let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        MiouResult { per_class, miou }
    }
}

pub fn evaluate_miou(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<MiouResult> {
    if pred.len() != gt.len() {
        return Err(VitpError::Eval("different numbers of masks".into()));
    }
    let mut acc = IouAccumulator::new(classes);
    for (p, g) in pred.iter().zip(gt) {
        acc.add(p, g)?;
    }
    Ok(acc.result(|_| true))
}
