//! Downstream transfer: segmentation probes, robustness and sweep harnesses.

pub mod miou;
pub mod robustness;
pub mod segmentation;
pub mod sweeps;

pub use miou::{evaluate_miou, IouAccumulator, MiouResult};
pub use robustness::{robustness_eval, RobustnessReport, RobustnessSpec};
pub use segmentation::{
    finetune_segmentation, patch_labels, upsample, EvalReport, FeatureSet, FinetuneOutcome, SegDataset,
    SegmentationHead, NUM_CLASSES,
};
