pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod pretrain;
pub mod schedule;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{BackboneExport, Checkpoint, HeadExport};
pub use config::{FinetuneConfig, ModelConfig, Preset, RunConfig, TrainConfig};
pub use pretrain::{pretrain, CurvePoint, Pretrainer};
pub use schedule::{cosine_lr, Schedule};
