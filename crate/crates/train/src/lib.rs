//! Pre-training, few-shot fine-tuning, inference and evaluation on top of
//! the renderer and the autodiff engine.

pub mod channels;
pub mod config;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod infer;
pub mod pipeline;
pub mod pretrain;
pub mod provenance;
pub mod seed;

pub use channels::ChannelSet;
pub use config::{FewShotProtocol, LrSchedule, PipelineConfig, TrainConfig, ViewCount};
pub use dataset::{Dataset, ViewCache};
pub use error::{Result, TrainError};
pub use finetune::{finetune, FinetuneOutcome, FinetuneRecord, Selection};
pub use infer::{evaluate, infer_shape, predict_views};
pub use pipeline::{run_fewshot, run_pipeline};
pub use pretrain::{pretrain, LossRecord, PretrainOutcome};
pub use provenance::Provenance;
