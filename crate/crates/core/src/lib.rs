//! Multi-modal time-series representation learning.
//!
//! The pipeline groups modalities by embedding distance, encodes each group
//! with parallel multi-scale dilated-convolution branches over patched and
//! masked inputs, and pretrains the encoders with a cross-modal contrastive
//! objective. Synthetic data generation, linear probing and an ablation
//! harness sit around it.

mod binio;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod grouping;
pub mod mstransform;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use datagen::{GeneratorConfig, MultiModalDataset};
pub use encoder::{EncoderSpec, GroupEncoderBank};
pub use error::{Error, Result};
pub use grouping::{GroupingConfig, GroupingResult};
pub use objective::MetricReport;
pub use params::ParamSet;
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{AblationTable, ModelConfig, PipelineConfig, RunReport, TrainConfig};
