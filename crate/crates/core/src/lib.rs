//! Profiling toolkit for comparing the cost of self-attention variants across
//! text, speech and vision encoders.

pub mod analysis;
pub mod breakdown;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod instrument;
pub mod modelzoo;
pub mod numkernel;
pub mod taxonomy;
pub mod workloads;

pub use breakdown::{CostBreakdown, CostEntry};
pub use costmodel::{flops_of, CostMetric};
pub use error::{Error, Result};
pub use harness::{Harness, Metric, ProfileRecord, Source, SweepResult};
pub use modelzoo::{EncoderModel, Family, ModelConfig, ModelInput, Preset};
pub use taxonomy::{LayerTag, Modality, Mode, TagKind};
