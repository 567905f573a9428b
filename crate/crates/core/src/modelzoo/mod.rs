//! Encoder archetypes, their configs and attention variants.

pub mod attention;
pub mod config;
pub mod model;
pub mod params;

pub use attention::{
    full_attention, iterative_pinv, nystrom_attention, pinv_iterate, shifted_window_attention_2d, sliding_window_attention,
    window_attention, WindowPlan,
};
pub use config::{model_config, pad_input, Family, FeaturizerSpec, ModelConfig, Preset, SwinSpec};
pub use model::{EncoderModel, Forward, ModelInput, Param, PAD_TOKEN};
pub use params::count_params;
