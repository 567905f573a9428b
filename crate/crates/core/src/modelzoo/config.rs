//! Architecture descriptions, the two dimension presets, and config files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TextFull,
    TextSlidingWindow,
    TextNystrom,
    SpeechFull,
    SpeechSlidingWindow,
    VisionFull,
    VisionShiftedWindow,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::TextFull,
        Family::TextSlidingWindow,
        Family::TextNystrom,
        Family::SpeechFull,
        Family::SpeechSlidingWindow,
        Family::VisionFull,
        Family::VisionShiftedWindow,
    ];

    pub fn modality(self) -> Modality {
        match self {
            Family::TextFull | Family::TextSlidingWindow | Family::TextNystrom => Modality::Text,
            Family::SpeechFull | Family::SpeechSlidingWindow => Modality::Speech,
            Family::VisionFull | Family::VisionShiftedWindow => Modality::Vision,
        }
    }

    /// Canonical model name used on the command line and in records.
    pub fn model_name(self) -> &'static str {
        match self {
            Family::TextFull => "text-full",
            Family::TextSlidingWindow => "text-sliding",
            Family::TextNystrom => "text-nystrom",
            Family::SpeechFull => "speech-full",
            Family::SpeechSlidingWindow => "speech-sliding",
            Family::VisionFull => "vision-full",
            Family::VisionShiftedWindow => "vision-swin",
        }
    }

    /// The architecture this family resembles.
    pub fn archetype(self) -> &'static str {
        match self {
            Family::TextFull => "BERT-like",
            Family::TextSlidingWindow => "Longformer-like",
            Family::TextNystrom => "Nystromformer-like",
            Family::SpeechFull => "HuBERT-like",
            Family::SpeechSlidingWindow => "L-HuBERT-like",
            Family::VisionFull => "ViT-like",
            Family::VisionShiftedWindow => "Swin-like",
        }
    }

    /// The full-attention model an efficient variant is compared against.
    pub fn vanilla(self) -> Option<Family> {
        match self {
            Family::TextSlidingWindow | Family::TextNystrom => Some(Family::TextFull),
            Family::SpeechSlidingWindow => Some(Family::SpeechFull),
            Family::VisionShiftedWindow => Some(Family::VisionFull),
            _ => None,
        }
    }

    pub fn from_model_name(name: &str) -> Result<Family> {
        let lower = name.to_ascii_lowercase();
        Family::ALL
            .into_iter()
            .find(|f| f.model_name() == lower)
            .ok_or_else(|| Error::unknown("model", name, &Family::model_names()))
    }

    pub fn model_names() -> Vec<&'static str> {
        Family::ALL.iter().map(|f| f.model_name()).collect()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.model_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "paper-dims")]
    PaperDims,
    #[serde(rename = "desk-dims")]
    DeskDims,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::PaperDims, Preset::DeskDims];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperDims => "paper-dims",
            Preset::DeskDims => "desk-dims",
        }
    }

    /// Directory under `configs/` holding this preset's files.
    pub fn dir(self) -> &'static str {
        match self {
            Preset::PaperDims => "paper",
            Preset::DeskDims => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper-dims" | "paper" => Ok(Preset::PaperDims),
            "desk-dims" | "desk" => Ok(Preset::DeskDims),
            _ => Err(Error::unknown("preset", s, &["paper-dims", "desk-dims"])),
        }
    }
}

/// Strided conv stack that turns a waveform into frames, followed by the
/// convolutional positional layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub channels: usize,
    /// `(kernel, stride)` per conv layer.
    pub layers: Vec<(usize, usize)>,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub sample_rate: usize,
}

impl FeaturizerSpec {
    pub fn standard(channels: usize) -> Self {
        let mut layers = vec![(10, 5)];
        layers.extend([(3, 2); 4]);
        layers.extend([(2, 2); 2]);
        FeaturizerSpec {
            channels,
            layers,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            sample_rate: 16_000,
        }
    }

    /// Frame count per conv layer under floor stride arithmetic.
    pub fn frame_lengths(&self, samples: usize) -> Result<Vec<usize>> {
        let mut t = samples;
        let mut out = Vec::with_capacity(self.layers.len());
        for &(k, s) in &self.layers {
            if t < k {
                return Err(Error::TooShort {
                    samples,
                    receptive_field: self.receptive_field(),
                });
            }
            t = (t - k) / s + 1;
            out.push(t);
        }
        Ok(out)
    }

    pub fn frames(&self, samples: usize) -> Result<usize> {
        Ok(self.frame_lengths(samples)?.last().copied().unwrap_or(samples))
    }

    /// Smallest waveform that yields one frame.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().rev().fold(1, |r, &(k, s)| (r - 1) * s + k)
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.1).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwinSpec {
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
}

/// Full architectural description of one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub preset: Preset,
    /// Model width (stage-0 width for shifted-window models).
    pub d_model: usize,
    /// Encoder blocks (sum of stage depths for shifted-window models).
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width (stage-0 width for shifted-window models).
    pub d_ff: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub type_vocab_size: usize,
    /// Learned position table rows; longer inputs reuse rows cyclically.
    #[serde(default)]
    pub max_positions: usize,
    /// Total tokens in the local window (half on each side).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_window: Option<usize>,
    /// The first token attends to and is attended by every token.
    #[serde(default)]
    pub global_first_token: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_landmarks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinv_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    /// Native image side the position table was sized for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swin: Option<SwinSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_multiple: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub featurizer: Option<FeaturizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub framerate_hz: Option<f64>,
    #[serde(default = "default_init_std")]
    pub init_std: f32,
}

fn default_init_std() -> f32 {
    0.02
}

/// Smallest multiple of `multiple` that is at least `size`.
pub fn pad_input(size: usize, multiple: usize) -> usize {
    let m = multiple.max(1);
    size.div_ceil(m) * m
}

impl ModelConfig {
    pub fn modality(&self) -> Modality {
        self.family.modality()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the pooled representation fed to the classification head.
    pub fn output_dim(&self) -> usize {
        match &self.swin {
            Some(s) => self.d_model << (s.depths.len() - 1),
            None => self.d_model,
        }
    }

    /// Length or image side after the family's padding rule.
    pub fn padded(&self, size: usize) -> usize {
        match self.pad_multiple {
            Some(m) => pad_input(size, m),
            None => size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if let Some(w) = self.attention_window {
            if w < 2 || w % 2 != 0 {
                return bad(format!("attention_window {w} must be even and >= 2"));
            }
        }
        if self.pad_multiple == Some(0) {
            return bad("pad_multiple must be >= 1".into());
        }
        let needs = |what: &str, ok: bool| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{}: {} requires {what}", self.name, self.family)))
            }
        };
        match self.family.modality() {
            Modality::Text => {
                needs("vocab_size", self.vocab_size > 0)?;
                needs("max_positions", self.max_positions > 0)?;
                needs("type_vocab_size", self.type_vocab_size > 0)?;
            }
            Modality::Speech => {
                let f = self.featurizer.as_ref();
                needs("featurizer", f.is_some_and(|f| !f.layers.is_empty()))?;
                let f = f.unwrap();
                needs(
                    "pos_conv_groups dividing d_model",
                    f.pos_conv_groups > 0 && self.d_model % f.pos_conv_groups == 0,
                )?;
            }
            Modality::Vision => {
                needs("patch_size", self.patch_size.is_some_and(|p| p > 0))?;
            }
        }
        match self.family {
            Family::TextSlidingWindow | Family::SpeechSlidingWindow => {
                needs("attention_window", self.attention_window.is_some())?;
            }
            Family::TextNystrom => {
                needs("n_landmarks >= 1", self.n_landmarks.is_some_and(|m| m >= 1))?;
                needs("pinv_iterations", self.pinv_iterations.is_some())?;
            }
            Family::VisionFull => needs("image_size", self.image_size.is_some_and(|s| s > 0))?,
            Family::VisionShiftedWindow => {
                let s = self.swin.as_ref();
                needs("swin stages", s.is_some_and(|s| !s.depths.is_empty()))?;
                let s = s.unwrap();
                needs("one head count per stage", s.heads.len() == s.depths.len())?;
                needs("window >= 1", s.window >= 1)?;
                needs("n_layers equal to the stage depth sum", s.depths.iter().sum::<usize>() == self.n_layers)?;
                for (i, &h) in s.heads.iter().enumerate() {
                    let dim = self.d_model << i;
                    needs("stage widths divisible by heads", h > 0 && dim % h == 0)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn preset(family: Family, preset: Preset) -> ModelConfig {
        let paper = preset == Preset::PaperDims;
        let (d, layers, heads, ff) = if paper { (768, 12, 12, 3072) } else { (256, 4, 4, 1024) };
        let mut c = ModelConfig {
            name: family.model_name().to_string(),
            family,
            preset,
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            d_ff: ff,
            vocab_size: 0,
            type_vocab_size: 0,
            max_positions: 0,
            attention_window: None,
            global_first_token: false,
            n_landmarks: None,
            pinv_iterations: None,
            patch_size: None,
            image_size: None,
            swin: None,
            pad_multiple: None,
            featurizer: None,
            framerate_hz: None,
            init_std: default_init_std(),
        };
        match family {
            Family::TextFull => {
                c.vocab_size = 30522;
                c.type_vocab_size = 2;
                c.max_positions = 512;
            }
            Family::TextSlidingWindow => {
                c.vocab_size = 50265;
                c.type_vocab_size = 1;
                c.max_positions = 4098;
                c.attention_window = Some(512);
                c.global_first_token = true;
                c.pad_multiple = Some(512);
            }
            Family::TextNystrom => {
                c.vocab_size = 30000;
                c.type_vocab_size = 1;
                c.max_positions = 4098;
                c.n_landmarks = Some(64);
                c.pinv_iterations = Some(6);
            }
            Family::SpeechFull | Family::SpeechSlidingWindow => {
                c.featurizer = Some(FeaturizerSpec::standard(if paper { 512 } else { 128 }));
                c.framerate_hz = Some(50.0);
                if family == Family::SpeechSlidingWindow {
                    c.attention_window = Some(100);
                }
            }
            Family::VisionFull => {
                c.patch_size = Some(16);
                c.image_size = Some(224);
            }
            Family::VisionShiftedWindow => {
                let (embed, heads, depths) = if paper {
                    (128, vec![4, 8, 16, 32], vec![2, 2, 18, 2])
                } else {
                    (32, vec![1, 2, 4, 8], vec![2, 2, 6, 2])
                };
                c.d_model = embed;
                c.d_ff = 4 * embed;
                c.n_heads = heads[0];
                c.n_layers = depths.iter().sum();
                c.patch_size = Some(4);
                c.pad_multiple = Some(224);
                c.swin = Some(SwinSpec {
                    depths,
                    heads,
                    window: 7,
                });
            }
        }
        c
    }

    pub fn all_presets(preset: Preset) -> Vec<ModelConfig> {
        Family::ALL.iter().map(|f| ModelConfig::preset(*f, preset)).collect()
    }

    pub fn from_toml_str(s: &str) -> Result<ModelConfig> {
        let c: ModelConfig = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ModelConfig> {
        ModelConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// Resolves a model name under a preset.
pub fn model_config(name: &str, preset: Preset) -> Result<ModelConfig> {
    Ok(ModelConfig::preset(Family::from_model_name(name)?, preset))
}
