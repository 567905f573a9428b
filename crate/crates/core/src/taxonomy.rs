//! Layer taxonomy and the small enums shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The six layer kinds costs are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    InputEmbedding,
    PositionalEmbedding,
    SelfAttention,
    Intermediate,
    Output,
    Other,
}

impl TagKind {
    pub const ALL: [TagKind; 6] = [
        TagKind::InputEmbedding,
        TagKind::PositionalEmbedding,
        TagKind::SelfAttention,
        TagKind::Intermediate,
        TagKind::Output,
        TagKind::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TagKind::InputEmbedding => "Input Embedding",
            TagKind::PositionalEmbedding => "Positional Embedding",
            TagKind::SelfAttention => "Self-Attention",
            TagKind::Intermediate => "Intermediate",
            TagKind::Output => "Output",
            TagKind::Other => "Other",
        }
    }

    /// Legend color used by the layerwise charts.
    pub fn color(self) -> &'static str {
        match self {
            TagKind::InputEmbedding => "red",
            TagKind::PositionalEmbedding => "fuchsia",
            TagKind::SelfAttention => "blue",
            TagKind::Intermediate => "yellow",
            TagKind::Output => "green",
            TagKind::Other => "black",
        }
    }
}

/// A taxonomy label plus the encoder layer it belongs to (0 for pre-encoder layers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerTag {
    pub kind: TagKind,
    pub layer_index: usize,
}

impl LayerTag {
    pub const fn new(kind: TagKind, layer_index: usize) -> Self {
        LayerTag { kind, layer_index }
    }
    pub const fn input_embedding() -> Self {
        LayerTag::new(TagKind::InputEmbedding, 0)
    }
    pub const fn positional() -> Self {
        LayerTag::new(TagKind::PositionalEmbedding, 0)
    }
    pub const fn attention(layer: usize) -> Self {
        LayerTag::new(TagKind::SelfAttention, layer)
    }
    pub const fn intermediate(layer: usize) -> Self {
        LayerTag::new(TagKind::Intermediate, layer)
    }
    pub const fn output(layer: usize) -> Self {
        LayerTag::new(TagKind::Output, layer)
    }
    pub const fn other(layer: usize) -> Self {
        LayerTag::new(TagKind::Other, layer)
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind.label(), self.layer_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Speech,
    Vision,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
            Modality::Vision => "vision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Inference,
    Training,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Inference => "inference",
            Mode::Training => "training",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inference" | "infer" => Ok(Mode::Inference),
            "training" | "train" => Ok(Mode::Training),
            _ => Err(Error::unknown("mode", s, &["inference", "training"])),
        }
    }
}
