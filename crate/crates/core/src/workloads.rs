//! Synthetic inputs and the sweep grids for each modality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::ModelInput;
use crate::taxonomy::Modality;

/// Tokens contributed by one repeat of the synthetic sentence.
pub const TOKENS_PER_REPEAT: usize = 6;
/// Sequence start and end markers.
pub const SPECIAL_TOKENS: usize = 2;
pub const SAMPLE_RATE: usize = 16_000;
/// Nominal encoder frames per second of audio.
pub const FRAMES_PER_SECOND: f64 = 50.0;

const CLS: usize = 101;
const SEP: usize = 102;
const SENTENCE: [usize; TOKENS_PER_REPEAT] = [2023, 2003, 1037, 6251, 1012, 2028];

/// A list of input sizes for one modality. `points` are repeat counts for
/// text, seconds for speech and pixels for vision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub modality: Modality,
    pub points: Vec<f64>,
    /// Nominal tokens per point, before any model-specific padding.
    pub tokens_per_point: Vec<usize>,
}

impl SweepGrid {
    /// Raw input size handed to the model: tokens, samples or image side.
    pub fn sizes(&self) -> Vec<usize> {
        self.points.iter().map(|&p| raw_size(self.modality, p)).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Inclusive `start..=stop` in steps of `step`.
    pub fn range(modality: Modality, start: f64, stop: f64, step: f64) -> Result<SweepGrid> {
        if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
            return Err(Error::Config(format!("bad grid {start}:{stop}:{step}")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let points: Vec<f64> = (0..count).map(|i| start + i as f64 * step).collect();
        Ok(SweepGrid::from_points(modality, points))
    }

    pub fn from_points(modality: Modality, points: Vec<f64>) -> SweepGrid {
        let tokens_per_point = points.iter().map(|&p| nominal_tokens(modality, p)).collect();
        SweepGrid {
            modality,
            points,
            tokens_per_point,
        }
    }

    /// Parses `a:b:c`. For text the values are token counts and are mapped
    /// back to repeat counts; other modalities use their native unit.
    pub fn parse(modality: Modality, spec: &str) -> Result<SweepGrid> {
        let parts: Vec<&str> = spec.split(':').collect();
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("grid {spec:?} is not a:b:c")))?;
        let [a, b, c] = nums[..] else {
            return Err(Error::Config(format!("grid {spec:?} is not a:b:c")));
        };
        let g = SweepGrid::range(modality, a, b, c)?;
        Ok(SweepGrid::from_values(modality, g.points))
    }

    /// Grid at user-facing values: token counts for text, seconds for
    /// speech, pixels for vision.
    pub fn from_values(modality: Modality, values: Vec<f64>) -> SweepGrid {
        if modality != Modality::Text {
            return SweepGrid::from_points(modality, values);
        }
        // token counts; sizes are used as given
        SweepGrid {
            modality,
            tokens_per_point: values.iter().map(|&p| p as usize).collect(),
            points: values
                .iter()
                .map(|&p| (p as usize).saturating_sub(SPECIAL_TOKENS) as f64 / TOKENS_PER_REPEAT as f64)
                .collect(),
        }
    }
}

fn raw_size(modality: Modality, p: f64) -> usize {
    match modality {
        Modality::Text => text_length(p),
        Modality::Speech => samples_for(p),
        Modality::Vision => p.round() as usize,
    }
}

fn text_length(repeats: f64) -> usize {
    (TOKENS_PER_REPEAT as f64 * repeats).round() as usize + SPECIAL_TOKENS
}

fn nominal_tokens(modality: Modality, p: f64) -> usize {
    match modality {
        Modality::Text => text_length(p),
        Modality::Speech => (FRAMES_PER_SECOND * p).round() as usize,
        Modality::Vision => p.round() as usize,
    }
}

pub fn samples_for(seconds: f64) -> usize {
    (SAMPLE_RATE as f64 * seconds).round() as usize
}

/// Repeat counts 10, 20, .., 560.
pub fn text_grid() -> SweepGrid {
    SweepGrid::range(Modality::Text, 10.0, 560.0, 10.0).expect("static grid")
}

/// Durations 1.0, 1.5, .., 50.0 seconds.
pub fn speech_grid() -> SweepGrid {
    SweepGrid::range(Modality::Speech, 1.0, 50.0, 0.5).expect("static grid")
}

/// Image sides 32, 64, .., 1024.
pub fn vision_grid() -> SweepGrid {
    SweepGrid::range(Modality::Vision, 32.0, 1024.0, 32.0).expect("static grid")
}

pub fn grid_for(modality: Modality) -> SweepGrid {
    match modality {
        Modality::Text => text_grid(),
        Modality::Speech => speech_grid(),
        Modality::Vision => vision_grid(),
    }
}

/// A start marker, `n_repeats` copies of a fixed sentence, and an end marker.
pub fn make_text_input(n_repeats: usize) -> Vec<usize> {
    make_text_of_length(TOKENS_PER_REPEAT * n_repeats + SPECIAL_TOKENS)
}

/// Token ids of exactly `len` tokens following the same pattern.
pub fn make_text_of_length(len: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(len);
    if len == 0 {
        return ids;
    }
    ids.push(CLS);
    let body = len.saturating_sub(SPECIAL_TOKENS);
    ids.extend(SENTENCE.iter().copied().cycle().take(body));
    if len >= SPECIAL_TOKENS {
        ids.push(SEP);
    }
    ids
}

/// Uniform noise in `[-1, 1)` of `round(16000·duration)` samples.
pub fn make_waveform(duration_s: f64, seed: u64) -> Vec<f32> {
    make_waveform_samples(samples_for(duration_s), seed)
}

pub fn make_waveform_samples(samples: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// A `dim × dim × 3` image of uniform noise in `[0, 1)`.
pub fn make_image(dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim * dim * 3).map(|_| rng.random_range(0.0f32..1.0)).collect()
}

/// Model input of raw `size` (tokens, samples, or image side).
pub fn make_input(modality: Modality, size: usize, seed: u64) -> ModelInput {
    match modality {
        Modality::Text => ModelInput::Tokens(make_text_of_length(size)),
        Modality::Speech => ModelInput::Waveform(make_waveform_samples(size, seed)),
        Modality::Vision => ModelInput::Image {
            side: size,
            pixels: make_image(size, seed),
        },
    }
}

/// Average token counts of common datasets per modality.
pub const TYPICAL_LENGTHS: [(&str, Modality, usize); 13] = [
    ("SST", Modality::Text, 23),
    ("MNLI", Modality::Text, 36),
    ("SQuAD2.0", Modality::Text, 177),
    ("OntoNotes", Modality::Text, 506),
    ("CNN-DailyMail", Modality::Text, 863),
    ("HotpotQA", Modality::Text, 1316),
    ("TriviaQA", Modality::Text, 6589),
    ("TEDLIUM", Modality::Speech, 301),
    ("LJSpeech", Modality::Speech, 328),
    ("VoxCeleb", Modality::Speech, 390),
    ("Librispeech", Modality::Speech, 615),
    ("Spoken-SQuAD", Modality::Speech, 3080),
    ("Spotify", Modality::Speech, 101_400),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TypicalLength {
    pub dataset: &'static str,
    pub modality: Modality,
    pub tokens: usize,
}

pub fn typical_lengths() -> Vec<TypicalLength> {
    TYPICAL_LENGTHS
        .iter()
        .map(|&(dataset, modality, tokens)| TypicalLength {
            dataset,
            modality,
            tokens,
        })
        .collect()
}

/// Case-insensitive lookup of a dataset's typical length.
pub fn typical_length(name: &str) -> Result<usize> {
    TYPICAL_LENGTHS
        .iter()
        .find(|(d, _, _)| d.eq_ignore_ascii_case(name))
        .map(|&(_, _, t)| t)
        .ok_or_else(|| {
            let names: Vec<&str> = TYPICAL_LENGTHS.iter().map(|t| t.0).collect();
            Error::unknown("dataset", name, &names)
        })
}
