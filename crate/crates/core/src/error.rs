use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op} would produce an empty output: {detail}")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("waveform of {samples} samples is shorter than the featurizer receptive field ({receptive_field})")]
    TooShort { samples: usize, receptive_field: usize },

    #[error("instrumentation error: {0}")]
    Instrumentation(String),

    #[error("allocation of {requested} bytes exceeds the memory budget of {limit} bytes")]
    BudgetExceeded { requested: u64, limit: u64 },

    #[error("batch-size estimator is degenerate: M2 ({m2} bytes) <= M1 ({m1} bytes)")]
    EstimatorDegenerate { m1: u64, m2: u64 },

    #[error("memory budget of {budget} bytes is too small (model-resident {resident} bytes)")]
    BudgetTooSmall { budget: u64, resident: u64 },

    #[error("model modality {model} does not match input modality {input}")]
    ModalityMismatch { model: String, input: String },

    #[error("curves are defined on different grids: {0}")]
    GridMismatch(String),

    #[error("record carries no layerwise breakdown: {0}")]
    MissingBreakdown(String),

    #[error("sweep contains no records")]
    EmptySweep,

    #[error("unknown {kind} '{name}'{}", suggestion_text(.suggestions))]
    Unknown {
        kind: &'static str,
        name: String,
        suggestions: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(String),
}

fn suggestion_text(suggestions: &[String]) -> String {
    if suggestions.is_empty() {
        String::new()
    } else {
        format!(" (did you mean: {}?)", suggestions.join(", "))
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Unknown-name error listing the closest valid names first.
    pub fn unknown(kind: &'static str, name: &str, valid: &[&str]) -> Self {
        let mut ranked: Vec<(usize, &str)> = valid
            .iter()
            .map(|v| (strsim::levenshtein(&name.to_ascii_lowercase(), v), *v))
            .collect();
        ranked.sort();
        let suggestions = ranked
            .iter()
            .filter(|(d, _)| *d <= 3.max(name.len() / 2))
            .map(|(_, v)| v.to_string())
            .take(3)
            .collect::<Vec<_>>();
        let suggestions = if suggestions.is_empty() {
            valid.iter().map(|s| s.to_string()).collect()
        } else {
            suggestions
        };
        Error::Unknown {
            kind,
            name: name.to_string(),
            suggestions,
        }
    }
}
