//! Metric protocols, batch-size search, and persisted sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::costmodel::{cost_of, tokens_for, TRAINING_FLOP_FACTOR};
use crate::error::{Error, Result};
use crate::instrument::{
    calibrate_overhead, measure_peak_memory, measure_peak_memory_limited, param_report, with_timer, Clock,
    MonotonicClock,
};
use crate::modelzoo::{count_params, EncoderModel, ModelConfig, ModelInput};
use crate::numkernel::{tally_ops, Graph};
use crate::taxonomy::{LayerTag, Modality, Mode, TagKind};
use crate::workloads::{make_input, SweepGrid};

/// Default memory budget for batch-size search.
pub const DEFAULT_BUDGET_BYTES: u64 = 4 << 30;
/// Learning rate of the SGD update inside a training step.
pub const TRAIN_LR: f32 = 1e-4;

/// How many iterations run and how many of the last ones are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementProtocol {
    pub total_iters: usize,
    pub reported_iters: usize,
}

impl Default for MeasurementProtocol {
    fn default() -> Self {
        MeasurementProtocol {
            total_iters: 20,
            reported_iters: 10,
        }
    }
}

impl MeasurementProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.reported_iters == 0 || self.reported_iters > self.total_iters {
            return Err(Error::Config(format!(
                "protocol reports {} of {} iterations",
                self.reported_iters, self.total_iters
            )));
        }
        Ok(())
    }

    /// Index of the first iteration that is reported.
    pub fn first_reported(&self) -> usize {
        self.total_iters - self.reported_iters
    }

    /// Mean of the reported (trailing) samples.
    pub fn aggregate(&self, samples: &[f64]) -> f64 {
        let tail = &samples[samples.len().saturating_sub(self.reported_iters)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LatencyMs,
    ThroughputExPerSec,
    MaxMemoryBytes,
    ParamCount,
    /// Forward (or 3× forward in training) flops by the counting convention.
    Flops,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::LatencyMs,
        Metric::ThroughputExPerSec,
        Metric::MaxMemoryBytes,
        Metric::ParamCount,
        Metric::Flops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::LatencyMs => "latency",
            Metric::ThroughputExPerSec => "throughput",
            Metric::MaxMemoryBytes => "memory",
            Metric::ParamCount => "params",
            Metric::Flops => "flops",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::LatencyMs => "ms",
            Metric::ThroughputExPerSec => "examples/s",
            Metric::MaxMemoryBytes => "bytes",
            Metric::ParamCount => "parameters",
            Metric::Flops => "flops",
        }
    }

    /// Throughput is the only metric where larger is better.
    pub fn lower_is_better(self) -> bool {
        self != Metric::ThroughputExPerSec
    }

    pub fn has_analytic_model(self) -> bool {
        matches!(self, Metric::MaxMemoryBytes | Metric::ParamCount | Metric::Flops)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let m = match s.to_ascii_lowercase().as_str() {
            "latency" | "latency_ms" => Metric::LatencyMs,
            "throughput" | "throughput_ex_per_sec" => Metric::ThroughputExPerSec,
            "memory" | "max_memory" | "max_memory_bytes" | "bytes" => Metric::MaxMemoryBytes,
            "params" | "param_count" | "parameters" => Metric::ParamCount,
            "flops" => Metric::Flops,
            _ => {
                let names: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
                return Err(Error::unknown("metric", s, &names));
            }
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Empirical,
    Analytic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Empirical => "empirical",
            Source::Analytic => "analytic",
        })
    }
}

/// Everything needed to rerun a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetadata {
    pub threads: usize,
    /// Mean cost of an empty timed region, not subtracted from results.
    pub timer_overhead_ns: u64,
    pub budget_bytes: u64,
    pub seed: u64,
    pub protocol: MeasurementProtocol,
    /// Training steps include one SGD update.
    pub optimizer_step_included: bool,
    /// Training flops are this multiple of forward flops.
    pub backward_flop_factor: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_cap: Option<usize>,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagValue {
    pub kind: TagKind,
    pub layer_index: usize,
    pub value: f64,
}

impl TagValue {
    pub fn tag(&self) -> LayerTag {
        LayerTag::new(self.kind, self.layer_index)
    }
}

fn tag_values(map: &BTreeMap<LayerTag, f64>) -> Vec<TagValue> {
    map.iter()
        .map(|(t, v)| TagValue {
            kind: t.kind,
            layer_index: t.layer_index,
            value: *v,
        })
        .collect()
}

/// One measured or modeled value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub model: String,
    pub preset: String,
    pub modality: Modality,
    pub mode: Mode,
    pub metric: Metric,
    pub source: Source,
    /// Grid coordinate: repeat count, seconds, or pixels.
    pub point: f64,
    /// Raw input size handed to the model: tokens, samples, or image side.
    pub size: usize,
    /// Grid-level token count (pixels for vision), the x axis of charts.
    pub nominal: usize,
    /// Encoder sequence length after padding and featurization.
    pub tokens: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub repeat: usize,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Vec<TagValue>>,
    /// Part of `value` outside any tagged region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub env: EnvMetadata,
}

/// Identity of a record within a sweep, used to resume.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RecordKey {
    pub model: String,
    pub preset: String,
    pub mode: Mode,
    pub metric: Metric,
    pub source: Source,
    pub size: usize,
    pub repeat: usize,
}

impl ProfileRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            model: self.model.clone(),
            preset: self.preset.clone(),
            mode: self.mode,
            metric: self.metric,
            source: self.source,
            size: self.size,
            repeat: self.repeat,
        }
    }

    pub fn breakdown_map(&self) -> Option<BTreeMap<LayerTag, f64>> {
        self.breakdown
            .as_ref()
            .map(|b| b.iter().map(|t| (t.tag(), t.value)).collect())
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Timing of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    /// Mean of the reported iterations, ms.
    pub mean_ms: f64,
    /// Every iteration, ms.
    pub iteration_ms: Vec<f64>,
    /// Mean exclusive time per tagged region over the reported iterations.
    pub per_tag_ms: BTreeMap<LayerTag, f64>,
    /// Mean time outside any region over the reported iterations.
    pub residual_ms: f64,
}

const NS_PER_MS: f64 = 1e6;

/// Runs `step` under the protocol, timing each iteration with `clock`.
pub fn time_protocol(
    protocol: &MeasurementProtocol,
    clock: Arc<dyn Clock>,
    mut step: impl FnMut() -> Result<()>,
) -> Result<LatencySample> {
    protocol.validate()?;
    let mut iteration_ms = Vec::with_capacity(protocol.total_iters);
    let mut per_tag_ns: BTreeMap<LayerTag, u64> = BTreeMap::new();
    let mut residual_ns = 0u64;
    for i in 0..protocol.total_iters {
        let (out, tree) = with_timer(Arc::clone(&clock), &mut step)?;
        out?;
        iteration_ms.push(tree.root_elapsed() as f64 / NS_PER_MS);
        if i >= protocol.first_reported() {
            let residual = tree.residual();
            residual_ns += residual;
            // the root is tagged Other(0); its exclusive time is the residual
            for (tag, ns) in tree.by_tag() {
                let ns = if tag == LayerTag::other(0) { ns - residual } else { ns };
                if ns > 0 {
                    *per_tag_ns.entry(tag).or_default() += ns;
                }
            }
        }
    }
    let k = protocol.reported_iters as f64;
    Ok(LatencySample {
        mean_ms: protocol.aggregate(&iteration_ms),
        iteration_ms,
        per_tag_ms: per_tag_ns.into_iter().map(|(t, ns)| (t, ns as f64 / NS_PER_MS / k)).collect(),
        residual_ms: residual_ns as f64 / NS_PER_MS / k,
    })
}

/// Largest batch that fits in `budget` bytes, by linear extrapolation from
/// batch 1 and 2 and shrinking by 10% until a trial fits.
///
/// `probe(b)` runs one step at batch `b` and returns the total bytes it
/// needed (resident included), or `None` if it overran the budget.
pub fn estimate_max_batch(
    budget: u64,
    resident: u64,
    probe: impl FnMut(usize) -> Result<Option<u64>>,
) -> Result<usize> {
    estimate_max_batch_capped(budget, resident, None, probe)
}

/// As [`estimate_max_batch`], with the first trial clamped to `cap`.
pub fn estimate_max_batch_capped(
    budget: u64,
    resident: u64,
    cap: Option<usize>,
    mut probe: impl FnMut(usize) -> Result<Option<u64>>,
) -> Result<usize> {
    let too_small = || Error::BudgetTooSmall { budget, resident };
    if budget <= resident {
        return Err(too_small());
    }
    let m1 = probe(1)?.ok_or_else(too_small)?;
    let m2 = probe(2)?.ok_or_else(too_small)?;
    if m2 <= m1 {
        return Err(Error::EstimatorDegenerate { m1, m2 });
    }
    let mut bsz = ((budget - resident) / (m2 - m1)) as usize;
    if let Some(cap) = cap {
        bsz = bsz.min(cap.max(1));
    }
    while bsz > 0 {
        match probe(bsz)? {
            Some(m) if m <= budget => return Ok(bsz),
            _ => bsz = bsz * 9 / 10,
        }
    }
    Err(too_small())
}

/// Runs measurements against one clock, protocol, and budget.
#[derive(Clone)]
pub struct Harness {
    pub protocol: MeasurementProtocol,
    pub clock: Arc<dyn Clock>,
    pub budget_bytes: u64,
    pub seed: u64,
    /// Attach per-tag breakdowns to latency and memory records.
    pub breakdown: bool,
    /// Upper bound on searched batch sizes.
    pub batch_cap: Option<usize>,
    timer_overhead_ns: u64,
}

impl Default for Harness {
    fn default() -> Self {
        Harness::new(Arc::new(MonotonicClock::default()))
    }
}

impl Harness {
    pub fn new(clock: Arc<dyn Clock>) -> Harness {
        let timer_overhead_ns = calibrate_overhead(Arc::clone(&clock), 1000);
        Harness {
            protocol: MeasurementProtocol::default(),
            clock,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            seed: 0,
            breakdown: true,
            batch_cap: None,
            timer_overhead_ns,
        }
    }

    pub fn timer_overhead_ns(&self) -> u64 {
        self.timer_overhead_ns
    }

    pub fn env(&self) -> EnvMetadata {
        EnvMetadata {
            threads: rayon::current_num_threads(),
            timer_overhead_ns: self.timer_overhead_ns,
            budget_bytes: self.budget_bytes,
            seed: self.seed,
            protocol: self.protocol,
            optimizer_step_included: true,
            backward_flop_factor: TRAINING_FLOP_FACTOR,
            batch_cap: self.batch_cap,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// A record skeleton for `config` at raw `size`.
    pub fn record(&self, config: &ModelConfig, metric: Metric, mode: Mode, source: Source, size: usize) -> ProfileRecord {
        ProfileRecord {
            model: config.name.clone(),
            preset: config.preset.name().to_string(),
            modality: config.modality(),
            mode,
            metric,
            source,
            point: size as f64,
            size,
            nominal: size,
            tokens: tokens_for(config, size),
            batch_size: 1,
            repeat: 0,
            value: 0.0,
            breakdown: None,
            residual: None,
            error: None,
            env: self.env(),
        }
    }

    fn step(&self, model: &mut EncoderModel, input: &ModelInput, batch: usize, mode: Mode) -> Result<()> {
        match mode {
            Mode::Inference => {
                let g = Graph::inference();
                model.forward(&g, input, batch).map(|_| ())
            }
            Mode::Training => model.train_step(input, batch, TRAIN_LR).map(|_| ()),
        }
    }

    /// A private copy for training steps, with the head attached and no
    /// parameter storage shared with `model`.
    fn trainable(&self, model: &EncoderModel) -> EncoderModel {
        let mut m = model.deep_clone();
        m.attach_head(self.seed);
        m
    }

    fn working_copy(&self, model: &EncoderModel, mode: Mode) -> EncoderModel {
        match mode {
            Mode::Inference => model.clone(),
            Mode::Training => self.trainable(model),
        }
    }

    /// Mean step time at batch 1 over the protocol's reported iterations.
    pub fn measure_latency(&self, model: &EncoderModel, input: &ModelInput, mode: Mode) -> Result<ProfileRecord> {
        let mut m = self.working_copy(model, mode);
        let sample = time_protocol(&self.protocol, Arc::clone(&self.clock), || self.step(&mut m, input, 1, mode))?;
        let mut r = self.record(model.config(), Metric::LatencyMs, mode, Source::Empirical, input.size());
        r.value = sample.mean_ms;
        if self.breakdown {
            r.breakdown = Some(tag_values(&sample.per_tag_ms));
            r.residual = Some(sample.residual_ms);
        }
        Ok(r)
    }

    /// Total bytes of one step at `batch`, or `None` if it overran the budget.
    fn probe_memory(&self, model: &EncoderModel, input: &ModelInput, batch: usize, mode: Mode) -> Result<Option<u64>> {
        let mut m = self.working_copy(model, mode);
        let resident = m.resident_bytes();
        let limit = self.budget_bytes.saturating_sub(resident);
        match measure_peak_memory_limited(limit, || self.step(&mut m, input, batch, mode)) {
            Ok((out, peak)) => {
                out?;
                Ok(Some(resident + peak.peak_bytes))
            }
            Err(Error::BudgetExceeded { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Batch size for throughput runs under the memory budget.
    pub fn max_batch(&self, model: &EncoderModel, input: &ModelInput, mode: Mode) -> Result<usize> {
        let resident = self.working_copy(model, mode).resident_bytes();
        estimate_max_batch_capped(self.budget_bytes, resident, self.batch_cap, |b| {
            self.probe_memory(model, input, b, mode)
        })
    }

    /// Examples per second at the largest batch that fits the budget.
    pub fn measure_throughput(&self, model: &EncoderModel, input: &ModelInput, mode: Mode) -> Result<ProfileRecord> {
        let batch = self.max_batch(model, input, mode)?;
        let mut m = self.working_copy(model, mode);
        let sample = time_protocol(&self.protocol, Arc::clone(&self.clock), || self.step(&mut m, input, batch, mode))?;
        let mut r = self.record(model.config(), Metric::ThroughputExPerSec, mode, Source::Empirical, input.size());
        r.batch_size = batch;
        r.value = throughput(batch, sample.mean_ms);
        Ok(r)
    }

    /// Resident bytes plus the activation peak of one batch-1 step.
    pub fn measure_max_memory(&self, model: &EncoderModel, input: &ModelInput, mode: Mode) -> Result<ProfileRecord> {
        let mut m = self.working_copy(model, mode);
        let resident = m.resident_bytes();
        let (out, peak) = measure_peak_memory(|| self.step(&mut m, input, 1, mode));
        out?;
        let mut r = self.record(model.config(), Metric::MaxMemoryBytes, mode, Source::Empirical, input.size());
        r.value = (resident + peak.peak_bytes) as f64;
        if self.breakdown {
            // weights count toward their own tag, activations as live at the peak
            let mut by_tag: BTreeMap<LayerTag, f64> = peak.at_peak.iter().map(|(t, b)| (*t, *b as f64)).collect();
            for p in m.all_params() {
                *by_tag.entry(p.tag).or_default() += p.tensor.bytes() as f64;
            }
            let tagged: f64 = by_tag.values().sum();
            r.breakdown = Some(tag_values(&by_tag));
            r.residual = Some((r.value - tagged).max(0.0));
        }
        Ok(r)
    }

    pub fn param_count(&self, model: &EncoderModel) -> ProfileRecord {
        let report = param_report(model);
        let mut r = self.record(model.config(), Metric::ParamCount, Mode::Inference, Source::Empirical, 0);
        r.tokens = 0;
        r.value = report.total_params() as f64;
        r.breakdown = Some(tag_values(&report.entries.iter().map(|(t, e)| (*t, e.params as f64)).collect()));
        r
    }

    /// Flops tallied by the kernels over one batch-1 forward pass
    /// (times three in training).
    pub fn count_flops(&self, model: &EncoderModel, input: &ModelInput, mode: Mode) -> Result<ProfileRecord> {
        let (out, tally) = tally_ops(|| {
            let g = Graph::inference();
            model.forward(&g, input, 1).map(|_| ())
        });
        out?;
        let factor = match mode {
            Mode::Inference => 1.0,
            Mode::Training => TRAINING_FLOP_FACTOR as f64,
        };
        let per_tag: BTreeMap<LayerTag, f64> = tally.flops().into_iter().map(|(t, f)| (t, f as f64 * factor)).collect();
        let mut r = self.record(model.config(), Metric::Flops, mode, Source::Empirical, input.size());
        r.value = per_tag.values().sum();
        r.breakdown = Some(tag_values(&per_tag));
        Ok(r)
    }

    pub fn measure(&self, model: &EncoderModel, input: &ModelInput, metric: Metric, mode: Mode) -> Result<ProfileRecord> {
        match metric {
            Metric::LatencyMs => self.measure_latency(model, input, mode),
            Metric::ThroughputExPerSec => self.measure_throughput(model, input, mode),
            Metric::MaxMemoryBytes => self.measure_max_memory(model, input, mode),
            Metric::ParamCount => {
                let mut r = self.param_count(model);
                r.size = input.size();
                r.tokens = tokens_for(model.config(), input.size());
                r.mode = mode;
                Ok(r)
            }
            Metric::Flops => self.count_flops(model, input, mode),
        }
    }

    /// Closed-form value of `metric` for `config` at raw `size`.
    pub fn analytic(&self, config: &ModelConfig, size: usize, metric: Metric, mode: Mode) -> Result<ProfileRecord> {
        let mut r = self.record(config, metric, mode, Source::Analytic, size);
        match metric {
            Metric::Flops => {
                let cost = cost_of(config, size, mode, 1);
                r.value = cost.total_flops() as f64;
                r.breakdown = Some(tag_values(&cost.entries.iter().map(|(t, e)| (*t, e.flops as f64)).collect()));
            }
            Metric::MaxMemoryBytes => r.value = cost_of(config, size, mode, 1).peak_bytes as f64,
            Metric::ParamCount => {
                let p = count_params(config);
                r.value = p.total_params() as f64;
                r.breakdown = Some(tag_values(&p.entries.iter().map(|(t, e)| (*t, e.params as f64)).collect()));
            }
            Metric::LatencyMs | Metric::ThroughputExPerSec => {
                return Err(Error::Config(format!("no analytic model for {metric}")));
            }
        }
        Ok(r)
    }
}

/// Examples per second for `batch` examples per step of `step_ms`.
pub fn throughput(batch: usize, step_ms: f64) -> f64 {
    if step_ms <= 0.0 {
        return 0.0;
    }
    batch as f64 * 1000.0 / step_ms
}

/// Records of one sweep in a deterministic order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<ProfileRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    preset: &'a str,
    modality: Modality,
    mode: Mode,
    metric: Metric,
    source: Source,
    point: f64,
    size: usize,
    nominal: usize,
    tokens: usize,
    batch_size: usize,
    repeat: usize,
    value: f64,
    residual: Option<f64>,
    breakdown: String,
    error: &'a str,
    threads: usize,
    seed: u64,
    budget_bytes: u64,
}

impl SweepResult {
    pub fn load(path: &Path) -> Result<SweepResult> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Loads `path` if it exists, otherwise starts empty.
    pub fn load_or_default(path: &Path) -> Result<SweepResult> {
        if path.exists() {
            SweepResult::load(path)
        } else {
            Ok(SweepResult::default())
        }
    }

    /// Writes the JSON file and its CSV mirror next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        self.write_csv(&csv_path(path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            let breakdown = r
                .breakdown
                .iter()
                .flatten()
                .map(|t| format!("{}={}", t.tag(), t.value))
                .collect::<Vec<_>>()
                .join(";");
            w.serialize(CsvRow {
                model: &r.model,
                preset: &r.preset,
                modality: r.modality,
                mode: r.mode,
                metric: r.metric,
                source: r.source,
                point: r.point,
                size: r.size,
                nominal: r.nominal,
                tokens: r.tokens,
                batch_size: r.batch_size,
                repeat: r.repeat,
                value: r.value,
                residual: r.residual,
                breakdown,
                error: r.error.as_deref().unwrap_or(""),
                threads: r.env.threads,
                seed: r.env.seed,
                budget_bytes: r.env.budget_bytes,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn keys(&self) -> BTreeSet<RecordKey> {
        self.records.iter().map(|r| r.key()).collect()
    }

    pub fn merge(&mut self, other: SweepResult) {
        let have = self.keys();
        self.records.extend(other.records.into_iter().filter(|r| !have.contains(&r.key())));
    }

    pub fn models(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.model) {
                seen.push(r.model.clone());
            }
        }
        seen
    }
}

/// CSV mirror path for a sweep JSON file.
pub fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

/// A Cartesian product of models, grid points, metrics and repeats.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub models: Vec<ModelConfig>,
    pub grid: SweepGrid,
    pub metrics: Vec<Metric>,
    pub mode: Mode,
    pub source: Source,
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub result: SweepResult,
    /// Records produced by this invocation.
    pub measured: usize,
    /// Records already present in the output file.
    pub skipped: usize,
}

/// Executes `spec` in order (model, grid point, metric, repeat). With an
/// output path, existing records are kept and skipped, and the file is
/// rewritten after every new record. Failures are stored on the record.
pub fn run_sweep(h: &Harness, spec: &SweepSpec, out: Option<&Path>) -> Result<SweepRun> {
    let mut result = match out {
        Some(p) => SweepResult::load_or_default(p)?,
        None => SweepResult::default(),
    };
    let mut have = result.keys();
    let (mut measured, mut skipped) = (0, 0);
    for config in &spec.models {
        if config.modality() != spec.grid.modality {
            return Err(Error::ModalityMismatch {
                model: config.modality().to_string(),
                input: spec.grid.modality.to_string(),
            });
        }
        let mut model: Option<EncoderModel> = None;
        for ((&point, size), &nominal) in spec.grid.points.iter().zip(spec.grid.sizes()).zip(&spec.grid.tokens_per_point) {
            for &metric in &spec.metrics {
                for repeat in 0..spec.repeats.max(1) {
                    let key = RecordKey {
                        model: config.name.clone(),
                        preset: config.preset.name().to_string(),
                        mode: spec.mode,
                        metric,
                        source: spec.source,
                        size,
                        repeat,
                    };
                    if have.contains(&key) {
                        skipped += 1;
                        continue;
                    }
                    let outcome = match spec.source {
                        Source::Analytic => h.analytic(config, size, metric, spec.mode),
                        Source::Empirical => {
                            let m = match &model {
                                Some(m) => m,
                                None => model.insert(EncoderModel::new(config, h.seed)?),
                            };
                            let input = make_input(config.modality(), size, h.seed.wrapping_add(repeat as u64));
                            h.measure(m, &input, metric, spec.mode)
                        }
                    };
                    let mut rec = outcome.unwrap_or_else(|e| {
                        let mut r = h.record(config, metric, spec.mode, spec.source, size);
                        r.error = Some(e.to_string());
                        r
                    });
                    rec.point = point;
                    rec.size = size;
                    rec.nominal = nominal;
                    rec.repeat = repeat;
                    have.insert(rec.key());
                    result.records.push(rec);
                    measured += 1;
                    if let Some(p) = out {
                        result.save(p)?;
                    }
                }
            }
        }
    }
    if let Some(p) = out {
        result.save(p)?;
    }
    Ok(SweepRun {
        result,
        measured,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_mean_of_tail() {
        let p = MeasurementProtocol::default();
        let samples: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(p.aggregate(&samples), 15.5);
        assert!(MeasurementProtocol {
            total_iters: 5,
            reported_iters: 6
        }
        .validate()
        .is_err());
    }

    #[test]
    fn metric_names() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("latncy".parse::<Metric>().unwrap_err().to_string().contains("latency"));
    }

    #[test]
    fn throughput_arithmetic() {
        assert_eq!(throughput(8, 4.0), 2000.0);
    }
}
