//! `attnprof`: profile, sweep and compare attention variants.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnprof_core::analysis::{emit_report, layerwise_breakdown, tipping_points, Curve, Direction, LayerShares};
use attnprof_core::harness::{run_sweep, MeasurementProtocol, SweepSpec, DEFAULT_BUDGET_BYTES};
use attnprof_core::modelzoo::model_config;
use attnprof_core::workloads::{grid_for, typical_lengths, SweepGrid};
use attnprof_core::{Error, Family, Harness, Metric, Modality, Mode, ModelConfig, Preset, ProfileRecord, Source, SweepResult, TagKind};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "attnprof", version, about = "Efficiency profiling for Transformer encoders across text, speech and vision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure models at a few input sizes.
    Profile(ProfileArgs),
    /// Measure models over a grid of input sizes (resumable).
    Sweep(SweepArgs),
    /// Tipping points between efficient models and their full-attention baselines.
    TippingPoint(TippingArgs),
    /// Per-layer-type shares of latency, memory or flops.
    Layerwise(LayerwiseArgs),
    /// Closed-form flops, memory and parameter counts over a grid; prints the sweep JSON.
    Cost(CostArgs),
    /// Charts, tables and a summary from a sweep file.
    Report(ReportArgs),
    /// Available model names.
    ListModels,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Comma-separated model names or paths to model config files.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    /// Dimension preset for named models.
    #[arg(long, default_value = "desk-dims")]
    preset: Preset,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value = "inference")]
    mode: Mode,
    /// Memory budget for the batch-size search.
    #[arg(long, default_value_t = DEFAULT_BUDGET_BYTES)]
    budget_bytes: u64,
    /// Worker threads; ATTNPROF_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measurements per grid point, each with its own input seed.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Timed iterations per measurement.
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Trailing iterations averaged into the reported value.
    #[arg(long, default_value_t = 10)]
    reported: usize,
    /// Upper bound on the throughput batch size.
    #[arg(long)]
    batch_cap: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "attnprof-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input sizes: tokens (text), seconds (speech) or pixels (vision).
    #[arg(long, value_delimiter = ',', default_value = "512")]
    at: Vec<f64>,
    #[arg(long, alias = "metric", value_delimiter = ',', default_value = "latency,throughput,memory,params")]
    metrics: Vec<Metric>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `start:stop:step` in tokens, seconds or pixels; defaults to the modality's grid.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, alias = "metric", value_delimiter = ',', default_value = "latency,memory")]
    metrics: Vec<Metric>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, alias = "metric", value_delimiter = ',', default_value = "flops")]
    metrics: Vec<Metric>,
    #[arg(long, default_value = "inference")]
    mode: Mode,
    /// Also write `cost.json` and `run.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TippingArgs {
    /// Sweep JSON file; read from stdin when absent or `-`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Moving-average window applied to both curves first.
    #[arg(long, default_value_t = 0)]
    smooth: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LayerwiseArgs {
    /// Read records from a sweep file instead of measuring.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, default_value = "desk-dims")]
    preset: Preset,
    #[arg(long, value_delimiter = ',', default_value = "512")]
    at: Vec<f64>,
    #[arg(long, default_value = "latency")]
    metric: Metric,
    /// Use the cost model (flops or memory) instead of measuring.
    #[arg(long)]
    analytic: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep JSON file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "attnprof-out/report")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Unknown { .. } | Error::Config(_) | Error::Toml(_) | Error::ModalityMismatch { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Profile(a) => profile(a, &argv),
        Command::Sweep(a) => sweep(a, &argv),
        Command::TippingPoint(a) => tipping(a),
        Command::Layerwise(a) => layerwise(a, &argv),
        Command::Cost(a) => cost(a, &argv),
        Command::Report(a) => report(a, &argv),
        Command::ListModels => list_models(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `attnprof --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn resolve_models(names: &[String], preset: Preset) -> Result<Vec<ModelConfig>, Failure> {
    if names.is_empty() {
        return Err(Failure::Usage("--models is required".into()));
    }
    names
        .iter()
        .map(|n| {
            if n.ends_with(".toml") {
                ModelConfig::load(Path::new(n)).map_err(|e| match e {
                    Error::Io(io) => Failure::Usage(format!("{n}: {io}")),
                    e => e.into(),
                })
            } else {
                Ok(model_config(n, preset)?)
            }
        })
        .collect()
}

/// Models grouped by modality, each with its grid.
fn grids(models: &[ModelConfig], grid: Option<&str>, at: Option<&[f64]>) -> Result<Vec<(SweepGrid, Vec<ModelConfig>)>, Failure> {
    let mut by: BTreeMap<Modality, Vec<ModelConfig>> = BTreeMap::new();
    for m in models {
        by.entry(m.modality()).or_default().push(m.clone());
    }
    if grid.is_some() && by.len() > 1 {
        return Err(Failure::Usage("--grid needs models of a single modality".into()));
    }
    by.into_iter()
        .map(|(modality, ms)| {
            let g = match (grid, at) {
                (Some(spec), _) => SweepGrid::parse(modality, spec)?,
                (None, Some(values)) => SweepGrid::from_values(modality, values.to_vec()),
                (None, None) => grid_for(modality),
            };
            Ok((g, ms))
        })
        .collect()
}

fn set_threads(requested: Option<usize>) -> Result<usize, Failure> {
    let env = std::env::var("ATTNPROF_THREADS").ok();
    let n = match env.as_deref() {
        Some(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Usage(format!("ATTNPROF_THREADS={v:?} is not a thread count")))?,
        ),
        None => requested,
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        // fails only if a pool already exists, which keeps the first setting
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

fn harness(run: &RunArgs) -> Result<Harness, Failure> {
    let protocol = MeasurementProtocol {
        total_iters: run.iters,
        reported_iters: run.reported,
    };
    protocol.validate()?;
    set_threads(run.threads)?;
    let mut h = Harness::default();
    h.protocol = protocol;
    h.budget_bytes = run.budget_bytes;
    h.seed = run.seed;
    h.batch_cap = run.batch_cap;
    Ok(h)
}

fn check_empirical(metrics: &[Metric]) -> Outcome {
    if metrics.is_empty() {
        return Err(Failure::Usage("no metrics given".into()));
    }
    Ok(())
}

struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    models: &'a [ModelConfig],
    grids: Vec<serde_json::Value>,
    settings: serde_json::Value,
    outputs: Vec<PathBuf>,
}

fn write_manifest(dir: &Path, m: Manifest) -> Outcome {
    std::fs::create_dir_all(dir)?;
    let value = json!({
        "tool": "attnprof",
        "version": env!("CARGO_PKG_VERSION"),
        "command": m.command,
        "argv": m.argv,
        "models": m.models,
        "grids": m.grids,
        "settings": m.settings,
        "outputs": m.outputs,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

fn grid_json(groups: &[(SweepGrid, Vec<ModelConfig>)]) -> Vec<serde_json::Value> {
    groups
        .iter()
        .map(|(g, ms)| {
            json!({
                "modality": g.modality,
                "points": g.points,
                "sizes": g.sizes(),
                "nominal_tokens": g.tokens_per_point,
                "models": ms.iter().map(|m| m.name.clone()).collect::<Vec<_>>(),
            })
        })
        .collect()
}

fn run_settings(h: &Harness, run: &RunArgs, metrics: &[Metric], source: Source) -> serde_json::Value {
    json!({
        "metrics": metrics,
        "mode": run.mode,
        "source": source,
        "env": h.env(),
        "repeats": run.repeats,
        "out": run.out,
    })
}

fn print_records(records: &[ProfileRecord]) {
    let mut out = io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<16} {:<10} {:<10} {:>9} {:>8} {:>6} {:>16}  unit",
        "model", "mode", "metric", "nominal", "tokens", "batch", "value"
    );
    for r in records {
        let value = match &r.error {
            Some(e) => format!("error: {e}"),
            None => format!("{:>16.3}  {}", r.value, r.metric.unit()),
        };
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:<10} {:>9} {:>8} {:>6} {}",
            r.model,
            r.mode.to_string(),
            r.metric.name(),
            r.nominal,
            r.tokens,
            r.batch_size,
            value
        );
    }
}

/// Runs every modality group into one sweep file.
fn measure_groups(
    h: &Harness,
    groups: &[(SweepGrid, Vec<ModelConfig>)],
    metrics: &[Metric],
    mode: Mode,
    source: Source,
    repeats: usize,
    path: &Path,
) -> Result<(SweepResult, usize), Failure> {
    let mut new_failures = 0;
    for (grid, models) in groups {
        let spec = SweepSpec {
            models: models.clone(),
            grid: grid.clone(),
            metrics: metrics.to_vec(),
            mode,
            source,
            repeats,
        };
        let before = SweepResult::load_or_default(path)?.records.len();
        let run = run_sweep(h, &spec, Some(path))?;
        new_failures += run.result.records[before..].iter().filter(|r| !r.is_ok()).count();
        eprintln!(
            "{}: {} new record(s), {} already present",
            grid.modality, run.measured, run.skipped
        );
    }
    Ok((SweepResult::load_or_default(path)?, new_failures))
}

fn finish(failures: usize) -> Outcome {
    if failures > 0 {
        return Err(Failure::Run(format!("{failures} measurement(s) failed; see the error column")));
    }
    Ok(())
}

fn profile(a: ProfileArgs, argv: &[String]) -> Outcome {
    check_empirical(&a.metrics)?;
    let models = resolve_models(&a.model.models, a.model.preset)?;
    let groups = grids(&models, None, Some(&a.at))?;
    let h = harness(&a.run)?;
    let path = a.run.out.join("profile.json");
    let (result, failures) = measure_groups(&h, &groups, &a.metrics, a.run.mode, Source::Empirical, a.run.repeats, &path)?;
    print_records(&result.records);
    write_manifest(
        &a.run.out,
        Manifest {
            command: "profile",
            argv,
            models: &models,
            grids: grid_json(&groups),
            settings: run_settings(&h, &a.run, &a.metrics, Source::Empirical),
            outputs: vec![path.clone(), attnprof_core::harness::csv_path(&path)],
        },
    )?;
    finish(failures)
}

fn sweep(a: SweepArgs, argv: &[String]) -> Outcome {
    check_empirical(&a.metrics)?;
    let models = resolve_models(&a.model.models, a.model.preset)?;
    let groups = grids(&models, a.grid.as_deref(), None)?;
    let h = harness(&a.run)?;
    let path = a.run.out.join("sweep.json");
    let (result, failures) = measure_groups(&h, &groups, &a.metrics, a.run.mode, Source::Empirical, a.run.repeats, &path)?;
    print_records(&result.records);
    write_manifest(
        &a.run.out,
        Manifest {
            command: "sweep",
            argv,
            models: &models,
            grids: grid_json(&groups),
            settings: run_settings(&h, &a.run, &a.metrics, Source::Empirical),
            outputs: vec![path.clone(), attnprof_core::harness::csv_path(&path)],
        },
    )?;
    finish(failures)
}

fn cost(a: CostArgs, argv: &[String]) -> Outcome {
    if let Some(m) = a.metrics.iter().find(|m| !m.has_analytic_model()) {
        return Err(Failure::Usage(format!(
            "no closed-form model for {m}; choose from flops, memory, params"
        )));
    }
    let models = resolve_models(&a.model.models, a.model.preset)?;
    let groups = grids(&models, a.grid.as_deref(), None)?;
    let mut h = Harness::new(std::sync::Arc::new(attnprof_core::instrument::FakeClock::default()));
    h.breakdown = true;
    let mut result = SweepResult::default();
    for (grid, ms) in &groups {
        let spec = SweepSpec {
            models: ms.clone(),
            grid: grid.clone(),
            metrics: a.metrics.clone(),
            mode: a.mode,
            source: Source::Analytic,
            repeats: 1,
        };
        result.merge(run_sweep(&h, &spec, None)?.result);
    }
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(dir) = &a.out {
        let path = dir.join("cost.json");
        result.save(&path)?;
        write_manifest(
            dir,
            Manifest {
                command: "cost",
                argv,
                models: &models,
                grids: grid_json(&groups),
                settings: json!({ "metrics": a.metrics, "mode": a.mode, "source": Source::Analytic }),
                outputs: vec![path.clone(), attnprof_core::harness::csv_path(&path)],
            },
        )?;
    }
    let failures = result.records.iter().filter(|r| !r.is_ok()).count();
    finish(failures)
}

fn read_sweep(input: Option<&Path>) -> Result<SweepResult, Failure> {
    let text = match input {
        Some(p) if p != Path::new("-") => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("input is not a sweep file: {e}")))
}

fn smoothed_rows(sweep: &SweepResult, window: usize) -> Vec<attnprof_core::analysis::TippingRow> {
    let mut rows = tipping_points(sweep);
    if window > 1 {
        for row in &mut rows {
            let curve = |m: &str| Curve::from_sweep(sweep, m, row.metric, row.mode, row.source).map(|c| c.smoothed(window));
            if let (Ok(v), Ok(e)) = (curve(&row.vanilla), curve(&row.efficient)) {
                row.point = attnprof_core::analysis::tipping_point(&v, &e, Direction::for_metric(row.metric)).unwrap_or(None);
            }
        }
    }
    rows
}

fn tipping(a: TippingArgs) -> Outcome {
    let sweep = read_sweep(a.input.as_deref())?;
    if sweep.records.is_empty() {
        return Err(Error::EmptySweep.into());
    }
    let rows = smoothed_rows(&sweep, a.smooth);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    if rows.is_empty() {
        println!("no efficient/full-attention pair found in the input");
    }
    for r in rows {
        let point = r.point.map_or("none".to_string(), |p| format!("{p}"));
        println!(
            "{} {} {} {}: {} vs {} -> {}",
            r.modality,
            r.metric.name(),
            r.mode,
            r.source,
            r.efficient,
            r.vanilla,
            point
        );
    }
    Ok(())
}

fn print_shares(shares: &[LayerShares]) {
    let mut out = io::stdout().lock();
    let _ = write!(out, "{:<16} {:<10} {:>8}", "model", "metric", "nominal");
    for k in TagKind::ALL {
        let _ = write!(out, " {:>20}", k.label());
    }
    let _ = writeln!(out);
    for s in shares {
        let _ = write!(out, "{:<16} {:<10} {:>8}", s.model, s.metric.name(), s.nominal);
        for k in TagKind::ALL {
            let _ = write!(out, " {:>19.1}%", 100.0 * s.shares[&k]);
        }
        let _ = writeln!(out);
    }
}

fn layerwise(a: LayerwiseArgs, argv: &[String]) -> Outcome {
    let (records, models, groups) = match &a.input {
        Some(p) => {
            let sweep = read_sweep(Some(p))?;
            let records: Vec<ProfileRecord> = sweep
                .records
                .into_iter()
                .filter(|r| r.metric == a.metric && (a.models.is_empty() || a.models.contains(&r.model)))
                .collect();
            (records, Vec::new(), Vec::new())
        }
        None => {
            let models = resolve_models(&a.models, a.preset)?;
            let groups = grids(&models, None, Some(&a.at))?;
            let source = if a.analytic { Source::Analytic } else { Source::Empirical };
            if a.analytic && !a.metric.has_analytic_model() {
                return Err(Failure::Usage(format!("no closed-form model for {}", a.metric)));
            }
            let h = harness(&a.run)?;
            let mut records = Vec::new();
            for (grid, ms) in &groups {
                let spec = SweepSpec {
                    models: ms.clone(),
                    grid: grid.clone(),
                    metrics: vec![a.metric],
                    mode: a.run.mode,
                    source,
                    repeats: 1,
                };
                records.extend(run_sweep(&h, &spec, None)?.result.records);
            }
            (records, models, groups)
        }
    };
    if let Some(r) = records.iter().find(|r| !r.is_ok()) {
        return Err(Failure::Run(format!("{} at size {}: {}", r.model, r.size, r.error.as_deref().unwrap_or(""))));
    }
    let shares = layerwise_breakdown(&records)?;
    print_shares(&shares);
    let dir = &a.run.out;
    std::fs::create_dir_all(dir)?;
    let rec_path = dir.join("layerwise.json");
    SweepResult { records }.save(&rec_path)?;
    let shares_path = dir.join("layerwise_shares.json");
    std::fs::write(&shares_path, serde_json::to_string_pretty(&shares)? + "\n")?;
    write_manifest(
        dir,
        Manifest {
            command: "layerwise",
            argv,
            models: &models,
            grids: grid_json(&groups),
            settings: json!({
                "metric": a.metric,
                "mode": a.run.mode,
                "analytic": a.analytic,
                "input": a.input,
                "seed": a.run.seed,
                "protocol": { "total_iters": a.run.iters, "reported_iters": a.run.reported },
            }),
            outputs: vec![rec_path, shares_path],
        },
    )
}

fn report(a: ReportArgs, argv: &[String]) -> Outcome {
    let sweep = read_sweep(Some(&a.input))?;
    let files = emit_report(&sweep, &typical_lengths(), &a.out)?;
    let mut outputs = files.line_charts.clone();
    outputs.extend(files.layerwise_charts.iter().cloned());
    outputs.extend(files.tables.iter().cloned());
    outputs.push(files.summary.clone());
    for p in &outputs {
        println!("{}", p.display());
    }
    write_manifest(
        &a.out,
        Manifest {
            command: "report",
            argv,
            models: &[],
            grids: Vec::new(),
            settings: json!({ "input": a.input }),
            outputs,
        },
    )
}

fn list_models() -> Outcome {
    for f in Family::ALL {
        let vanilla = f.vanilla().map_or("-", |v| v.model_name());
        println!("{:<16} {:<20} {:<8} baseline: {}", f.model_name(), f.archetype(), f.modality().to_string(), vanilla);
    }
    Ok(())
}
