//! Crossover detection, layer-wise shares and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Metric, ProfileRecord, Source, SweepResult};
use crate::modelzoo::Family;
use crate::taxonomy::{LayerTag, Modality, Mode, TagKind};
use crate::workloads::TypicalLength;

/// First grid point from which `efficient` beats `vanilla` at every later
/// point. With `lower_is_better` the efficient value must be strictly
/// smaller, otherwise strictly larger.
pub fn sustained_crossover<T: Copy>(grid: &[T], vanilla: &[f64], efficient: &[f64], lower_is_better: bool) -> Option<T> {
    let wins = |i: usize| {
        if lower_is_better {
            efficient[i] < vanilla[i]
        } else {
            efficient[i] > vanilla[i]
        }
    };
    let n = grid.len().min(vanilla.len()).min(efficient.len());
    let mut first = None;
    for i in (0..n).rev() {
        if !wins(i) {
            break;
        }
        first = Some(grid[i]);
    }
    first
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

impl Direction {
    pub fn for_metric(metric: Metric) -> Direction {
        if metric.lower_is_better() {
            Direction::LowerIsBetter
        } else {
            Direction::HigherIsBetter
        }
    }
}

/// One model's values over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub model: String,
    pub metric: Metric,
    pub source: Source,
    /// `(input size, value)` with strictly increasing sizes.
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn new(model: &str, metric: Metric, source: Source, points: Vec<(f64, f64)>) -> Result<Curve> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(format!("curve for {model}: sizes must be strictly increasing")));
        }
        Ok(Curve {
            model: model.to_string(),
            metric,
            source,
            points,
        })
    }

    /// Successful records of `model` for one metric, mode and source, with
    /// repeats averaged, keyed by nominal size.
    pub fn from_sweep(sweep: &SweepResult, model: &str, metric: Metric, mode: Mode, source: Source) -> Result<Curve> {
        let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for r in sweep.records.iter().filter(|r| {
            r.model == model && r.metric == metric && r.mode == mode && r.source == source && r.is_ok()
        }) {
            let x = r.nominal as f64;
            let e = acc.entry(x.to_bits()).or_insert((x, 0.0, 0));
            e.1 += r.value;
            e.2 += 1;
        }
        let mut points: Vec<(f64, f64)> = acc.into_values().map(|(x, s, k)| (x, s / k as f64)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Curve::new(model, metric, source, points)
    }

    /// Centered moving average over `window` points, shrinking at the ends.
    /// A window of 0 or 1 returns the curve unchanged.
    pub fn smoothed(&self, window: usize) -> Curve {
        if window <= 1 {
            return self.clone();
        }
        let half = window / 2;
        let ys = self.ys();
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, (x, _))| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(ys.len());
                (*x, ys[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
            })
            .collect();
        Curve {
            points,
            ..self.clone()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Least-squares slope of `ln y` against `ln x` over points with
    /// `x >= from`.
    pub fn loglog_slope(&self, from: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|(x, y)| *x >= from && *x > 0.0 && *y > 0.0)
            .map(|(x, y)| (x.ln(), y.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

/// Smallest size from which `efficient` is strictly better than `vanilla`
/// at every remaining size.
pub fn tipping_point(vanilla: &Curve, efficient: &Curve, direction: Direction) -> Result<Option<f64>> {
    let (xv, xe) = (vanilla.xs(), efficient.xs());
    if xv != xe {
        return Err(Error::GridMismatch(format!(
            "{} has {} sizes, {} has {}",
            vanilla.model,
            xv.len(),
            efficient.model,
            xe.len()
        )));
    }
    Ok(sustained_crossover(
        &xv,
        &vanilla.ys(),
        &efficient.ys(),
        direction == Direction::LowerIsBetter,
    ))
}

/// A tipping point between an efficient model and its full-attention
/// counterpart within one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TippingRow {
    pub modality: Modality,
    pub metric: Metric,
    pub mode: Mode,
    pub source: Source,
    pub vanilla: String,
    pub efficient: String,
    pub point: Option<f64>,
}

/// Every (vanilla, efficient) pair present in `sweep`, per metric, mode and
/// source. Pairs whose curves do not share a grid are skipped.
pub fn tipping_points(sweep: &SweepResult) -> Vec<TippingRow> {
    let mut groups: BTreeSet<(Modality, Metric, Mode, Source)> = BTreeSet::new();
    for r in &sweep.records {
        groups.insert((r.modality, r.metric, r.mode, r.source));
    }
    let models = sweep.models();
    let mut rows = Vec::new();
    for (modality, metric, mode, source) in groups {
        for efficient in &models {
            let Some(vanilla) = Family::from_model_name(efficient).ok().and_then(Family::vanilla) else {
                continue;
            };
            let vanilla = vanilla.model_name();
            if !models.iter().any(|m| m == vanilla) {
                continue;
            }
            let (Ok(v), Ok(e)) = (
                Curve::from_sweep(sweep, vanilla, metric, mode, source),
                Curve::from_sweep(sweep, efficient, metric, mode, source),
            ) else {
                continue;
            };
            if v.points.is_empty() || e.points.is_empty() {
                continue;
            }
            if let Ok(point) = tipping_point(&v, &e, Direction::for_metric(metric)) {
                rows.push(TippingRow {
                    modality,
                    metric,
                    mode,
                    source,
                    vanilla: vanilla.to_string(),
                    efficient: efficient.clone(),
                    point,
                });
            }
        }
    }
    rows
}

/// Normalized shares of one record's breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShares {
    pub model: String,
    pub metric: Metric,
    pub mode: Mode,
    pub source: Source,
    pub nominal: usize,
    pub size: usize,
    /// Share per tag kind; residual time is folded into `Other`.
    pub shares: BTreeMap<TagKind, f64>,
    /// Share per tag and layer index; residual appears as `Other` at layer 0.
    #[serde(with = "tag_list")]
    pub per_layer: BTreeMap<LayerTag, f64>,
}

/// Tag-keyed maps as a list of `{kind, layer_index, value}` entries.
mod tag_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::harness::TagValue;
    use crate::taxonomy::LayerTag;

    pub fn serialize<S: Serializer>(map: &BTreeMap<LayerTag, f64>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(t, v)| TagValue {
                kind: t.kind,
                layer_index: t.layer_index,
                value: *v,
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<LayerTag, f64>, D::Error> {
        Ok(Vec::<TagValue>::deserialize(d)?.into_iter().map(|t| (t.tag(), t.value)).collect())
    }
}

/// Shares of each tag in every record, normalized to the record total
/// (breakdown plus residual).
pub fn layerwise_breakdown(records: &[ProfileRecord]) -> Result<Vec<LayerShares>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| r.is_ok()) {
        let Some(map) = r.breakdown_map() else {
            return Err(Error::MissingBreakdown(format!(
                "{} {} at size {}",
                r.model, r.metric, r.size
            )));
        };
        let residual = r.residual.unwrap_or(0.0).max(0.0);
        let total: f64 = map.values().sum::<f64>() + residual;
        if total <= 0.0 {
            continue;
        }
        let mut per_layer: BTreeMap<LayerTag, f64> = map.iter().map(|(t, v)| (*t, v / total)).collect();
        if residual > 0.0 {
            *per_layer.entry(LayerTag::other(0)).or_default() += residual / total;
        }
        let mut shares: BTreeMap<TagKind, f64> = TagKind::ALL.iter().map(|k| (*k, 0.0)).collect();
        for (t, s) in &per_layer {
            *shares.entry(t.kind).or_default() += s;
        }
        out.push(LayerShares {
            model: r.model.clone(),
            metric: r.metric,
            mode: r.mode,
            source: r.source,
            nominal: r.nominal,
            size: r.size,
            shares,
            per_layer,
        });
    }
    Ok(out)
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:.4}")
    }
}

/// Axis mapping, logarithmic when the data span more than a decade.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    px0: f64,
    px1: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, px0: f64, px1: f64, allow_log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let log = allow_log && lo > 0.0 && hi / lo > 10.0;
        if hi <= lo {
            hi = lo + 1.0;
        }
        Axis { lo, hi, log, px0, px1 }
    }

    fn map(&self, v: f64) -> f64 {
        let t = if self.log {
            (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        };
        self.px0 + t * (self.px1 - self.px0)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut t = Vec::new();
            let mut p = 10f64.powf(self.lo.log10().floor());
            while p <= self.hi * 1.0001 {
                for m in [1.0, 2.0, 5.0] {
                    let v = p * m;
                    if v >= self.lo * 0.9999 && v <= self.hi * 1.0001 {
                        t.push(v);
                    }
                }
                p *= 10.0;
            }
            t
        } else {
            (0..=5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0).collect()
        }
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a >= 1e9 {
        format!("{:.3}G", v / 1e9)
    } else if a >= 1e6 {
        format!("{:.3}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.1}k", v / 1e3)
    } else if a >= 10.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 15.0,
        esc(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        esc(ylabel)
    );
    s
}

fn axes(s: &mut String, x: &Axis, y: &Axis) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks" font-size="10">"#);
    for t in x.ticks() {
        let px = x.map(t);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 16.0,
            tick_label(t)
        );
    }
    for t in y.ticks() {
        let py = y.map(t);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            py + 3.0,
            tick_label(t)
        );
    }
    let _ = writeln!(s, "</g>");
}

fn x_label(modality: Modality) -> &'static str {
    match modality {
        Modality::Text => "input tokens",
        Modality::Speech => "input tokens (audio frames)",
        Modality::Vision => "image side (pixels)",
    }
}

/// One line chart: a series per curve and a marker per typical length.
fn line_chart(title: &str, modality: Modality, metric: Metric, curves: &[Curve], markers: &[TypicalLength]) -> String {
    let xs = curves
        .iter()
        .flat_map(|c| c.xs())
        .chain(markers.iter().map(|m| m.tokens as f64));
    let x = Axis::fit(xs, LEFT, W - RIGHT, true);
    let y = Axis::fit(curves.iter().flat_map(|c| c.ys()), H - BOTTOM, TOP, true);
    let mut s = svg_open(title, x_label(modality), &format!("{} ({})", metric.name(), metric.unit()));
    axes(&mut s, &x, &y);
    let _ = writeln!(s, r#"<g class="markers" font-size="9" fill="gray">"#);
    for m in markers {
        let px = x.map(m.tokens as f64);
        let _ = writeln!(
            s,
            r#"<line class="typical-length" data-dataset="{}" data-x="{}" x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            esc(m.dataset),
            m.tokens,
            H - BOTTOM,
            TOP
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{}" transform="rotate(-90 {px:.2} {})">{}</text>"#,
            TOP + 4.0,
            TOP + 4.0,
            esc(m.dataset)
        );
    }
    let _ = writeln!(s, "</g>");
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|(a, b)| format!("{:.2},{:.2}", x.map(*a), y.map(*b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<g class="series" data-model="{}" data-source="{}" stroke="{color}" fill="{color}">"#,
            esc(&c.model),
            c.source
        );
        let _ = writeln!(s, r#"<polyline fill="none" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        for (a, b) in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" data-x="{}" data-y="{}"/>"#,
                x.map(*a),
                y.map(*b),
                num(*a),
                num(*b)
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke-width="2"/><text x="{}" y="{}" stroke="none" fill="black">{}</text>"#,
            W - RIGHT + 15.0,
            W - RIGHT + 35.0,
            W - RIGHT + 40.0,
            ly + 4.0,
            esc(&c.model)
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Stacked shares over input size, one band per tag and layer; deeper
/// layers are drawn in darker shades of the tag color.
fn stacked_chart(title: &str, modality: Modality, shares: &[&LayerShares]) -> String {
    let x = Axis::fit(shares.iter().map(|s| s.nominal as f64), LEFT, W - RIGHT, false);
    let y = Axis {
        lo: 0.0,
        hi: 1.0,
        log: false,
        px0: H - BOTTOM,
        px1: TOP,
    };
    let mut s = svg_open(title, x_label(modality), "share of total");
    axes(&mut s, &x, &y);
    let bands: BTreeSet<LayerTag> = shares.iter().flat_map(|s| s.per_layer.keys().copied()).collect();
    let max_layer = bands.iter().map(|t| t.layer_index).max().unwrap_or(0).max(1) as f64;
    let mut below = vec![0.0; shares.len()];
    for kind in TagKind::ALL {
        for tag in bands.iter().filter(|t| t.kind == kind) {
            let above: Vec<f64> = shares
                .iter()
                .zip(&below)
                .map(|(sh, b)| b + sh.per_layer.get(tag).copied().unwrap_or(0.0))
                .collect();
            let mut pts: Vec<String> = shares
                .iter()
                .zip(&above)
                .map(|(sh, a)| format!("{:.2},{:.2}", x.map(sh.nominal as f64), y.map(*a)))
                .collect();
            pts.extend(
                shares
                    .iter()
                    .zip(&below)
                    .rev()
                    .map(|(sh, b)| format!("{:.2},{:.2}", x.map(sh.nominal as f64), y.map(*b))),
            );
            let opacity = 0.45 + 0.55 * tag.layer_index as f64 / max_layer;
            let _ = writeln!(
                s,
                r#"<polygon class="area" data-tag="{}" data-layer="{}" fill="{}" fill-opacity="{opacity:.3}" stroke="none" points="{}"/>"#,
                kind.label(),
                tag.layer_index,
                kind.color(),
                pts.join(" ")
            );
            below = above;
        }
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, kind) in TagKind::ALL.iter().enumerate() {
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="14" height="10" fill="{}" stroke="black" stroke-width="0.5"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT + 15.0,
            ly - 5.0,
            kind.color(),
            W - RIGHT + 35.0,
            ly + 4.0,
            kind.label()
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn slug(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| {
            p.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("_")
}

/// Files written by [`emit_report`], in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub line_charts: Vec<PathBuf>,
    pub layerwise_charts: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Writes line charts per (modality, metric, mode, source), stacked
/// layer-wise charts per model, a layer-share table and `summary.txt`
/// into `dir`. The output depends only on the inputs.
pub fn emit_report(sweep: &SweepResult, typical: &[TypicalLength], dir: &Path) -> Result<ReportFiles> {
    if sweep.records.is_empty() {
        return Err(Error::EmptySweep);
    }
    std::fs::create_dir_all(dir)?;
    let mut files = ReportFiles::default();
    let models = sweep.models();
    let mut groups: BTreeSet<(Modality, Metric, Mode, Source)> = BTreeSet::new();
    for r in sweep.records.iter().filter(|r| r.is_ok()) {
        groups.insert((r.modality, r.metric, r.mode, r.source));
    }
    for &(modality, metric, mode, source) in &groups {
        let curves: Vec<Curve> = models
            .iter()
            .filter_map(|m| Curve::from_sweep(sweep, m, metric, mode, source).ok())
            .filter(|c| {
                !c.points.is_empty()
                    && sweep.records.iter().any(|r| r.model == c.model && r.modality == modality)
            })
            .collect();
        if curves.is_empty() {
            continue;
        }
        let markers: Vec<TypicalLength> = typical.iter().copied().filter(|t| t.modality == modality).collect();
        let title = format!("{modality} {} ({mode}, {source})", metric.name());
        let path = dir.join(format!("{}.svg", slug(&["line", metric.name(), &modality.to_string(), &mode.to_string(), &source.to_string()])));
        std::fs::write(&path, line_chart(&title, modality, metric, &curves, &markers))?;
        files.line_charts.push(path);
    }

    let with_breakdown: Vec<ProfileRecord> = sweep
        .records
        .iter()
        .filter(|r| r.is_ok() && r.breakdown.is_some() && r.metric != Metric::ParamCount)
        .cloned()
        .collect();
    let shares = layerwise_breakdown(&with_breakdown)?;
    let mut by_model: BTreeMap<(String, Metric, Mode, Source), Vec<&LayerShares>> = BTreeMap::new();
    for s in &shares {
        by_model
            .entry((s.model.clone(), s.metric, s.mode, s.source))
            .or_default()
            .push(s);
    }
    for ((model, metric, mode, source), mut rows) in by_model {
        rows.sort_by_key(|s| s.nominal);
        rows.dedup_by_key(|s| s.nominal);
        let modality = sweep
            .records
            .iter()
            .find(|r| r.model == model)
            .map(|r| r.modality)
            .unwrap_or(Modality::Text);
        let title = format!("{model} layer-wise {} ({mode}, {source})", metric.name());
        let path = dir.join(format!("{}.svg", slug(&["layerwise", &model, metric.name(), &mode.to_string(), &source.to_string()])));
        std::fs::write(&path, stacked_chart(&title, modality, &rows))?;
        files.layerwise_charts.push(path);
    }
    if !shares.is_empty() {
        let path = dir.join("layerwise.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(
            ["model", "metric", "mode", "source", "nominal", "size"]
                .into_iter()
                .map(String::from)
                .chain(TagKind::ALL.iter().map(|k| k.label().to_string())),
        )?;
        for s in &shares {
            let mut row = vec![
                s.model.clone(),
                s.metric.name().to_string(),
                s.mode.to_string(),
                s.source.to_string(),
                s.nominal.to_string(),
                s.size.to_string(),
            ];
            row.extend(TagKind::ALL.iter().map(|k| format!("{:.6}", s.shares[k])));
            w.write_record(row)?;
        }
        w.flush()?;
        files.tables.push(path);
    }

    let summary = dir.join("summary.txt");
    std::fs::write(&summary, summary_text(sweep, typical))?;
    files.summary = summary;
    Ok(files)
}

fn summary_text(sweep: &SweepResult, typical: &[TypicalLength]) -> String {
    let mut s = String::new();
    let failed = sweep.records.iter().filter(|r| !r.is_ok()).count();
    let _ = writeln!(s, "records: {} ({} failed)", sweep.records.len(), failed);
    let _ = writeln!(s, "models: {}", sweep.models().join(", "));
    if let Some(r) = sweep.records.first() {
        let e = &r.env;
        let _ = writeln!(
            s,
            "protocol: {} iterations, mean of last {}; training flops = {}x forward; optimizer step included: {}",
            e.protocol.total_iters, e.protocol.reported_iters, e.backward_flop_factor, e.optimizer_step_included
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "tipping points (smallest size after which the efficient model stays strictly better):");
    let rows = tipping_points(sweep);
    if rows.is_empty() {
        let _ = writeln!(s, "  none computed (no efficient/full-attention pair in the sweep)");
    }
    for t in rows {
        let point = t.point.map_or("none".to_string(), num);
        let _ = writeln!(
            s,
            "  {} {} {} {}: {} vs {} -> {}",
            t.modality,
            t.metric.name(),
            t.mode,
            t.source,
            t.efficient,
            t.vanilla,
            point
        );
    }
    let modalities: BTreeSet<Modality> = sweep.records.iter().map(|r| r.modality).collect();
    let _ = writeln!(s);
    let _ = writeln!(s, "typical lengths:");
    for t in typical.iter().filter(|t| modalities.contains(&t.modality)) {
        let _ = writeln!(s, "  {} ({}): {}", t.dataset, t.modality, t.tokens);
    }
    if failed > 0 {
        let _ = writeln!(s);
        let _ = writeln!(s, "failures:");
        for r in sweep.records.iter().filter(|r| !r.is_ok()) {
            let _ = writeln!(
                s,
                "  {} {} {} size {}: {}",
                r.model,
                r.metric.name(),
                r.mode,
                r.size,
                r.error.as_deref().unwrap_or("")
            );
        }
    }
    s
}
