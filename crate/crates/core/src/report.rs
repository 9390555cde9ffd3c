//! Fit-result files: the JSON document, plot-ready CSV tables and SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::eval_basis;
use crate::cli::RunManifest;
use crate::counts::CountVector;
use crate::data_io::open_writer;
use crate::error::{Error, Result};
use crate::fit::{CandidateScore, FitConfig, FitResult, FitStatus, HTableInfo, TraceEntry};
use crate::likelihood::{LikelihoodBreakdown, Score};
use crate::model::{ModelParams, TransformerData};

/// Candidates kept per transformer in the result file.
const TOP_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Typologies {
    pub time_hours: Vec<f64>,
    /// `values[c][j]`: fitted mean curve of class `c + 1` at `time_hours[j]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub transformer_id: u32,
    pub reported: CountVector,
    pub estimated: CountVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub transformer_id: u32,
    /// Readings averaged over days.
    pub observed_mean: Vec<f64>,
    /// `sum_c M_c alpha_c(t)` with estimated counts and curves.
    pub fitted: Vec<f64>,
}

/// Contents of `fit_result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub manifest: RunManifest,
    pub seed: u64,
    pub status: FitStatus,
    pub iterations: usize,
    pub loglik: Score,
    pub warnings: Vec<String>,
    pub config: FitConfig,
    pub params: ModelParams,
    pub typologies: Typologies,
    pub counts: Vec<CountRow>,
    pub aggregates: Vec<AggregateRow>,
    pub trace: Vec<TraceEntry>,
    pub htables: Vec<HTableInfo>,
    /// Best candidates by `L*`, per transformer.
    pub top_candidates: Vec<Vec<CandidateScore>>,
    pub breakdown: LikelihoodBreakdown,
}

impl FitReport {
    pub fn build(
        result: &FitResult,
        data: &[TransformerData],
        config: &FitConfig,
        manifest: RunManifest,
    ) -> Result<Self> {
        let times = data
            .first()
            .map(|d| d.times.clone())
            .ok_or_else(|| Error::InvalidInput("no transformers".into()))?;
        let design = eval_basis(&result.params.basis, &times)?;
        let values = (0..result.params.classes())
            .map(|c| result.params.typology(&design, c).iter().copied().collect())
            .collect();
        let counts = data
            .iter()
            .zip(&result.params.counts)
            .map(|(d, m)| CountRow {
                transformer_id: d.transformer_id,
                reported: d.reported.clone(),
                estimated: m.clone(),
            })
            .collect();
        let aggregates = data
            .iter()
            .zip(&result.params.counts)
            .map(|(d, m)| {
                let fitted = &design.values * result.params.mean_coefficients(m);
                let days = d.days() as f64;
                AggregateRow {
                    transformer_id: d.transformer_id,
                    observed_mean: d.y.row_iter().map(|r| r.sum() / days).collect(),
                    fitted: fitted.iter().copied().collect(),
                }
            })
            .collect();
        Ok(Self {
            manifest,
            seed: config.seed,
            status: result.status,
            iterations: result.iterations,
            loglik: result.loglik(),
            warnings: result.warnings.clone(),
            config: config.clone(),
            params: result.params.clone(),
            typologies: Typologies { time_hours: times, values },
            counts,
            aggregates,
            trace: result.trace.clone(),
            htables: result.htables.clone(),
            top_candidates: result
                .lstar_tables
                .iter()
                .map(|t| t.iter().take(TOP_CANDIDATES).cloned().collect())
                .collect(),
            breakdown: result.breakdown.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let report: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::InvalidInput(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))
        })?;
        report.check()?;
        Ok(report)
    }

    fn check(&self) -> Result<()> {
        let n = self.typologies.time_hours.len();
        if self.typologies.values.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidInput("typology rows do not match time_hours".into()));
        }
        if self
            .aggregates
            .iter()
            .any(|a| a.observed_mean.len() != n || a.fitted.len() != n)
        {
            return Err(Error::InvalidInput("aggregate rows do not match time_hours".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.typologies.values.len()
    }
}

/// `time_hours,alpha_hat_1,...,alpha_hat_C`
pub fn write_typologies_csv(report: &FitReport, path: &Path, comment: Option<&str>) -> Result<()> {
    let mut w = open_writer(path, comment)?;
    let mut header = vec!["time_hours".to_string()];
    header.extend((1..=report.classes()).map(|c| format!("alpha_hat_{c}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (j, t) in report.typologies.time_hours.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(report.typologies.values.iter().map(|v| v[j].to_string()));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `transformer,class,reported,estimated`
pub fn write_counts_csv(report: &FitReport, path: &Path, comment: Option<&str>) -> Result<()> {
    let mut w = open_writer(path, comment)?;
    w.write_record(["transformer", "class", "reported", "estimated"])
        .map_err(|e| csv_io(path, e))?;
    for row in &report.counts {
        for (c, (r, m)) in row.reported.as_slice().iter().zip(row.estimated.as_slice()).enumerate() {
            w.write_record([
                row.transformer_id.to_string(),
                (c + 1).to_string(),
                r.to_string(),
                m.to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `transformer_id,time_index,time_hours,observed_mean,fitted`, `n` rows per transformer.
pub fn write_aggregates_csv(report: &FitReport, path: &Path, comment: Option<&str>) -> Result<()> {
    let mut w = open_writer(path, comment)?;
    w.write_record(["transformer_id", "time_index", "time_hours", "observed_mean", "fitted"])
        .map_err(|e| csv_io(path, e))?;
    for a in &report.aggregates {
        for (j, t) in report.typologies.time_hours.iter().enumerate() {
            w.write_record([
                a.transformer_id.to_string(),
                (j + 1).to_string(),
                t.to_string(),
                a.observed_mean[j].to_string(),
                a.fitted[j].to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `index,iteration,step,loglik`; `loglik` is empty for minus infinity.
pub fn write_trace_csv(report: &FitReport, path: &Path, comment: Option<&str>) -> Result<()> {
    let mut w = open_writer(path, comment)?;
    w.write_record(["index", "iteration", "step", "loglik"])
        .map_err(|e| csv_io(path, e))?;
    for (k, e) in report.trace.iter().enumerate() {
        let step = serde_json::to_value(e.step)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let ll = match e.loglik {
            Score::Finite(v) => v.to_string(),
            Score::NegInfinity => String::new(),
        };
        w.write_record([k.to_string(), e.iteration.to_string(), step, ll])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes every chart for `report` into `dir` and returns the paths.
pub fn write_plots(report: &FitReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let t = &report.typologies.time_hours;
    let mut save = |name: String, svg: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        out.push(path);
        Ok(())
    };

    let mut all = Vec::new();
    for (c, v) in report.typologies.values.iter().enumerate() {
        let series = Series::line(format!("class {}", c + 1), t.iter().copied().zip(v.iter().copied()).collect(), c);
        let chart = LineChart {
            title: format!("Fitted typology, class {}", c + 1),
            x_label: "hour".into(),
            y_label: "kVA per consumer".into(),
            series: vec![series.clone()],
        };
        save(format!("typology_class_{}.svg", c + 1), chart.to_svg())?;
        all.push(series);
    }
    save(
        "typologies.svg".into(),
        LineChart {
            title: "Fitted typologies".into(),
            x_label: "hour".into(),
            y_label: "kVA per consumer".into(),
            series: all,
        }
        .to_svg(),
    )?;

    let points: Vec<(f64, f64)> = report
        .trace
        .iter()
        .enumerate()
        .filter_map(|(k, e)| match e.loglik {
            Score::Finite(v) => Some((k as f64, v)),
            Score::NegInfinity => None,
        })
        .collect();
    save(
        "trace.svg".into(),
        LineChart {
            title: "Log-likelihood by half-step".into(),
            x_label: "half-step".into(),
            y_label: "log-likelihood".into(),
            series: vec![Series::line("log-likelihood".into(), points, 0)],
        }
        .to_svg(),
    )?;

    for a in &report.aggregates {
        let obs = t.iter().copied().zip(a.observed_mean.iter().copied()).collect();
        let fit = t.iter().copied().zip(a.fitted.iter().copied()).collect();
        save(
            format!("aggregate_transformer_{}.svg", a.transformer_id),
            LineChart {
                title: format!("Transformer {}: observed vs fitted", a.transformer_id),
                x_label: "hour".into(),
                y_label: "kVA".into(),
                series: vec![
                    Series::line("observed (day mean)".into(), obs, 7),
                    Series { dashed: true, ..Series::line("fitted".into(), fit, 0) },
                ],
            }
            .to_svg(),
        )?;
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
    pub dashed: bool,
}

impl Series {
    pub fn line(name: String, points: Vec<(f64, f64)>, color: usize) -> Self {
        Self {
            name,
            points,
            color: PALETTE[color % PALETTE.len()],
            dashed: false,
        }
    }
}

/// A static line chart rendered as standalone SVG.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

impl LineChart {
    pub fn to_svg(&self) -> String {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        let xt = nice_ticks(x0, x1);
        let yt = nice_ticks(y0, y1);
        let (x0, x1) = (x0.min(xt[0]), x1.max(*xt.last().unwrap()));
        let (y0, y1) = (y0.min(yt[0]), y1.max(*yt.last().unwrap()));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        for &t in &xt {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 16.0,
                fmt_tick(t)
            );
        }
        for &t in &yt {
            let y = sy(t);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for series in &self.series {
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.8"{dash}/>"#,
                path.join(" "),
                series.color
            );
        }
        for (k, series) in self.series.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * k as f64;
            let x = LEFT + pw - 150.0;
            let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                x + 24.0,
                series.color,
                x + 30.0,
                y + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

/// Round tick positions covering `[lo, hi]`, about five of them.
pub fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).floor() as i64;
    let end = (hi / step).ceil() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.6}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.125, 23.875);
        assert_eq!(t, vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0]);
        let t = nice_ticks(-5045.2, -5010.7);
        assert!(t[0] <= -5045.2 && *t.last().unwrap() >= -5010.7);
        assert!(t.len() <= 12);
    }

    #[test]
    fn svg_is_well_formed_text() {
        let chart = LineChart {
            title: "a < b & c".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series::line("s".into(), vec![(0.0, 1.0), (1.0, 2.0)], 0)],
        };
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b &amp; c"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn empty_chart_still_renders() {
        let chart = LineChart {
            title: "empty".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![],
        };
        assert!(chart.to_svg().contains("</svg>"));
    }
}
