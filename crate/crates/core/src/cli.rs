//! The `aggload` command line tool: `simulate`, `fit`, `htable` and `report`.
//!
//! Every file written records the [`RunManifest`] of the run that produced it:
//! JSON files carry it under `manifest`, CSV files as leading `#` lines. The
//! CSV comment leaves out the timestamp and output paths so identical runs
//! give byte-identical tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::counts::{estimate_h_table, exact_h_rational, CountVector, FraudMatrix};
use crate::data_io::{load_data, open_writer, save_data};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, FitStatus};
use crate::report::{
    write_aggregates_csv, write_counts_csv, write_plots, write_trace_csv, write_typologies_csv, FitReport,
};
use crate::sim::{build_case, BaseCurves, SimScenario};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "aggload", version, about = "Load typologies from aggregated transformer data with misreported classes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write readings, reported counts and the truth.
    Simulate(SimulateArgs),
    /// Fit the model to readings and reported counts.
    Fit(FitArgs),
    /// Print or write the H distribution for one reported count vector.
    Htable(HtableArgs),
    /// Turn a fit result into plot-ready tables and SVG charts.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Scenario JSON: a full scenario, or `{"case": 1..4, "replicates": D, "seed": S}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in case 1-4 (used when no config is given; default 1).
    #[arg(long, conflicts_with = "config")]
    pub case: Option<u8>,
    /// Days per transformer.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Readings CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Reported counts CSV; defaults to `reported.csv` next to the readings.
    #[arg(long)]
    pub reported: Option<PathBuf>,
    /// Fraud matrix JSON: `[[...], ...]` or `{"fraud": [[...], ...]}`.
    #[arg(long)]
    pub fraud: PathBuf,
    /// Fit configuration JSON; every field optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulated redistributions per H table.
    #[arg(long = "b-runs")]
    pub b_runs: Option<u64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Relative log-likelihood change that counts as converged.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct HtableArgs {
    #[arg(long)]
    pub fraud: PathBuf,
    /// Reported counts, comma separated, e.g. `32,43`.
    #[arg(long)]
    pub reported: String,
    #[arg(long = "b-runs", default_value_t = 100_000)]
    pub b_runs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Enumerate exactly and print rationals instead of simulating.
    #[arg(long)]
    pub exact: bool,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `fit_result.json` written by `fit`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, inputs: &[&Path], seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_path: config.map(|p| p.display().to_string()),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: Vec::new(),
            seed,
            tool_version: TOOL_VERSION.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    /// Lines for CSV headers: everything but the timestamp and outputs.
    pub fn comment(&self) -> String {
        let mut s = format!("aggload {} {}", self.tool_version, self.command);
        if let Some(seed) = self.seed {
            s.push_str(&format!("\nseed: {seed}"));
        }
        if let Some(c) = &self.config_path {
            s.push_str(&format!("\nconfig: {c}"));
        }
        for i in &self.inputs {
            s.push_str(&format!("\ninput: {i}"));
        }
        s
    }
}

/// Runs a parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Simulate(a) => {
            for p in cmd_simulate(&a)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Fit(a) => {
            let (report, outputs) = cmd_fit(&a)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if report.status == FitStatus::MaxIterations {
                eprintln!("warning: fit did not converge; results are the last iterate");
            }
            println!(
                "status {:?} after {} iterations, log-likelihood {}",
                report.status,
                report.iterations,
                report.loglik.value()
            );
            for p in outputs {
                println!("wrote {}", p.display());
            }
        }
        Command::Htable(a) => cmd_htable(&a, &mut stdout.lock())?,
        Command::Report(a) => {
            for p in cmd_report(&a)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn from_value<T: DeserializeOwned>(value: Value, path: &Path) -> Result<T> {
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::InvalidInput(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Adds `manifest` as a top-level field of a serialized object.
fn with_manifest(value: &impl Serialize, manifest: &RunManifest) -> Result<Value> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::json("<memory>", e))?;
    let m = serde_json::to_value(manifest).map_err(|e| Error::json("<memory>", e))?;
    if let Value::Object(map) = &mut v {
        map.insert("manifest".into(), m);
    }
    Ok(v)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    case: u8,
    replicates: Option<usize>,
    seed: Option<u64>,
}

/// Reads a scenario file: a full [`SimScenario`] or a built-in case reference.
pub fn load_scenario(path: &Path) -> Result<SimScenario> {
    let value = read_json(path)?;
    let scenario = if value.get("case").is_some() {
        let c: CaseFile = from_value(value, path)?;
        let mut sc = build_case(c.case, &BaseCurves::stand_in(), c.seed.unwrap_or(0))?;
        if let Some(d) = c.replicates {
            sc.replicates = d;
        }
        sc
    } else {
        from_value(value, path)?
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Reads a fraud matrix: a bare array of rows or `{"fraud": rows}`.
pub fn load_fraud(path: &Path) -> Result<FraudMatrix> {
    let value = read_json(path)?;
    let rows = match value {
        Value::Object(mut map) => map
            .remove("fraud")
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing field `fraud`", path.display())))?,
        other => other,
    };
    let rows: Vec<Vec<f64>> = from_value(rows, path)?;
    FraudMatrix::new(rows)
}

/// Parses `32,43` into a count vector.
pub fn parse_counts(text: &str) -> Result<CountVector> {
    let counts = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidInput(format!("bad count `{t}` in `{text}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountVector::new(counts))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let mut scenario = match &args.config {
        Some(p) => load_scenario(p)?,
        None => build_case(args.case.unwrap_or(1), &BaseCurves::stand_in(), 0)?,
    };
    if let Some(d) = args.replicates {
        scenario.replicates = d;
    }
    if let Some(s) = args.seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    let reported = scenario.resolved_reported()?;
    scenario.reported_counts = Some(reported);
    let data = scenario.simulate_dataset(0)?;

    create_dir(&args.out)?;
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    let mut manifest = RunManifest::new("simulate", args.config.as_deref(), &inputs, Some(scenario.seed));
    let paths: Vec<PathBuf> = ["data.csv", "reported.csv", "truth.json", "scenario.json"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    manifest.outputs = paths.iter().map(|p| p.display().to_string()).collect();
    let comment = manifest.comment();

    save_data(&data, &paths[0], &paths[1], Some(&comment))?;
    #[derive(Serialize)]
    struct Truth<'a> {
        params: crate::model::ModelParams,
        reported_counts: &'a [CountVector],
        case_id: Option<u8>,
    }
    let truth = Truth {
        params: scenario.params(),
        reported_counts: scenario.reported_counts.as_deref().unwrap_or(&[]),
        case_id: scenario.case_id,
    };
    write_json(&paths[2], &with_manifest(&truth, &manifest)?)?;
    write_json(&paths[3], &with_manifest(&scenario, &manifest)?)?;
    Ok(paths)
}

pub fn cmd_fit(args: &FitArgs) -> Result<(FitReport, Vec<PathBuf>)> {
    let mut config: FitConfig = match &args.config {
        Some(p) => from_value(read_json(p)?, p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(b) = args.b_runs {
        config.h_runs = b;
    }
    if let Some(m) = args.max_iters {
        config.max_outer_iters = m;
    }
    if let Some(t) = args.tol {
        config.rel_tol = t;
    }
    config.validate()?;

    let reported = args.reported.clone().unwrap_or_else(|| {
        args.data
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("reported.csv")
    });
    let data = load_data(&args.data, &reported)?;
    let fraud = load_fraud(&args.fraud)?;
    let result = fit(&data, &fraud, &config)?;

    create_dir(&args.out)?;
    let mut inputs = vec![args.data.as_path(), reported.as_path(), args.fraud.as_path()];
    if let Some(c) = &args.config {
        inputs.push(c);
    }
    let mut manifest = RunManifest::new("fit", args.config.as_deref(), &inputs, Some(config.seed));
    let paths: Vec<PathBuf> = ["fit_result.json", "typologies.csv", "counts.csv", "aggregates.csv"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    manifest.outputs = paths.iter().map(|p| p.display().to_string()).collect();
    let comment = manifest.comment();

    let report = FitReport::build(&result, &data, &config, manifest)?;
    write_json(&paths[0], &report)?;
    write_typologies_csv(&report, &paths[1], Some(&comment))?;
    write_counts_csv(&report, &paths[2], Some(&comment))?;
    write_aggregates_csv(&report, &paths[3], Some(&comment))?;
    Ok((report, paths))
}

pub fn cmd_htable(args: &HtableArgs, stdout: &mut dyn Write) -> Result<()> {
    let fraud = load_fraud(&args.fraud)?;
    let r = parse_counts(&args.reported)?;
    let seed = (!args.exact).then_some(args.seed);
    let mut manifest = RunManifest::new("htable", None, &[args.fraud.as_path()], seed);
    if let Some(o) = &args.out {
        manifest.outputs.push(o.display().to_string());
    }
    let mut comment = manifest.comment();
    comment.push_str(&format!("\nreported: {r}"));

    let classes = fraud.classes();
    let mut header: Vec<String> = (1..=classes).map(|c| format!("m_{c}")).collect();
    let mut rows: Vec<Vec<String>> = Vec::new();
    if args.exact {
        header.extend(["h".to_string(), "h_decimal".to_string()]);
        comment.push_str("\nmode: exact");
        for (m, p) in exact_h_rational(&fraud, &r)? {
            let mut row: Vec<String> = m.as_slice().iter().map(u32::to_string).collect();
            let dec = num_traits::ToPrimitive::to_f64(&p).unwrap_or(f64::NAN);
            row.extend([p.to_string(), dec.to_string()]);
            rows.push(row);
        }
    } else {
        header.extend(["hits".to_string(), "h".to_string()]);
        comment.push_str(&format!("\nmode: simulated, runs: {}", args.b_runs));
        let table = estimate_h_table(&fraud, &r, args.b_runs, args.seed)?;
        for (m, h) in table.entries() {
            let mut row: Vec<String> = m.as_slice().iter().map(u32::to_string).collect();
            row.extend([table.hits(&m).unwrap_or(0).to_string(), h.to_string()]);
            rows.push(row);
        }
    }

    match &args.out {
        Some(path) => {
            let mut w = open_writer(path, Some(&comment))?;
            let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
            w.write_record(&header).map_err(io)?;
            for row in &rows {
                w.write_record(row).map_err(io)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        None => {
            let io = |e: std::io::Error| Error::io("<stdout>", e);
            for line in comment.lines() {
                writeln!(stdout, "# {line}").map_err(io)?;
            }
            writeln!(stdout, "{}", header.join(",")).map_err(io)?;
            for row in &rows {
                writeln!(stdout, "{}", row.join(",")).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<Vec<PathBuf>> {
    let report = FitReport::load(&args.result)?;
    create_dir(&args.out)?;
    let manifest = RunManifest::new("report", None, &[args.result.as_path()], Some(report.seed));
    let mut comment = manifest.comment();
    comment.push_str(&format!("\nfit: {}", report.manifest.comment().replace('\n', "; ")));

    let mut paths = Vec::new();
    for (name, writer) in [
        ("typologies.csv", write_typologies_csv as fn(&FitReport, &Path, Option<&str>) -> Result<()>),
        ("counts.csv", write_counts_csv),
        ("aggregates.csv", write_aggregates_csv),
        ("trace.csv", write_trace_csv),
    ] {
        let p = args.out.join(name);
        writer(&report, &p, Some(&comment))?;
        paths.push(p);
    }
    let plots = write_plots(&report, &args.out)?;
    paths.extend(plots.iter().cloned());
    let mut manifest = manifest;
    manifest.outputs = paths.iter().map(|p| p.display().to_string()).collect();
    let mpath = args.out.join("report_manifest.json");
    write_json(&mpath, &manifest)?;
    // SVGs carry the manifest as an XML comment
    for p in &plots {
        let svg = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let note = comment.replace("--", "- -");
        let svg = svg.replacen('\n', &format!("\n<!--\n{note}\n-->\n"), 1);
        fs::write(p, svg).map_err(|e| Error::io(p, e))?;
    }
    paths.push(mpath);
    Ok(paths)
}
