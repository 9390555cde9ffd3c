//! Fit simulated data and write the result file, tables and SVG charts.
//!
//! cargo run --release --example plot_report -- [out_dir]

use std::path::PathBuf;

use aggload::cli::RunManifest;
use aggload::fit::{fit, FitConfig};
use aggload::report::{write_plots, write_typologies_csv, FitReport};
use aggload::sim::{build_case, BaseCurves};

fn main() -> aggload::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("aggload_plots"));
    std::fs::create_dir_all(&out).map_err(|e| aggload::Error::Io { path: out.display().to_string(), source: e })?;

    let mut scenario = build_case(2, &BaseCurves::stand_in(), 9)?;
    scenario.replicates = 3;
    let data = scenario.simulate_dataset(0)?;
    let config = FitConfig { basis: scenario.basis, seed: 9, ..Default::default() };
    let result = fit(&data, &scenario.fraud, &config)?;

    let manifest = RunManifest::new("example plot_report", None, &[], Some(config.seed));
    let report = FitReport::build(&result, &data, &config, manifest)?;
    write_typologies_csv(&report, &out.join("typologies.csv"), None)?;
    for p in write_plots(&report, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
