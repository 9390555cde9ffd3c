//! Simulate one of the four built-in scenarios and write it as CSV.
//!
//! cargo run --release --example simulate_case -- [case] [days] [out_dir]

use std::path::PathBuf;

use aggload::data_io::save_data;
use aggload::sim::{build_case, BaseCurves};

fn main() -> aggload::Result<()> {
    let mut args = std::env::args().skip(1);
    let case: u8 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let days: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let mut scenario = build_case(case, &BaseCurves::stand_in(), 42)?;
    scenario.replicates = days;
    let data = scenario.simulate_dataset(0)?;
    println!("case {case}: {} transformers, {days} day(s), {} points", data.len(), scenario.num_points);
    println!("consumer variances {:?}, noise variance {}", scenario.sigma_gamma_sq, scenario.sigma_sq);
    for (d, m) in data.iter().zip(&scenario.true_counts) {
        let peak = d.y.max();
        println!("transformer {}: true {m}, reported {}, peak reading {peak:.1} kVA", d.transformer_id, d.reported);
    }

    let (dp, rp) = (out.join(format!("case{case}_data.csv")), out.join(format!("case{case}_reported.csv")));
    save_data(&data, &dp, &rp, Some(&format!("case {case}, seed 42")))?;
    println!("wrote {} and {}", dp.display(), rp.display());
    Ok(())
}
