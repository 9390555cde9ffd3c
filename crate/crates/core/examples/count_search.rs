//! Scores every candidate true-count vector of one transformer with the
//! count-dependent part of the log-likelihood, at the true parameters.
//!
//! cargo run --release --example count_search

use aggload::counts::{candidate_counts, estimate_h_table};
use aggload::likelihood::{lstar, rotate_data, Workspace};
use aggload::sim::{build_case, two_class_fraud, BaseCurves};

fn main() -> aggload::Result<()> {
    let mut scenario = build_case(1, &BaseCurves::stand_in(), 3)?;
    scenario.replicates = 5;
    let data = scenario.simulate_dataset(0)?;
    let params = scenario.params();
    let ws = Workspace::new(&scenario.basis, &data[0].times)?;

    let t = &data[1];
    let table = estimate_h_table(&two_class_fraud(), &t.reported, 100_000, 0)?;
    let rotated = rotate_data(&ws, t);
    let mut scored = Vec::new();
    for m in candidate_counts(&table)? {
        scored.push((lstar(&params, &ws, &rotated, &table, &m)?, m));
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0));
    println!("transformer 2: true {}, reported {}", params.counts[1], t.reported);
    println!("{:>8} {:>8} {:>14}", "m", "H(m)", "L*");
    for (score, m) in scored.iter().take(8) {
        println!("{:>8} {:>8.5} {:>14.3}", m.to_string(), table.h(m), score.value());
    }
    Ok(())
}
