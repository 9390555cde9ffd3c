//! Full fit on simulated Case 1 data with five days per transformer.
//!
//! cargo run --release --example fit_case1 [seed]

use aggload::basis::eval_basis;
use aggload::fit::{fit, FitConfig};
use aggload::sim::{build_case, BaseCurves};

fn main() -> aggload::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut scenario = build_case(1, &BaseCurves::stand_in(), seed)?;
    scenario.replicates = 5;
    let data = scenario.simulate_dataset(0)?;

    let config = FitConfig { basis: scenario.basis, seed, ..Default::default() };
    let result = fit(&data, &scenario.fraud, &config)?;
    println!("{:?} after {} iterations, log-likelihood {:.4}", result.status, result.iterations, result.loglik().value());
    println!("noise variance {:.3} (true {})", result.params.sigma_sq, scenario.sigma_sq);
    println!("consumer variances {:.4?} (true {:?})", result.params.sigma_gamma_sq, scenario.sigma_gamma_sq);
    println!("{:>11} {:>9} {:>9} {:>9}", "transformer", "true", "reported", "estimate");
    for ((d, truth), est) in data.iter().zip(&scenario.true_counts).zip(&result.params.counts) {
        println!("{:>11} {:>9} {:>9} {:>9}", d.transformer_id, truth.to_string(), d.reported.to_string(), est.to_string());
    }

    let design = eval_basis(&scenario.basis, &data[0].times)?;
    let truth = scenario.params();
    println!("{:>6} {:>8} {:>8} {:>8} {:>8}", "hour", "class 1", "true", "class 2", "true");
    for j in (0..96).step_by(12) {
        println!(
            "{:>6.2} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            data[0].times[j],
            result.params.typology(&design, 0)[j],
            truth.typology(&design, 0)[j],
            result.params.typology(&design, 1)[j],
            truth.typology(&design, 1)[j]
        );
    }
    for w in &result.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
