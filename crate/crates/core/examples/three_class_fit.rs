//! Three consumer classes with the residential/commercial misreporting
//! pattern, from the JSON files in `examples/configs`.
//!
//! cargo run --release --example three_class_fit

use std::path::Path;

use aggload::cli::{load_fraud, load_scenario};
use aggload::fit::{fit, FitConfig};

fn main() -> aggload::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let scenario = load_scenario(&dir.join("three_class_scenario.json"))?;
    let fraud = load_fraud(&dir.join("fraud_three_class.json"))?;
    let text = std::fs::read_to_string(dir.join("fit_three_class.json")).map_err(|e| aggload::Error::Io {
        path: "fit_three_class.json".into(),
        source: e,
    })?;
    let config: FitConfig = serde_json::from_str(&text).map_err(|e| aggload::Error::InvalidInput(e.to_string()))?;

    let data = scenario.simulate_dataset(0)?;
    let result = fit(&data, &fraud, &config)?;
    println!("{:?} after {} iterations", result.status, result.iterations);
    println!("noise variance {:.3} (true {})", result.params.sigma_sq, scenario.sigma_sq);
    println!("consumer variances {:.4?}", result.params.sigma_gamma_sq);
    for ((d, truth), est) in data.iter().zip(&scenario.true_counts).zip(&result.params.counts) {
        println!("transformer {}: true {truth}, reported {}, estimate {est}", d.transformer_id, d.reported);
    }
    Ok(())
}
