//! Gaussian likelihood of a transformer's readings: dense Cholesky versus the
//! diagonalized form that the fitting loop uses.
//!
//! cargo run --release --example eigen_likelihood

use std::time::Instant;

use aggload::likelihood::{gauss_neg2ll, gauss_neg2ll_eigen, Workspace};
use aggload::sim::{build_case, BaseCurves};

fn main() -> aggload::Result<()> {
    let mut scenario = build_case(1, &BaseCurves::stand_in(), 1)?;
    scenario.replicates = 5;
    let data = scenario.simulate_dataset(0)?;
    let params = scenario.params();
    let ws = Workspace::new(&scenario.basis, &data[0].times)?;
    let mut eig: Vec<f64> = ws.cache.gamma.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    println!("largest eigenvalues of Psi Psi': {:.4?}", &eig[..9]);

    for (d, m) in data.iter().zip(&params.counts) {
        let t = Instant::now();
        let direct = gauss_neg2ll(&params, &ws.design, d, m)?;
        let t_direct = t.elapsed();
        let t = Instant::now();
        let fast = gauss_neg2ll_eigen(&params, &ws, d, m)?;
        let t_fast = t.elapsed();
        println!(
            "transformer {}: direct {direct:.8} ({t_direct:.1?}), eigen {fast:.8} ({t_fast:.1?}), gap {:.1e}",
            d.transformer_id,
            (direct - fast).abs()
        );
    }
    Ok(())
}
