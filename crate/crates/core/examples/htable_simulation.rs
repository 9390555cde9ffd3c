//! Simulated distribution of true counts behind the report R = (32, 43).
//!
//! cargo run --release --example htable_simulation [runs] [seed]

use std::time::Instant;

use aggload::counts::{estimate_h_table, exact_h, CountVector};
use aggload::sim::two_class_fraud;

const PUBLISHED: [f64; 13] = [
    0.000, 0.002, 0.007, 0.027, 0.075, 0.166, 0.256, 0.255, 0.143, 0.051, 0.014, 0.003, 0.000,
];

fn main() -> aggload::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let f = two_class_fraud();
    let r = CountVector::new(vec![32, 43]);
    let start = Instant::now();
    let table = estimate_h_table(&f, &r, runs, seed)?;
    let elapsed = start.elapsed();
    let exact = exact_h(&f, &r)?;

    println!("{runs} runs, seed {seed}, {elapsed:.2?}");
    println!("{:>4} {:>9} {:>9} {:>9}", "m1", "simulated", "exact", "published");
    for (k, published) in PUBLISHED.iter().enumerate() {
        let m = CountVector::new(vec![25 + k as u32, 50 - k as u32]);
        println!("{:>4} {:>9.4} {:>9.4} {:>9.3}", m[0], table.h(&m), exact.h(&m), published);
    }
    Ok(())
}
