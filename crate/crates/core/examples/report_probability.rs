//! P(R | M) two ways: by enumerating every misreporting table, and from the
//! H function via the product-form identity.
//!
//! cargo run --example report_probability

use aggload::counts::{exact_h, exact_report_prob, report_prob_from_h, CountVector, FraudMatrix};

fn main() -> aggload::Result<()> {
    let f = FraudMatrix::new(vec![
        vec![0.96, 0.02, 0.02],
        vec![0.00, 0.98, 0.02],
        vec![0.05, 0.05, 0.90],
    ])?;
    let m = CountVector::new(vec![2, 3, 2]);
    println!("true counts {m}");
    let mut total = 0.0;
    for r1 in 0..=7u32 {
        for r2 in 0..=7 - r1 {
            let r = CountVector::new(vec![r1, r2, 7 - r1 - r2]);
            let direct = exact_report_prob(&f, &m, &r)?;
            total += direct;
            if direct < 1e-4 {
                continue;
            }
            let via_h = report_prob_from_h(&f, &m, &r, exact_h(&f, &r)?.h(&m));
            println!("R = {r}: enumeration {direct:.12}  via H {via_h:.12}");
        }
    }
    println!("sum over all reports: {total:.15}");
    Ok(())
}
