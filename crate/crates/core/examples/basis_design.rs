//! Cubic B-spline design matrix on a 15-minute grid over one day.
//!
//! cargo run --example basis_design

use aggload::basis::{eval_basis, make_knots, midpoint_grid, BasisSpec};

fn main() -> aggload::Result<()> {
    let spec = BasisSpec::default();
    println!("knots: {:?}", make_knots(&spec)?);
    println!("greville abscissae: {:?}", spec.greville()?);

    let times = midpoint_grid(&spec, 96);
    let design = eval_basis(&spec, &times)?;
    println!("design matrix: {} x {}", design.nrows(), design.ncols());
    for j in [0, 24, 48, 72, 95] {
        let row: Vec<String> = design.values.row(j).iter().map(|v| format!("{v:.4}")).collect();
        let sum: f64 = design.values.row(j).sum();
        println!("t = {:>6.3}h  [{}]  sum = {sum:.15}", times[j], row.join(" "));
    }
    match eval_basis(&spec, &[25.0]) {
        Err(e) => println!("outside the domain: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
