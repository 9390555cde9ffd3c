//! Clamped B-spline bases on an interval with equally spaced interior knots.
//!
//! The same basis is used for the class mean curves and for the consumer-level
//! random effects, so a single [`DesignMatrix`] serves as both designs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degree, dimension and domain of a B-spline basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub num_basis: usize,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for BasisSpec {
    /// Nine cubic B-splines over one day, in hours.
    fn default() -> Self {
        Self {
            degree: 3,
            num_basis: 9,
            t_lo: 0.0,
            t_hi: 24.0,
        }
    }
}

impl BasisSpec {
    pub fn new(degree: usize, num_basis: usize, t_lo: f64, t_hi: f64) -> Result<Self> {
        let spec = Self {
            degree,
            num_basis,
            t_lo,
            t_hi,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_basis < self.degree + 1 {
            return Err(Error::InvalidInput(format!(
                "basis needs at least degree+1 = {} functions, got {}",
                self.degree + 1,
                self.num_basis
            )));
        }
        if !(self.t_lo.is_finite() && self.t_hi.is_finite() && self.t_lo < self.t_hi) {
            return Err(Error::InvalidInput(format!(
                "basis domain [{}, {}] is empty or not finite",
                self.t_lo, self.t_hi
            )));
        }
        Ok(())
    }

    /// Greville abscissae: knot averages whose use as coefficients reproduces `t`.
    pub fn greville(&self) -> Result<Vec<f64>> {
        let knots = make_knots(self)?;
        if self.degree == 0 {
            return Ok((0..self.num_basis)
                .map(|k| 0.5 * (knots[k] + knots[k + 1]))
                .collect());
        }
        Ok((0..self.num_basis)
            .map(|k| knots[k + 1..=k + self.degree].iter().sum::<f64>() / self.degree as f64)
            .collect())
    }
}

/// Basis functions evaluated on an observation grid: `values[(j, k)] = phi_k(times[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub times: Vec<f64>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Clamped knot vector of length `num_basis + degree + 1`.
pub fn make_knots(spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let p = spec.degree;
    let interior = spec.num_basis - p - 1;
    let step = (spec.t_hi - spec.t_lo) / (interior + 1) as f64;
    let mut knots = Vec::with_capacity(spec.num_basis + p + 1);
    knots.extend(std::iter::repeat_n(spec.t_lo, p + 1));
    knots.extend((1..=interior).map(|i| spec.t_lo + step * i as f64));
    knots.extend(std::iter::repeat_n(spec.t_hi, p + 1));
    Ok(knots)
}

/// Index `s` of the knot span `[knots[s], knots[s+1])` holding `t`; the right
/// endpoint of the domain is folded into the last non-degenerate span.
fn find_span(knots: &[f64], degree: usize, num_basis: usize, t: f64) -> usize {
    if t >= knots[num_basis] {
        return num_basis - 1;
    }
    // first index with knots[idx] > t, minus one
    let upper = knots[degree + 1..=num_basis].partition_point(|&k| k <= t) + degree;
    upper.max(degree)
}

/// The `degree + 1` nonzero basis values at `t`, for functions `span-degree ..= span`.
fn nonzero_basis(knots: &[f64], degree: usize, span: usize, t: f64, out: &mut [f64]) {
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// Evaluate every basis function at every time; rows are the observation times.
pub fn eval_basis(spec: &BasisSpec, times: &[f64]) -> Result<DesignMatrix> {
    let knots = make_knots(spec)?;
    let p = spec.degree;
    let k = spec.num_basis;
    let mut values = DMatrix::zeros(times.len(), k);
    let mut local = vec![0.0; p + 1];
    for (row, &t) in times.iter().enumerate() {
        if !(t >= spec.t_lo && t <= spec.t_hi) {
            return Err(Error::Domain(format!(
                "time {t} lies outside the basis domain [{}, {}]",
                spec.t_lo, spec.t_hi
            )));
        }
        let span = find_span(&knots, p, k, t);
        nonzero_basis(&knots, p, span, t, &mut local);
        for (r, &v) in local.iter().enumerate() {
            values[(row, span - p + r)] = v;
        }
    }
    Ok(DesignMatrix {
        values,
        times: times.to_vec(),
    })
}

/// Midpoints of `n` equal cells covering the basis domain.
///
/// For a day split into 96 quarter hours this gives 0.125, 0.375, ..., 23.875.
pub fn midpoint_grid(spec: &BasisSpec, n: usize) -> Vec<f64> {
    let width = (spec.t_hi - spec.t_lo) / n as f64;
    (0..n)
        .map(|j| spec.t_lo + width * (j as f64 + 0.5))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Textbook Cox-de Boor recursion with the 0/0 = 0 convention.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, t_hi: f64) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            let inside = if t == t_hi {
                // right endpoint belongs to the last non-empty interval
                a < b && b == t_hi
            } else {
                a <= t && t < b
            };
            return if inside { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, t_hi);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, t_hi);
        }
        v
    }

    #[test]
    fn knots_without_interior() {
        let spec = BasisSpec::new(3, 4, 0.0, 24.0).unwrap();
        assert_eq!(
            make_knots(&spec).unwrap(),
            vec![0.0, 0.0, 0.0, 0.0, 24.0, 24.0, 24.0, 24.0]
        );
    }

    #[test]
    fn knots_nine_cubic() {
        let knots = make_knots(&BasisSpec::default()).unwrap();
        assert_eq!(knots.len(), 13);
        assert_eq!(&knots[4..9], &[4.0, 8.0, 12.0, 16.0, 20.0]);
    }

    #[test]
    fn knots_piecewise_constant() {
        let spec = BasisSpec::new(0, 2, 0.0, 1.0).unwrap();
        assert_eq!(make_knots(&spec).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_too_few_functions() {
        assert!(BasisSpec::new(3, 3, 0.0, 1.0).is_err());
        let bad = BasisSpec {
            degree: 2,
            num_basis: 2,
            t_lo: 0.0,
            t_hi: 1.0,
        };
        assert!(make_knots(&bad).is_err());
    }

    #[test]
    fn piecewise_constant_row() {
        let spec = BasisSpec::new(0, 2, 0.0, 1.0).unwrap();
        let m = eval_basis(&spec, &[0.25, 0.75, 1.0]).unwrap();
        assert_eq!(m.values.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(m.values.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(m.values.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn out_of_domain_names_time() {
        let err = eval_basis(&BasisSpec::default(), &[1.0, 24.5]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(err.to_string().contains("24.5"));
    }

    #[test]
    fn day_grid_matches_recursion() {
        let spec = BasisSpec::default();
        let times = midpoint_grid(&spec, 96);
        assert_abs_diff_eq!(times[0], 0.125);
        assert_abs_diff_eq!(times[95], 23.875);
        let knots = make_knots(&spec).unwrap();
        let m = eval_basis(&spec, &times).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (96, 9));
        for (j, &t) in times.iter().enumerate() {
            for k in 0..9 {
                let expected = cox_de_boor(&knots, k, 3, t, spec.t_hi);
                assert_abs_diff_eq!(m.values[(j, k)], expected, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn endpoints_match_recursion() {
        for (p, k) in [(1, 3), (2, 6), (3, 9), (4, 7)] {
            let spec = BasisSpec::new(p, k, -1.0, 2.0).unwrap();
            let knots = make_knots(&spec).unwrap();
            let ts = [-1.0, -0.3, 0.0, 0.5, 1.999, 2.0];
            let m = eval_basis(&spec, &ts).unwrap();
            for (j, &t) in ts.iter().enumerate() {
                for i in 0..k {
                    let expected = cox_de_boor(&knots, i, p, t, spec.t_hi);
                    assert_abs_diff_eq!(m.values[(j, i)], expected, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn greville_reproduces_identity() {
        let spec = BasisSpec::default();
        let g = spec.greville().unwrap();
        let times = midpoint_grid(&spec, 50);
        let m = eval_basis(&spec, &times).unwrap();
        for (j, &t) in times.iter().enumerate() {
            let v: f64 = (0..9).map(|k| m.values[(j, k)] * g[k]).sum();
            assert_abs_diff_eq!(v, t, epsilon = 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity_and_local_support(
                degree in 0usize..5,
                extra in 0usize..8,
                lo in -10.0f64..10.0,
                width in 0.1f64..50.0,
                u in 0.0f64..=1.0,
            ) {
                let spec = BasisSpec::new(degree, degree + 1 + extra, lo, lo + width).unwrap();
                let t = (lo + u * width).min(lo + width);
                let m = eval_basis(&spec, &[t]).unwrap();
                let row = m.values.row(0);
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-15).contains(&v)));
                prop_assert!(row.iter().filter(|&&v| v != 0.0).count() <= degree + 1);
            }

            #[test]
            fn linear_reproduction(
                degree in 1usize..5,
                extra in 0usize..8,
                u in 0.0f64..=1.0,
            ) {
                let spec = BasisSpec::new(degree, degree + 1 + extra, 0.0, 24.0).unwrap();
                let g = spec.greville().unwrap();
                let t = 24.0 * u;
                let m = eval_basis(&spec, &[t]).unwrap();
                let v: f64 = m.values.row(0).iter().zip(&g).map(|(a, b)| a * b).sum();
                prop_assert!((v - t).abs() < 1e-10);
            }
        }
    }
}
