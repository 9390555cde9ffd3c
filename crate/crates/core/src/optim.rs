//! Derivative-free minimizers used by the variance updates.

/// Result of a minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum<X> {
    pub x: X,
    pub value: f64,
    pub evaluations: usize,
}

/// Brent's bounded minimization (golden section with parabolic steps) of `f` on `[lo, hi]`.
///
/// `tol` is the relative tolerance on the abscissa; an absolute floor of
/// `tol * (hi - lo) * 1e-3` keeps it meaningful near zero.
pub fn brent_minimize(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Minimum<f64> {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let eps = f64::EPSILON.sqrt();
    let abs_floor = tol * (hi - lo) * 1e-3;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut evaluations = 1;
    let (mut d, mut e) = (0.0f64, 0.0f64);

    for _ in 0..500 {
        let m = 0.5 * (a + b);
        let tol1 = eps.min(tol) * x.abs() + abs_floor.max(f64::MIN_POSITIVE);
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum {
        x,
        value: fx,
        evaluations,
    }
}

/// Settings for [`nelder_mead_bounded`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Stop when the spread of simplex values falls below `ftol * (1 + |f_best|)`
    /// and every vertex lies within `xtol * (1 + |x|)` of the best one.
    pub ftol: f64,
    pub xtol: f64,
    pub max_evaluations: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            ftol: 1e-12,
            xtol: 1e-8,
            max_evaluations: 4000,
        }
    }
}

/// Nelder-Mead minimization over the box `x >= lower`, with every trial point
/// projected onto the box before it is evaluated.
pub fn nelder_mead_bounded(
    mut f: impl FnMut(&[f64]) -> f64,
    start: &[f64],
    steps: &[f64],
    lower: &[f64],
    opts: NelderMeadOptions,
) -> Minimum<Vec<f64>> {
    let n = start.len();
    let project = |x: &mut Vec<f64>| {
        for (v, lo) in x.iter_mut().zip(lower) {
            if *v < *lo {
                *v = *lo;
            }
        }
    };
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    project(&mut x0);
    let f0 = eval(&x0, &mut evaluations);
    simplex.push((x0.clone(), f0));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += steps[i];
        project(&mut x);
        if x == x0 {
            // step pointed into the bound; go the other way
            x[i] = x0[i] + steps[i].abs();
        }
        let fx = eval(&x, &mut evaluations);
        simplex.push((x, fx));
    }

    let centroid = |s: &[(Vec<f64>, f64)]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        for (x, _) in &s[..n] {
            for (ci, xi) in c.iter_mut().zip(x) {
                *ci += xi / n as f64;
            }
        }
        c
    };
    let along = |c: &[f64], x: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(x).map(|(ci, xi)| ci + t * (xi - ci)).collect()
    };

    while evaluations < opts.max_evaluations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread_ok = (worst - best).abs() <= opts.ftol * (1.0 + best.abs());
        let size_ok = simplex[1..].iter().all(|(x, _)| {
            x.iter()
                .zip(&simplex[0].0)
                .all(|(a, b)| (a - b).abs() <= opts.xtol * (1.0 + b.abs()))
        });
        if spread_ok && size_ok {
            break;
        }

        let c = centroid(&simplex);
        let mut xr = along(&c, &simplex[n].0, -1.0);
        project(&mut xr);
        let fr = eval(&xr, &mut evaluations);
        if fr < simplex[0].1 {
            let mut xe = along(&c, &simplex[n].0, -2.0);
            project(&mut xe);
            let fe = eval(&xe, &mut evaluations);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (mut xc, outside) = if fr < simplex[n].1 {
            (along(&c, &xr, 0.5), true)
        } else {
            (along(&c, &simplex[n].0, 0.5), false)
        };
        project(&mut xc);
        let fc = eval(&xc, &mut evaluations);
        let accept = if outside { fc <= fr } else { fc < simplex[n].1 };
        if accept {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut xs = along(&x_best, &vertex.0, 0.5);
            project(&mut xs);
            let fs = eval(&xs, &mut evaluations);
            *vertex = (xs, fs);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_parabola_minimum() {
        let m = brent_minimize(|x| (x - 2.5).powi(2) + 1.0, 0.0, 10.0, 1e-10);
        assert!((m.x - 2.5).abs() < 1e-7);
        assert!((m.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn brent_handles_boundary_minimum() {
        let m = brent_minimize(|x| x, 1e-8, 5.0, 1e-10);
        assert!(m.x < 1e-6, "{}", m.x);
        let m = brent_minimize(|x| -x, 0.0, 5.0, 1e-10);
        assert!(m.x > 5.0 - 1e-6);
    }

    #[test]
    fn brent_variance_like_objective() {
        // n ln s + S / s is minimized at s = S / n
        let (n, s) = (480.0, 1700.0);
        let m = brent_minimize(|v| n * v.ln() + s / v, 1e-8, 50.0, 1e-10);
        assert!((m.x - s / n).abs() < 1e-6 * (s / n));
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead_bounded(
            f,
            &[0.5, 0.5],
            &[0.1, 0.1],
            &[f64::NEG_INFINITY; 2],
            NelderMeadOptions {
                max_evaluations: 20_000,
                ..Default::default()
            },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn nelder_mead_lands_on_bound() {
        let f = |x: &[f64]| (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2);
        let m = nelder_mead_bounded(f, &[1.0, 1.0], &[0.1, 0.1], &[0.0, 0.0], NelderMeadOptions::default());
        assert_eq!(m.x[0], 0.0);
        assert!((m.x[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_starting_on_bound() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2);
        let m = nelder_mead_bounded(f, &[0.0], &[-0.1], &[0.0], NelderMeadOptions::default());
        assert!((m.x[0] - 0.3).abs() < 1e-6);
    }
}
