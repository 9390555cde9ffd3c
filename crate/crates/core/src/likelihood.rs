//! Log-likelihood of aggregated curves and reported counts.
//!
//! Given true counts `m`, a transformer's day curve is Gaussian with mean
//! `Phi * sum_c m_c gamma^c` and covariance `v Psi Psi' + sigma^2 I`, where
//! `v = sum_c m_c sigma_gamma_sq[c]`. Diagonalizing `Psi Psi' = Q' diag(g) Q`
//! once makes every covariance diagonal in the rotated frame, so a
//! determinant plus quadratic form costs `O(n)` per day.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, DesignMatrix};
use crate::counts::{ln_report_prob_from_h, CountVector, FraudMatrix, HTable};
use crate::error::{Error, Result};
use crate::model::{pooled_variance, ModelParams, TransformerData};

/// A log-scale value that may be minus infinity. Never NaN, totally ordered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub enum Score {
    NegInfinity,
    Finite(f64),
}

impl Score {
    pub fn from_f64(v: f64) -> Self {
        if v == f64::NEG_INFINITY {
            Score::NegInfinity
        } else {
            assert!(v.is_finite(), "score must be finite or -inf, got {v}");
            Score::Finite(v)
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Score::NegInfinity => f64::NEG_INFINITY,
            Score::Finite(v) => v,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Score::Finite(_))
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Score::NegInfinity, Score::NegInfinity) => Ordering::Equal,
            (Score::NegInfinity, _) => Ordering::Less,
            (_, Score::NegInfinity) => Ordering::Greater,
            (Score::Finite(a), Score::Finite(b)) => a.total_cmp(b),
        }
    }
}

impl From<Option<f64>> for Score {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Score::NegInfinity, Score::Finite)
    }
}

impl From<Score> for Option<f64> {
    fn from(s: Score) -> Self {
        match s {
            Score::NegInfinity => None,
            Score::Finite(v) => Some(v),
        }
    }
}

/// Eigen-decomposition `Psi Psi' = Q' diag(gamma) Q`; rows of `q` are eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenCache {
    pub q: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

impl EigenCache {
    pub fn new(psi: &DesignMatrix) -> Self {
        let gram = &psi.values * psi.values.transpose();
        let eig = SymmetricEigen::new(gram);
        let gamma = eig.eigenvalues.map(|g| g.max(0.0));
        Self {
            q: eig.eigenvectors.transpose(),
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// `sum_j g_j`, equal to `trace(Psi Psi')`.
    pub fn trace(&self) -> f64 {
        self.gamma.sum()
    }

    /// Diagonal covariance `v * gamma + sigma_sq` in the rotated frame.
    pub fn delta(&self, pooled: f64, sigma_sq: f64) -> DVector<f64> {
        self.gamma.map(|g| pooled * g + sigma_sq)
    }
}

/// Basis, eigen cache and rotated basis for one observation grid.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub design: DesignMatrix,
    pub cache: EigenCache,
    /// `Q * Phi`.
    pub rotated_design: DMatrix<f64>,
}

impl Workspace {
    pub fn new(basis: &crate::basis::BasisSpec, times: &[f64]) -> Result<Self> {
        let design = eval_basis(basis, times)?;
        Ok(Self::from_design(design))
    }

    pub fn from_design(design: DesignMatrix) -> Self {
        let cache = EigenCache::new(&design);
        let rotated_design = &cache.q * &design.values;
        Self {
            design,
            cache,
            rotated_design,
        }
    }

    pub fn num_points(&self) -> usize {
        self.design.nrows()
    }
}

/// Per-transformer sums of squared rotated residuals, `S_j = sum_d (Q r_d)_j^2`.
///
/// Everything the variance updates need once the mean is fixed.
#[derive(Debug, Clone)]
pub struct RotatedResiduals {
    pub days: usize,
    pub sq: DVector<f64>,
}

impl RotatedResiduals {
    pub fn new(ws: &Workspace, rotated_y: &DMatrix<f64>, mean_coef: &DVector<f64>) -> Self {
        let mean = &ws.rotated_design * mean_coef;
        let mut sq = DVector::zeros(mean.len());
        for col in rotated_y.column_iter() {
            for (s, (y, mu)) in sq.iter_mut().zip(col.iter().zip(mean.iter())) {
                let r = y - mu;
                *s += r * r;
            }
        }
        Self {
            days: rotated_y.ncols(),
            sq,
        }
    }

    /// `D * sum_j ln(delta_j) + sum_j S_j / delta_j`; `Err` if any `delta_j <= 0`.
    pub fn neg2ll(&self, gamma: &DVector<f64>, pooled: f64, sigma_sq: f64) -> Result<f64> {
        let days = self.days as f64;
        let mut acc = 0.0;
        for (g, s) in gamma.iter().zip(self.sq.iter()) {
            let d = pooled * g + sigma_sq;
            if !(d > 0.0) {
                return Err(Error::Numerical(format!(
                    "covariance not positive definite: sigma^2 = {sigma_sq}, eigenvalue {d}"
                )));
            }
            acc += days * d.ln() + s / d;
        }
        Ok(acc)
    }
}

/// `Q * Y`, the day curves in the eigenbasis of `Psi Psi'`.
pub fn rotate_data(ws: &Workspace, data: &TransformerData) -> DMatrix<f64> {
    &ws.cache.q * &data.y
}

fn check_shapes(params: &ModelParams, design: &DesignMatrix, data: &TransformerData, m: &CountVector) -> Result<()> {
    if design.nrows() != data.num_points() || design.ncols() != params.basis.num_basis {
        return Err(Error::InvalidInput(format!(
            "design is {}x{} but data has {} points and basis {} functions",
            design.nrows(),
            design.ncols(),
            data.num_points(),
            params.basis.num_basis
        )));
    }
    if m.classes() != params.classes() {
        return Err(Error::InvalidInput(format!(
            "count vector {m} does not match {} classes",
            params.classes()
        )));
    }
    Ok(())
}

/// `-2 log f(Y) - n D log(2 pi)` by explicit covariance and Cholesky factor.
///
/// Independent of the eigen path; used as its cross-check.
pub fn gauss_neg2ll(
    params: &ModelParams,
    design: &DesignMatrix,
    data: &TransformerData,
    m: &CountVector,
) -> Result<f64> {
    check_shapes(params, design, data, m)?;
    let n = design.nrows();
    let pooled = params.pooled_consumer_variance(m);
    let psi = &design.values;
    let cov = psi * psi.transpose() * pooled + DMatrix::identity(n, n) * params.sigma_sq;
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
        let eig = SymmetricEigen::new(cov).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        Error::Numerical(format!(
            "covariance not positive definite: sigma^2 = {}, smallest eigenvalue {min}",
            params.sigma_sq
        ))
    })?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mean = psi * params.mean_coefficients(m);
    let mut total = logdet * data.days() as f64;
    for col in data.y.column_iter() {
        let r = col - &mean;
        let sol = chol.solve(&r);
        total += r.dot(&sol);
    }
    Ok(total)
}

/// Same quantity as [`gauss_neg2ll`], through the eigen cache.
pub fn gauss_neg2ll_eigen(
    params: &ModelParams,
    ws: &Workspace,
    data: &TransformerData,
    m: &CountVector,
) -> Result<f64> {
    check_shapes(params, &ws.design, data, m)?;
    let rotated = rotate_data(ws, data);
    gauss_neg2ll_rotated(params, ws, &rotated, m)
}

/// Eigen-path evaluation on data already rotated by `Q`.
pub fn gauss_neg2ll_rotated(
    params: &ModelParams,
    ws: &Workspace,
    rotated_y: &DMatrix<f64>,
    m: &CountVector,
) -> Result<f64> {
    let res = RotatedResiduals::new(ws, rotated_y, &params.mean_coefficients(m));
    res.neg2ll(&ws.cache.gamma, pooled_variance(&params.sigma_gamma_sq, m), params.sigma_sq)
}

/// The `m`-dependent part of a transformer's log-likelihood:
/// `-1/2 gauss_neg2ll + sum_c ln m_c! + ln H(m)`, minus infinity when `H(m) = 0`.
pub fn lstar(
    params: &ModelParams,
    ws: &Workspace,
    rotated_y: &DMatrix<f64>,
    table: &HTable,
    m: &CountVector,
) -> Result<Score> {
    let h = table.h(m);
    if h <= 0.0 {
        return Ok(Score::NegInfinity);
    }
    let g = gauss_neg2ll_rotated(params, ws, rotated_y, m)?;
    Ok(Score::Finite(-0.5 * g + m.ln_factorial_sum() + h.ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerTerms {
    /// Gaussian log-density of the readings.
    pub gauss_term: f64,
    /// `ln P{R | M}`; `None` when `M` lies outside the H table support.
    pub count_term: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodBreakdown {
    pub total: Score,
    pub per_transformer: Vec<TransformerTerms>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// Gaussian log-density on rotated data, including the `2 pi` constant.
pub(crate) fn gauss_log_density(
    params: &ModelParams,
    ws: &Workspace,
    rotated_y: &DMatrix<f64>,
    m: &CountVector,
) -> Result<f64> {
    let g = gauss_neg2ll_rotated(params, ws, rotated_y, m)?;
    let nd = (rotated_y.nrows() * rotated_y.ncols()) as f64;
    Ok(-0.5 * g - 0.5 * nd * (2.0 * PI).ln())
}

/// Breakdown on pre-rotated data; the fitting loop calls this directly.
pub(crate) fn total_loglik_rotated(
    params: &ModelParams,
    ws: &Workspace,
    rotated: &[DMatrix<f64>],
    reported: &[&CountVector],
    tables: &[HTable],
    fraud: &FraudMatrix,
) -> Result<LikelihoodBreakdown> {
    let mut parts = Vec::with_capacity(rotated.len());
    let mut diagnostics = Vec::new();
    let mut total = 0.0;
    for (i, ((ry, r), table)) in rotated.iter().zip(reported).zip(tables).enumerate() {
        let m = &params.counts[i];
        let gauss_term = gauss_log_density(params, ws, ry, m)?;
        let count = ln_report_prob_from_h(fraud, m, r, table.h(m));
        if count == f64::NEG_INFINITY {
            diagnostics.push(format!(
                "transformer {}: counts {m} lie outside the H table support",
                i + 1
            ));
        }
        total += gauss_term + count;
        parts.push(TransformerTerms {
            gauss_term,
            count_term: Score::from_f64(count),
        });
    }
    Ok(LikelihoodBreakdown {
        total: Score::from_f64(total),
        per_transformer: parts,
        diagnostics,
    })
}

/// Full log-likelihood: Gaussian densities plus `ln P{R_i | M_i}` per transformer.
pub fn total_loglik(
    params: &ModelParams,
    ws: &Workspace,
    data: &[TransformerData],
    tables: &[HTable],
    fraud: &FraudMatrix,
) -> Result<LikelihoodBreakdown> {
    if data.len() != tables.len() || data.len() != params.counts.len() {
        return Err(Error::InvalidInput(format!(
            "{} transformers, {} H tables, {} count vectors",
            data.len(),
            tables.len(),
            params.counts.len()
        )));
    }
    for (d, m) in data.iter().zip(&params.counts) {
        check_shapes(params, &ws.design, d, m)?;
    }
    let rotated: Vec<_> = data.iter().map(|d| rotate_data(ws, d)).collect();
    let reported: Vec<_> = data.iter().map(|d| &d.reported).collect();
    total_loglik_rotated(params, ws, &rotated, &reported, tables, fraud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{midpoint_grid, BasisSpec};
    use crate::counts::{exact_h, exact_report_prob, random_fraud_matrix};
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn random_instance(seed: u64, n: usize, k: usize, c: usize, days: usize)
        -> (ModelParams, Workspace, TransformerData) {
        let mut rng = stream_rng(seed, 0);
        let basis = BasisSpec::new(3.min(k - 1), k, 0.0, 24.0).unwrap();
        let ws = Workspace::new(&basis, &midpoint_grid(&basis, n)).unwrap();
        let m = CountVector((0..c).map(|_| rng.random_range(0..20)).collect());
        let params = ModelParams {
            basis,
            gammas: (0..c).map(|_| (0..k).map(|_| rng.random_range(0.0..3.0)).collect()).collect(),
            sigma_gamma_sq: (0..c).map(|_| rng.random_range(0.0..0.5)).collect(),
            sigma_sq: rng.random_range(0.5..4.0),
            counts: vec![m.clone()],
        };
        let y = DMatrix::from_fn(n, days, |_, _| rng.random_range(0.0..60.0));
        let data = TransformerData::new(1, y, ws.design.times.clone(), m).unwrap();
        (params, ws, data)
    }

    #[test]
    fn score_ordering() {
        assert!(Score::NegInfinity < Score::Finite(-1e300));
        assert!(Score::Finite(1.0) > Score::Finite(0.5));
        assert_eq!(Score::from_f64(f64::NEG_INFINITY), Score::NegInfinity);
        let s = serde_json::to_string(&Score::NegInfinity).unwrap();
        assert_eq!(s, "null");
    }

    #[test]
    fn eigen_cache_invariants() {
        let basis = BasisSpec::default();
        let ws = Workspace::new(&basis, &midpoint_grid(&basis, 96)).unwrap();
        let q = &ws.cache.q;
        let n = q.nrows();
        let orth = q.transpose() * q - DMatrix::<f64>::identity(n, n);
        assert!(orth.amax() < 1e-10);
        let gram = &ws.design.values * ws.design.values.transpose();
        let rebuilt = q.transpose() * DMatrix::from_diagonal(&ws.cache.gamma) * q;
        assert!((gram - rebuilt).amax() < 1e-8);
        assert!(ws.cache.gamma.iter().all(|&g| g >= 0.0));
        assert_eq!(ws.cache.gamma.iter().filter(|&&g| g > 1e-9).count(), 9);
    }

    #[test]
    fn no_consumer_variance_is_diagonal() {
        let (mut params, ws, data) = random_instance(1, 20, 5, 2, 3);
        params.sigma_gamma_sq = vec![0.0, 0.0];
        let m = &params.counts[0];
        let mean = &ws.design.values * params.mean_coefficients(m);
        let rss: f64 = data.y.column_iter().map(|c| (c - &mean).norm_squared()).sum();
        let expected = 20.0 * 3.0 * params.sigma_sq.ln() + rss / params.sigma_sq;
        assert_abs_diff_eq!(gauss_neg2ll(&params, &ws.design, &data, m).unwrap(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(gauss_neg2ll_eigen(&params, &ws, &data, m).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn two_point_hand_computation() {
        // n = 2, K = 1 (single constant basis function), one class with m = 3
        let basis = BasisSpec::new(0, 1, 0.0, 1.0).unwrap();
        let ws = Workspace::new(&basis, &[0.25, 0.75]).unwrap();
        let params = ModelParams {
            basis,
            gammas: vec![vec![2.0]],
            sigma_gamma_sq: vec![0.5],
            sigma_sq: 1.0,
            counts: vec![CountVector(vec![3])],
        };
        let y = DMatrix::from_column_slice(2, 1, &[7.0, 4.0]);
        let data = TransformerData::new(1, y, vec![0.25, 0.75], CountVector(vec![3])).unwrap();
        // covariance [[2.5, 1.5], [1.5, 2.5]], det 4, inverse [[2.5,-1.5],[-1.5,2.5]]/4
        // residual (1, -2): quadratic (2.5 + 6 + 10) / 4 = 4.625
        let expected = 4f64.ln() + 4.625;
        let m = CountVector(vec![3]);
        assert_abs_diff_eq!(gauss_neg2ll(&params, &ws.design, &data, &m).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(gauss_neg2ll_eigen(&params, &ws, &data, &m).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn eigen_path_agrees_n24_k5() {
        for seed in 0..10 {
            let (params, ws, data) = random_instance(seed, 24, 5, 3, 2);
            let m = &params.counts[0];
            let a = gauss_neg2ll(&params, &ws.design, &data, m).unwrap();
            let b = gauss_neg2ll_eigen(&params, &ws, &data, m).unwrap();
            assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_noise_singular_covariance_errors() {
        let (mut params, ws, data) = random_instance(2, 20, 5, 2, 1);
        params.sigma_sq = 0.0;
        let m = params.counts[0].clone();
        assert!(matches!(gauss_neg2ll(&params, &ws.design, &data, &m), Err(Error::Numerical(_))));
        assert!(matches!(gauss_neg2ll_eigen(&params, &ws, &data, &m), Err(Error::Numerical(_))));
    }

    #[test]
    fn variance_increase_never_shrinks_delta() {
        let basis = BasisSpec::default();
        let ws = Workspace::new(&basis, &midpoint_grid(&basis, 48)).unwrap();
        let m = CountVector(vec![10, 5]);
        let lo = ws.cache.delta(pooled_variance(&[0.1, 0.2], &m), 1.0);
        let hi = ws.cache.delta(pooled_variance(&[0.3, 0.2], &m), 1.0);
        assert!(lo.iter().zip(hi.iter()).all(|(a, b)| b >= a));
    }

    fn small_setup() -> (ModelParams, Workspace, TransformerData, FraudMatrix) {
        let (mut params, ws, mut data) = random_instance(7, 16, 5, 2, 2);
        let fraud = FraudMatrix::new(vec![vec![0.9, 0.1], vec![0.25, 0.75]]).unwrap();
        params.counts = vec![CountVector(vec![3, 2])];
        data.reported = CountVector(vec![2, 3]);
        (params, ws, data, fraud)
    }

    #[test]
    fn lstar_zero_h_is_neg_infinity() {
        let (params, ws, data, _) = small_setup();
        let table = exact_h(&FraudMatrix::identity(2), &data.reported).unwrap();
        let ry = rotate_data(&ws, &data);
        let s = lstar(&params, &ws, &ry, &table, &CountVector(vec![3, 2])).unwrap();
        assert_eq!(s, Score::NegInfinity);
    }

    #[test]
    fn lstar_differences_match_full_likelihood() {
        let (params, ws, data, fraud) = small_setup();
        let table = exact_h(&fraud, &data.reported).unwrap();
        let ry = rotate_data(&ws, &data);
        let full = |m: &CountVector| {
            let g = gauss_neg2ll(&params, &ws.design, &data, m).unwrap();
            -0.5 * g + exact_report_prob(&fraud, m, &data.reported).unwrap().ln()
        };
        let ms: Vec<_> = (0..=5u32).map(|a| CountVector(vec![a, 5 - a])).collect();
        let mut by_full: Vec<(usize, f64)> = Vec::new();
        let mut by_star: Vec<(usize, Score)> = Vec::new();
        for (idx, m) in ms.iter().enumerate() {
            let s = lstar(&params, &ws, &ry, &table, m).unwrap();
            by_star.push((idx, s));
            by_full.push((idx, full(m)));
        }
        for (a, b) in [(0usize, 3usize), (1, 4), (2, 5), (3, 4)] {
            let ds = by_star[a].1.value() - by_star[b].1.value();
            let df = by_full[a].1 - by_full[b].1;
            assert!((ds - df).abs() < 1e-10, "{a} vs {b}: {ds} {df}");
        }
        by_full.sort_by(|x, y| y.1.total_cmp(&x.1));
        by_star.sort_by(|x, y| y.1.cmp(&x.1));
        let rank_full: Vec<usize> = by_full.iter().map(|x| x.0).collect();
        let rank_star: Vec<usize> = by_star.iter().map(|x| x.0).collect();
        assert_eq!(rank_full, rank_star);
    }

    #[test]
    fn breakdown_matches_from_scratch_density() {
        let (params, ws, data, fraud) = small_setup();
        let table = exact_h(&fraud, &data.reported).unwrap();
        let b = total_loglik(&params, &ws, std::slice::from_ref(&data), &[table], &fraud).unwrap();
        // explicit multivariate normal density per day
        let m = &params.counts[0];
        let n = data.num_points();
        let psi = &ws.design.values;
        let cov = psi * psi.transpose() * params.pooled_consumer_variance(m)
            + DMatrix::identity(n, n) * params.sigma_sq;
        let inv = cov.clone().try_inverse().unwrap();
        let det = cov.determinant();
        let mean = psi * params.mean_coefficients(m);
        let mut expected = 0.0;
        for col in data.y.column_iter() {
            let r = col - &mean;
            expected += -0.5 * (n as f64) * (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * (r.transpose() * &inv * &r)[(0, 0)];
        }
        expected += exact_report_prob(&fraud, m, &data.reported).unwrap().ln();
        assert!((b.total.value() - expected).abs() < 1e-9, "{} vs {expected}", b.total.value());
        let parts: f64 = b
            .per_transformer
            .iter()
            .map(|t| t.gauss_term + t.count_term.value())
            .sum();
        assert!((parts - b.total.value()).abs() < 1e-10);
    }

    #[test]
    fn truthful_reporting_has_zero_count_term() {
        let (mut params, ws, mut data, _) = small_setup();
        let id = FraudMatrix::identity(2);
        data.reported = params.counts[0].clone();
        let table = exact_h(&id, &data.reported).unwrap();
        let b = total_loglik(&params, &ws, std::slice::from_ref(&data), &[table.clone()], &id).unwrap();
        assert_abs_diff_eq!(b.per_transformer[0].count_term.value(), 0.0, epsilon = 1e-12);
        params.counts[0] = CountVector(vec![4, 1]);
        let b = total_loglik(&params, &ws, std::slice::from_ref(&data), &[table], &id).unwrap();
        assert_eq!(b.total, Score::NegInfinity);
        assert_eq!(b.diagnostics.len(), 1);
    }

    #[test]
    fn random_fraud_report_identity() {
        // the count term through H matches direct enumeration
        let mut rng = stream_rng(77, 0);
        let (params, ws, mut data, _) = small_setup();
        let fraud = random_fraud_matrix(2, &mut rng);
        data.reported = CountVector(vec![4, 1]);
        let table = exact_h(&fraud, &data.reported).unwrap();
        let b = total_loglik(&params, &ws, std::slice::from_ref(&data), &[table], &fraud).unwrap();
        let direct = exact_report_prob(&fraud, &params.counts[0], &data.reported).unwrap().ln();
        assert_abs_diff_eq!(b.per_transformer[0].count_term.value(), direct, epsilon = 1e-12);
    }
}
