//! Maximum-likelihood fitting by block coordinate ascent.
//!
//! Each outer iteration runs four sub-steps, each of which never lowers the
//! log-likelihood:
//!
//! 1. class mean coefficients by generalized least squares,
//! 2. noise variance by a bounded one-dimensional search,
//! 3. consumer variances by a bounded Nelder-Mead search,
//! 4. true counts by scanning every candidate in each transformer's H table.
//!
//! H tables are simulated once, before the first iteration, and held fixed.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::counts::{candidate_counts, estimate_h_table, CountVector, FraudMatrix, HProvenance, HTable};
use crate::error::{Error, Result};
use crate::likelihood::{
    lstar, rotate_data, total_loglik_rotated, LikelihoodBreakdown, RotatedResiduals, Score, Workspace,
};
use crate::model::{check_consistent, pooled_variance, ModelParams, TransformerData};
use crate::optim::{brent_minimize, nelder_mead_bounded, NelderMeadOptions};
use crate::rng::{derive_seed, install};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub basis: BasisSpec,
    pub max_outer_iters: usize,
    /// Relative log-likelihood change that counts as converged.
    pub rel_tol: f64,
    /// Tolerance of the inner variance searches.
    pub inner_tol: f64,
    pub sigma_sq_floor: f64,
    pub sigma_gamma_floor: f64,
    /// Simulated redistributions per H table.
    pub h_runs: u64,
    pub seed: u64,
    /// Known ratios `sigma_gamma_sq[c] / sigma_gamma_sq[C]` for the starting values;
    /// all ones when absent.
    pub variance_ratios: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            max_outer_iters: 200,
            rel_tol: 1e-6,
            inner_tol: 1e-8,
            sigma_sq_floor: 1e-8,
            sigma_gamma_floor: 0.0,
            h_runs: 100_000,
            seed: 0,
            variance_ratios: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidInput("max_outer_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.sigma_sq_floor > 0.0) || !(self.sigma_gamma_floor >= 0.0) {
            return Err(Error::InvalidInput(
                "noise variance floor must be positive and consumer variance floor nonnegative".into(),
            ));
        }
        if self.h_runs == 0 {
            return Err(Error::InvalidInput("h_runs must be at least 1".into()));
        }
        if let Some(r) = &self.variance_ratios {
            if r.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidInput("variance ratios must be nonnegative".into()));
            }
        }
        Ok(())
    }

    fn ratios(&self, classes: usize) -> Result<Vec<f64>> {
        match &self.variance_ratios {
            None => Ok(vec![1.0; classes]),
            Some(r) if r.len() == classes => Ok(r.clone()),
            Some(r) => Err(Error::InvalidInput(format!(
                "{} variance ratios for {classes} classes",
                r.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Init,
    Gammas,
    NoiseVariance,
    ConsumerVariance,
    Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub step: Step,
    pub loglik: Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
}

/// `L*` of one candidate count vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub m: CountVector,
    pub lstar: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTableInfo {
    pub reported: CountVector,
    pub provenance: HProvenance,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub trace: Vec<TraceEntry>,
    /// Final `L*` over every candidate, per transformer, best first.
    pub lstar_tables: Vec<Vec<CandidateScore>>,
    pub htables: Vec<HTableInfo>,
    pub status: FitStatus,
    pub iterations: usize,
    pub breakdown: LikelihoodBreakdown,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> Score {
        self.breakdown.total
    }
}

/// One H table per transformer, each from its own derived seed.
pub fn build_htables(data: &[TransformerData], fraud: &FraudMatrix, runs: u64, seed: u64) -> Result<Vec<HTable>> {
    install(|| {
        data.par_iter()
            .enumerate()
            .map(|(i, d)| estimate_h_table(fraud, &d.reported, runs, derive_seed(seed, i as u64)))
            .collect()
    })
}

/// Starting counts: the reported ones.
pub fn init_counts(data: &[TransformerData]) -> Vec<CountVector> {
    data.iter().map(|d| d.reported.clone()).collect()
}

/// Pooled residual variance of per-day least-squares fits on the basis,
/// with `K` degrees of freedom spent per fit.
pub fn init_sigma_sq(ws: &Workspace, data: &[TransformerData]) -> Result<f64> {
    let phi = &ws.design.values;
    let (n, k) = (phi.nrows(), phi.ncols());
    if n <= k {
        return Err(Error::InvalidInput(format!(
            "need more time points ({n}) than basis functions ({k})"
        )));
    }
    let qr = phi.clone().qr();
    let r = qr.r();
    let qt = qr.q().transpose();
    let mut rss = 0.0;
    let mut fits = 0usize;
    for d in data {
        for col in d.y.column_iter() {
            let rhs = &qt * col;
            let beta = r
                .solve_upper_triangular(&rhs)
                .ok_or_else(|| Error::Numerical("basis design is rank deficient".into()))?;
            rss += (col - phi * beta).norm_squared();
            fits += 1;
        }
    }
    Ok(rss / (fits * (n - k)) as f64)
}

/// Method-of-moments starting values for the consumer variances.
///
/// Solves `sum_i sum_j var(Y_i[j]) = s2C * sum_i (sum_c M_ci s_c) trace(Psi Psi') + I n sigma^2`
/// for `s2C`, clamps it at zero and returns `s_c * s2C`. Transformers with
/// several days estimate `var(Y_i[j])` by the across-day sample variance,
/// single-day ones by the squared residual from the current mean.
pub fn init_sigma_gamma(
    ws: &Workspace,
    data: &[TransformerData],
    counts: &[CountVector],
    gammas: &[Vec<f64>],
    sigma_sq: f64,
    ratios: &[f64],
) -> Result<Vec<f64>> {
    let trace = ws.cache.trace();
    let phi = &ws.design.values;
    let mut lhs = 0.0;
    let mut weight = 0.0;
    for (d, m) in data.iter().zip(counts) {
        let days = d.days();
        if days > 1 {
            for row in d.y.row_iter() {
                let mean = row.mean();
                lhs += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (days - 1) as f64;
            }
        } else {
            let mut mu = DVector::zeros(phi.ncols());
            for (g, &mc) in gammas.iter().zip(m.as_slice()) {
                mu += DVector::from_column_slice(g) * mc as f64;
            }
            lhs += (d.y.column(0) - phi * mu).norm_squared();
        }
        lhs -= d.num_points() as f64 * sigma_sq;
        weight += m
            .as_slice()
            .iter()
            .zip(ratios)
            .map(|(&mc, s)| mc as f64 * s)
            .sum::<f64>()
            * trace;
    }
    if weight <= 0.0 {
        return Err(Error::InvalidInput(
            "consumer variance is unidentifiable: weighted counts times trace(Psi Psi') is zero".into(),
        ));
    }
    let base = (lhs / weight).max(0.0);
    Ok(ratios.iter().map(|s| s * base).collect())
}

/// Data rotated into the eigenbasis once per fit.
struct Prepared<'a> {
    ws: &'a Workspace,
    rotated: Vec<DMatrix<f64>>,
    reported: Vec<&'a CountVector>,
    classes: usize,
}

impl<'a> Prepared<'a> {
    fn new(ws: &'a Workspace, data: &'a [TransformerData]) -> Self {
        Self {
            ws,
            rotated: data.iter().map(|d| rotate_data(ws, d)).collect(),
            reported: data.iter().map(|d| &d.reported).collect(),
            classes: data[0].reported.classes(),
        }
    }

    fn residuals(&self, gammas: &[Vec<f64>], counts: &[CountVector]) -> Vec<(RotatedResiduals, CountVector)> {
        let k = self.ws.rotated_design.ncols();
        self.rotated
            .iter()
            .zip(counts)
            .map(|(ry, m)| {
                let mut mu = DVector::zeros(k);
                for (g, &mc) in gammas.iter().zip(m.as_slice()) {
                    for (a, v) in mu.iter_mut().zip(g) {
                        *a += mc as f64 * v;
                    }
                }
                (RotatedResiduals::new(self.ws, ry, &mu), m.clone())
            })
            .collect()
    }
}

/// `l1` over all transformers for fixed residuals; `+inf` where undefined.
fn variance_objective(res: &[(RotatedResiduals, CountVector)], gamma: &DVector<f64>, sgs: &[f64], s2: f64) -> f64 {
    let mut total = 0.0;
    for (r, m) in res {
        match r.neg2ll(gamma, pooled_variance(sgs, m), s2) {
            Ok(v) => total += v,
            Err(_) => return f64::INFINITY,
        }
    }
    total
}

fn count_rank(counts: &[CountVector], classes: usize) -> usize {
    let mat = DMatrix::from_fn(counts.len(), classes, |i, c| counts[i][c] as f64);
    let svd = mat.svd(false, false);
    let smax = svd.singular_values.max();
    svd.singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-12 * classes.max(counts.len()) as f64)
        .count()
}

/// Generalized least-squares class means for fixed counts and variances.
pub fn update_gammas(
    ws: &Workspace,
    data: &[TransformerData],
    counts: &[CountVector],
    sigma_gamma_sq: &[f64],
    sigma_sq: f64,
) -> Result<Vec<Vec<f64>>> {
    check_consistent(data)?;
    let prep = Prepared::new(ws, data);
    gls(&prep, counts, sigma_gamma_sq, sigma_sq)
}

fn gls(prep: &Prepared<'_>, counts: &[CountVector], sgs: &[f64], s2: f64) -> Result<Vec<Vec<f64>>> {
    let c = prep.classes;
    let a = &prep.ws.rotated_design;
    let k = a.ncols();
    let rank = count_rank(counts, c);
    if rank < c {
        return Err(Error::Numerical(format!(
            "class means are not identifiable: the count vectors span rank {rank} < {c} classes \
             (e.g. proportional counts across transformers)"
        )));
    }
    let mut normal = DMatrix::zeros(c * k, c * k);
    let mut rhs = DVector::zeros(c * k);
    for (ry, m) in prep.rotated.iter().zip(counts) {
        let delta = prep.ws.cache.delta(pooled_variance(sgs, m), s2);
        if delta.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Numerical(format!(
                "covariance not positive definite with sigma^2 = {s2}"
            )));
        }
        let inv = delta.map(|d| 1.0 / d);
        // A' diag(inv) A and A' diag(inv) sum_d QY_d
        let weighted = DMatrix::from_fn(a.nrows(), k, |j, col| a[(j, col)] * inv[j]);
        let w = a.transpose() * &weighted;
        let ysum = ry.column_sum();
        let b = weighted.transpose() * ysum;
        let days = ry.ncols() as f64;
        for c1 in 0..c {
            let m1 = m[c1] as f64;
            if m1 == 0.0 {
                continue;
            }
            rhs.rows_mut(c1 * k, k).axpy(m1, &b, 1.0);
            for c2 in 0..c {
                let m2 = m[c2] as f64;
                if m2 == 0.0 {
                    continue;
                }
                let mut blk = normal.view_mut((c1 * k, c2 * k), (k, k));
                blk += &w * (days * m1 * m2);
            }
        }
    }
    let chol = Cholesky::new(normal).ok_or_else(|| {
        Error::Numerical("GLS normal matrix is not positive definite (rank deficient design)".into())
    })?;
    let sol = chol.solve(&rhs);
    Ok((0..c).map(|cls| sol.rows(cls * k, k).iter().copied().collect()).collect())
}

/// Outcome of the noise-variance search.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSqUpdate {
    pub sigma_sq: f64,
    /// Set when the optimum stayed on the upper bracket edge after widening.
    pub warning: Option<String>,
}

/// Bounded search for the noise variance; never returns a worse value than `current`.
pub fn update_sigma_sq(
    ws: &Workspace,
    data: &[TransformerData],
    params: &ModelParams,
    floor: f64,
    tol: f64,
) -> Result<SigmaSqUpdate> {
    check_consistent(data)?;
    let prep = Prepared::new(ws, data);
    let res = prep.residuals(&params.gammas, &params.counts);
    Ok(sigma_sq_search(ws, &res, &params.sigma_gamma_sq, params.sigma_sq, floor, tol))
}

fn sigma_sq_search(
    ws: &Workspace,
    res: &[(RotatedResiduals, CountVector)],
    sgs: &[f64],
    current: f64,
    floor: f64,
    tol: f64,
) -> SigmaSqUpdate {
    let gamma = &ws.cache.gamma;
    let f = |s2: f64| variance_objective(res, gamma, sgs, s2);
    let mut upper = (10.0 * current).max(10.0 * floor);
    let mut best = brent_minimize(f, floor, upper, tol);
    let mut widenings = 0;
    let mut warning = None;
    while best.x >= upper * (1.0 - 1e-6) {
        if widenings == 3 {
            warning = Some(format!(
                "noise variance search ended on its upper bound {upper:.4e} after 3 widenings"
            ));
            break;
        }
        upper *= 10.0;
        widenings += 1;
        best = brent_minimize(f, floor, upper, tol);
    }
    let mut choice = (best.x, best.value);
    for x in [floor, current] {
        let v = f(x);
        if v < choice.1 {
            choice = (x, v);
        }
    }
    SigmaSqUpdate {
        sigma_sq: choice.0,
        warning,
    }
}

/// Bounded Nelder-Mead search for the consumer variances, restarted once from
/// the previous values scaled by 1.1. Never returns worse values than the current ones.
pub fn update_sigma_gamma(
    ws: &Workspace,
    data: &[TransformerData],
    params: &ModelParams,
    floor: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    check_consistent(data)?;
    let prep = Prepared::new(ws, data);
    let res = prep.residuals(&params.gammas, &params.counts);
    Ok(sigma_gamma_search(ws, &res, &params.sigma_gamma_sq, params.sigma_sq, floor, tol))
}

fn sigma_gamma_search(
    ws: &Workspace,
    res: &[(RotatedResiduals, CountVector)],
    current: &[f64],
    s2: f64,
    floor: f64,
    tol: f64,
) -> Vec<f64> {
    let gamma = &ws.cache.gamma;
    let c = current.len();
    let f = |x: &[f64]| variance_objective(res, gamma, x, s2);
    // scale of a consumer variance comparable to the noise: sigma^2 / (N * max eigenvalue)
    let total_m: f64 = res.iter().map(|(_, m)| m.total() as f64).sum::<f64>() / res.len() as f64;
    let gmax = gamma.max().max(f64::MIN_POSITIVE);
    let natural = (s2 / (total_m.max(1.0) * gmax)).max(1e-12);
    let steps: Vec<f64> = current
        .iter()
        .map(|&v| if v > 0.0 { 0.2 * v } else { natural })
        .collect();
    let lower = vec![floor; c];
    let opts = NelderMeadOptions {
        ftol: tol * 1e-4,
        xtol: tol,
        max_evaluations: 4000,
    };

    let mut best = (current.to_vec(), f(current));
    let first = nelder_mead_bounded(f, current, &steps, &lower, opts);
    if first.value < best.1 {
        best = (first.x, first.value);
    }
    let restart: Vec<f64> = current
        .iter()
        .zip(&steps)
        .map(|(&v, &s)| if v > 0.0 { 1.1 * v } else { v + s })
        .collect();
    let restart_steps: Vec<f64> = restart
        .iter()
        .zip(&steps)
        .map(|(&v, &s)| if v > 0.0 { 0.2 * v } else { s })
        .collect();
    let second = nelder_mead_bounded(f, &restart, &restart_steps, &lower, opts);
    if second.value < best.1 {
        best = (second.x, second.value);
    }
    // polish from the winner
    let polish_steps: Vec<f64> = best
        .0
        .iter()
        .map(|&v| if v > 0.0 { 0.05 * v } else { natural })
        .collect();
    let polish = nelder_mead_bounded(f, &best.0, &polish_steps, &lower, opts);
    if polish.value < best.1 {
        best = (polish.x, polish.value);
    }
    for c in 0..best.0.len() {
        if best.0[c] > floor {
            let mut x = best.0.clone();
            x[c] = floor;
            let v = f(&x);
            if v <= best.1 {
                best = (x, v);
            }
        }
    }
    best.0
}

/// `L*` for every candidate of every transformer, best first; ties go to the
/// candidate closer (L1) to the reported counts, then lexicographically smaller.
fn score_all(
    prep: &Prepared<'_>,
    params: &ModelParams,
    tables: &[HTable],
    candidates: &[Vec<CountVector>],
) -> Result<Vec<Vec<CandidateScore>>> {
    install(|| {
        prep.rotated
            .par_iter()
            .zip(tables.par_iter())
            .zip(candidates.par_iter())
            .zip(prep.reported.par_iter())
            .map(|(((ry, table), cands), reported)| {
                let mut scored = cands
                    .iter()
                    .map(|m| {
                        Ok(CandidateScore {
                            m: m.clone(),
                            lstar: lstar(params, prep.ws, ry, table, m)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                scored.sort_by(|a, b| {
                    b.lstar
                        .cmp(&a.lstar)
                        .then_with(|| a.m.l1_distance(reported).cmp(&b.m.l1_distance(reported)))
                        .then_with(|| a.m.cmp(&b.m))
                });
                Ok(scored)
            })
            .collect()
    })
}

/// Integer maximization of `L*` over each transformer's H-table support.
pub fn update_counts(
    ws: &Workspace,
    data: &[TransformerData],
    params: &ModelParams,
    tables: &[HTable],
) -> Result<Vec<CountVector>> {
    check_consistent(data)?;
    let prep = Prepared::new(ws, data);
    let candidates = tables.iter().map(candidate_counts).collect::<Result<Vec<_>>>()?;
    let scored = score_all(&prep, params, tables, &candidates)?;
    Ok(scored.into_iter().map(|s| s[0].m.clone()).collect())
}

/// Fits the model from the default starting values.
pub fn fit(data: &[TransformerData], fraud: &FraudMatrix, config: &FitConfig) -> Result<FitResult> {
    fit_from(data, fraud, config, None)
}

/// Fits the model, optionally starting from given parameters instead of the
/// reported counts and moment estimates.
pub fn fit_from(
    data: &[TransformerData],
    fraud: &FraudMatrix,
    config: &FitConfig,
    start: Option<&ModelParams>,
) -> Result<FitResult> {
    config.validate()?;
    check_consistent(data)?;
    let classes = data[0].reported.classes();
    if fraud.classes() != classes {
        return Err(Error::InvalidInput(format!(
            "fraud matrix has {} classes, data report {classes}",
            fraud.classes()
        )));
    }
    let ws = Workspace::new(&config.basis, &data[0].times)?;
    let tables = build_htables(data, fraud, config.h_runs, config.seed)?;
    let candidates = tables.iter().map(candidate_counts).collect::<Result<Vec<_>>>()?;
    let prep = Prepared::new(&ws, data);
    let mut warnings = Vec::new();

    let mut params = match start {
        Some(p) => {
            p.validate()?;
            if p.basis != config.basis || p.classes() != classes || p.counts.len() != data.len() {
                return Err(Error::InvalidInput(
                    "starting parameters do not match the data or basis".into(),
                ));
            }
            for (m, d) in p.counts.iter().zip(data) {
                if m.total() != d.reported.total() {
                    return Err(Error::InvalidInput(format!(
                        "starting counts {m} do not total {} consumers",
                        d.reported.total()
                    )));
                }
            }
            p.clone()
        }
        None => {
            let counts = init_counts(data);
            let s2 = init_sigma_sq(&ws, data)?.max(config.sigma_sq_floor);
            let zero = vec![0.0; classes];
            let gammas = gls(&prep, &counts, &zero, s2)?;
            let ratios = config.ratios(classes)?;
            let sgs = init_sigma_gamma(&ws, data, &counts, &gammas, s2, &ratios)?
                .into_iter()
                .map(|v| v.max(config.sigma_gamma_floor))
                .collect();
            ModelParams {
                basis: config.basis,
                gammas,
                sigma_gamma_sq: sgs,
                sigma_sq: s2,
                counts,
            }
        }
    };

    let loglik = |p: &ModelParams| -> Result<LikelihoodBreakdown> {
        total_loglik_rotated(p, &ws, &prep.rotated, &prep.reported, &tables, fraud)
    };
    let mut current = loglik(&params)?;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        step: Step::Init,
        loglik: current.total,
    }];

    // Accepts a proposal only if it does not lower the log-likelihood.
    let attempt = |params: &mut ModelParams,
                       current: &mut LikelihoodBreakdown,
                       proposal: ModelParams,
                       iteration: usize,
                       step: Step,
                       trace: &mut Vec<TraceEntry>|
     -> Result<()> {
        let cand = loglik(&proposal)?;
        if cand.total >= current.total {
            *params = proposal;
            *current = cand;
        }
        trace.push(TraceEntry {
            iteration,
            step,
            loglik: current.total,
        });
        Ok(())
    };

    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    let mut final_scores = Vec::new();
    for iter in 1..=config.max_outer_iters {
        iterations = iter;
        let before = current.total;
        let counts_before = params.counts.clone();

        let gammas = gls(&prep, &params.counts, &params.sigma_gamma_sq, params.sigma_sq)?;
        let proposal = ModelParams { gammas, ..params.clone() };
        attempt(&mut params, &mut current, proposal, iter, Step::Gammas, &mut trace)?;

        let res = prep.residuals(&params.gammas, &params.counts);
        let upd = sigma_sq_search(
            &ws,
            &res,
            &params.sigma_gamma_sq,
            params.sigma_sq,
            config.sigma_sq_floor,
            config.inner_tol,
        );
        if let Some(w) = upd.warning {
            warnings.push(format!("iteration {iter}: {w}"));
        }
        let proposal = ModelParams {
            sigma_sq: upd.sigma_sq,
            ..params.clone()
        };
        attempt(&mut params, &mut current, proposal, iter, Step::NoiseVariance, &mut trace)?;

        let res = prep.residuals(&params.gammas, &params.counts);
        let sgs = sigma_gamma_search(
            &ws,
            &res,
            &params.sigma_gamma_sq,
            params.sigma_sq,
            config.sigma_gamma_floor,
            config.inner_tol,
        );
        let proposal = ModelParams {
            sigma_gamma_sq: sgs,
            ..params.clone()
        };
        attempt(&mut params, &mut current, proposal, iter, Step::ConsumerVariance, &mut trace)?;

        let scored = score_all(&prep, &params, &tables, &candidates)?;
        let counts: Vec<CountVector> = scored.iter().map(|s| s[0].m.clone()).collect();
        let proposal = ModelParams { counts, ..params.clone() };
        attempt(&mut params, &mut current, proposal, iter, Step::Counts, &mut trace)?;
        final_scores = scored;

        let counts_same = params.counts == counts_before;
        let small_change = match (before, current.total) {
            (Score::Finite(a), Score::Finite(b)) => (b - a).abs() <= config.rel_tol * a.abs().max(1e-300),
            _ => false,
        };
        if counts_same && small_change {
            status = FitStatus::Converged;
            break;
        }
    }

    // scores reflect the final parameters
    if final_scores.is_empty() || status == FitStatus::MaxIterations {
        final_scores = score_all(&prep, &params, &tables, &candidates)?;
    }
    let boundary: Vec<usize> = params
        .sigma_gamma_sq
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= config.sigma_gamma_floor)
        .map(|(c, _)| c + 1)
        .collect();
    if !boundary.is_empty() {
        warnings.push(format!(
            "consumer variance of class(es) {boundary:?} estimated at the lower bound"
        ));
    }
    if status == FitStatus::MaxIterations {
        warnings.push(format!(
            "no convergence after {} iterations; returning the last iterate",
            config.max_outer_iters
        ));
    }

    let htables = tables
        .iter()
        .map(|t| HTableInfo {
            reported: t.reported().clone(),
            provenance: t.provenance(),
            support: t.len(),
        })
        .collect();
    Ok(FitResult {
        params,
        trace,
        lstar_tables: final_scores,
        htables,
        status,
        iterations,
        breakdown: current,
        warnings,
    })
}

/// Largest drop between consecutive trace entries (zero for a monotone trace).
pub fn worst_trace_drop(trace: &[TraceEntry]) -> f64 {
    trace
        .windows(2)
        .map(|w| match (w[0].loglik, w[1].loglik) {
            (Score::Finite(a), Score::Finite(b)) => (a - b).max(0.0),
            (Score::Finite(_), Score::NegInfinity) => f64::INFINITY,
            _ => 0.0,
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::total_loglik;
    use crate::sim::{build_case, BaseCurves, SimScenario};
    use rand::Rng;

    fn one_class(sigma_gamma_sq: f64, sigma_sq: f64, days: usize, seed: u64) -> SimScenario {
        SimScenario {
            case_id: None,
            basis: BasisSpec::default(),
            num_points: 48,
            replicates: days,
            gammas: vec![vec![1.0, 0.8, 0.6, 0.9, 1.4, 1.1, 1.6, 1.2, 0.9]],
            sigma_gamma_sq: vec![sigma_gamma_sq],
            sigma_sq,
            fraud: FraudMatrix::identity(1),
            true_counts: [20, 35, 50, 65].iter().map(|&m| CountVector::new(vec![m])).collect(),
            reported_counts: None,
            seed,
        }
    }

    fn small_config(seed: u64) -> FitConfig {
        FitConfig {
            h_runs: 20_000,
            seed,
            ..Default::default()
        }
    }

    fn case_one(days: usize, seed: u64) -> (SimScenario, Vec<TransformerData>) {
        let mut sc = build_case(1, &BaseCurves::stand_in(), seed).unwrap();
        sc.replicates = days;
        let data = sc.simulate_dataset(0).unwrap();
        (sc, data)
    }

    #[test]
    fn noiseless_single_class_recovers_mean() {
        let sc = one_class(0.0, 1e-6, 2, 3);
        let data = sc.simulate_dataset(0).unwrap();
        let r = fit(&data, &sc.fraud, &small_config(0)).unwrap();
        assert_eq!(r.status, FitStatus::Converged);
        assert!(r.iterations <= 3, "{} iterations", r.iterations);
        for (g, t) in r.params.gammas[0].iter().zip(&sc.gammas[0]) {
            assert!((g - t).abs() < 1e-3, "{g} vs {t}");
        }
        assert!(r.params.sigma_sq < 1e-5);
    }

    #[test]
    fn trace_is_monotone_and_counts_stay_feasible() {
        let (_, data) = case_one(2, 11);
        let r = fit(&data, &crate::sim::two_class_fraud(), &small_config(1)).unwrap();
        assert_eq!(worst_trace_drop(&r.trace), 0.0);
        for (m, d) in r.params.counts.iter().zip(&data) {
            assert_eq!(m.total(), d.reported.total());
        }
        assert!(r.loglik().is_finite());
        for (tab, m) in r.lstar_tables.iter().zip(&r.params.counts) {
            assert_eq!(&tab[0].m, m);
        }
    }

    #[test]
    fn fit_is_a_fixed_point() {
        let (_, data) = case_one(3, 12);
        let fraud = crate::sim::two_class_fraud();
        let cfg = small_config(2);
        let r = fit(&data, &fraud, &cfg).unwrap();
        let again = fit_from(&data, &fraud, &cfg, Some(&r.params)).unwrap();
        assert_eq!(again.params.counts, r.params.counts);
        let (a, b) = (r.loglik().value(), again.loglik().value());
        assert!(b >= a - 1e-9);
        assert!((b - a).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
        assert_eq!(again.iterations, 1);
    }

    #[test]
    fn same_seed_same_result() {
        let (_, data) = case_one(2, 13);
        let fraud = crate::sim::two_class_fraud();
        let a = fit(&data, &fraud, &small_config(5)).unwrap();
        let b = fit(&data, &fraud, &small_config(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_class_matches_grid_search() {
        let sc = one_class(0.05, 2.0, 3, 21);
        let data = sc.simulate_dataset(0).unwrap();
        let cfg = small_config(0);
        let r = fit(&data, &sc.fraud, &cfg).unwrap();
        let ws = Workspace::new(&cfg.basis, &data[0].times).unwrap();
        let tables = build_htables(&data, &sc.fraud, cfg.h_runs, cfg.seed).unwrap();
        let counts = init_counts(&data);
        let mut best = f64::NEG_INFINITY;
        for i in 0..60 {
            let s2 = 1.0 + 2.0 * i as f64 / 59.0;
            for j in 0..60 {
                let sgs = 0.15 * j as f64 / 59.0;
                let gammas = update_gammas(&ws, &data, &counts, &[sgs], s2).unwrap();
                let p = ModelParams {
                    basis: cfg.basis,
                    gammas,
                    sigma_gamma_sq: vec![sgs],
                    sigma_sq: s2,
                    counts: counts.clone(),
                };
                let ll = total_loglik(&p, &ws, &data, &tables, &sc.fraud).unwrap().total.value();
                best = best.max(ll);
            }
        }
        let got = r.loglik().value();
        assert!(got >= best - 1e-9, "fit {got} below grid {best}");
        assert!(got - best < 0.05, "grid should be close: fit {got}, grid {best}");
    }

    #[test]
    fn gls_is_stationary() {
        let (sc, data) = case_one(2, 14);
        let ws = Workspace::new(&sc.basis, &data[0].times).unwrap();
        let counts = init_counts(&data);
        let (sgs, s2) = (vec![0.02, 0.07], 3.0);
        let gammas = update_gammas(&ws, &data, &counts, &sgs, s2).unwrap();
        let neg2 = |g: &[Vec<f64>]| -> f64 {
            let p = ModelParams {
                basis: sc.basis,
                gammas: g.to_vec(),
                sigma_gamma_sq: sgs.clone(),
                sigma_sq: s2,
                counts: counts.clone(),
            };
            data.iter()
                .zip(&counts)
                .map(|(d, m)| crate::likelihood::gauss_neg2ll_eigen(&p, &ws, d, m).unwrap())
                .sum()
        };
        let base = neg2(&gammas);
        let mut rng = crate::rng::stream_rng(9, 0);
        for _ in 0..50 {
            let scale = 10f64.powf(rng.random_range(-4.0..-1.0));
            let probe: Vec<Vec<f64>> = gammas
                .iter()
                .map(|g| g.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect())
                .collect();
            assert!(neg2(&probe) >= base - 1e-10 * base.abs());
        }
    }

    #[test]
    fn proportional_counts_are_rejected() {
        let (sc, mut data) = case_one(1, 15);
        for d in &mut data {
            d.reported = CountVector::new(vec![30, 45]);
        }
        let ws = Workspace::new(&sc.basis, &data[0].times).unwrap();
        let counts = init_counts(&data);
        let err = update_gammas(&ws, &data, &counts, &[0.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn restarts_agree() {
        let (sc, data) = case_one(5, 16);
        let fraud = crate::sim::two_class_fraud();
        let cfg = small_config(3);
        let a = fit(&data, &fraud, &cfg).unwrap();
        let mut start = sc.params();
        start.counts = init_counts(&data);
        let b = fit_from(&data, &fraud, &cfg, Some(&start)).unwrap();
        let (x, y) = (a.loglik().value(), b.loglik().value());
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
    }

    #[test]
    fn sigma_sq_update_never_worsens() {
        let (sc, data) = case_one(2, 17);
        let ws = Workspace::new(&sc.basis, &data[0].times).unwrap();
        let mut p = sc.params();
        p.counts = init_counts(&data);
        let obj = |s2: f64| -> f64 {
            let q = ModelParams { sigma_sq: s2, ..p.clone() };
            data.iter()
                .zip(&q.counts)
                .map(|(d, m)| crate::likelihood::gauss_neg2ll_eigen(&q, &ws, d, m).unwrap())
                .sum()
        };
        let upd = update_sigma_sq(&ws, &data, &p, 1e-8, 1e-10).unwrap();
        assert!(obj(upd.sigma_sq) <= obj(p.sigma_sq));
        for k in 1..40 {
            let s2 = 0.2 * k as f64;
            assert!(obj(upd.sigma_sq) <= obj(s2) + 1e-9);
        }
        let sgs = update_sigma_gamma(&ws, &data, &p, 0.0, 1e-8).unwrap();
        assert!(sgs.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = FitConfig::default();
        c.rel_tol = 0.0;
        assert!(c.validate().is_err());
        let mut c = FitConfig::default();
        c.variance_ratios = Some(vec![1.0, -1.0]);
        assert!(c.validate().is_err());
        let c: FitConfig = serde_json::from_str(r#"{"seed": 4, "max_outer_iters": 7}"#).unwrap();
        assert_eq!((c.seed, c.max_outer_iters, c.h_runs), (4, 7, 100_000));
    }

    #[test]
    fn init_sigma_sq_needs_more_points_than_basis() {
        let mut sc = one_class(0.0, 1.0, 1, 1);
        sc.num_points = 9;
        let data = sc.simulate_dataset(0).unwrap();
        let ws = Workspace::new(&sc.basis, &data[0].times).unwrap();
        assert!(init_sigma_sq(&ws, &data).is_err());
    }
}
