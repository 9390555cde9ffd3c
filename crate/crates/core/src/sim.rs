//! Synthetic consumer-level and aggregated data.
//!
//! The four shipped scenarios follow the two-class design used to study the
//! estimator: five transformers of 75 consumers, noise variance 3.5, and the
//! misreporting matrix `((0.98, 0.02), (0.05, 0.95))`. Class means come from
//! a stand-in pair of coefficient vectors (see [`BaseCurves::stand_in`]); they
//! are not fitted to any real data.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, midpoint_grid, BasisSpec, DesignMatrix};
use crate::counts::{sample_reported, CountVector, FraudMatrix};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TransformerData};
use crate::rng::{derive_seed, install, stream_rng, Rng};

pub const CONSUMERS_PER_TRANSFORMER: u32 = 75;
pub const NOISE_VARIANCE: f64 = 3.5;
pub const BASE_CONSUMER_VARIANCE: [f64; 2] = [0.03, 0.06];
/// Offset added to the rescaled curves.
pub const RESCALED_OFFSET: f64 = 2.0;

/// True class-1 counts, balanced and unbalanced designs.
pub const BALANCED_TRUE: [u32; 5] = [45, 29, 61, 24, 12];
pub const BALANCED_REPORTED: [u32; 5] = [45, 32, 60, 28, 16];
pub const UNBALANCED_TRUE: [u32; 5] = [66, 65, 69, 62, 72];
pub const UNBALANCED_REPORTED: [u32; 5] = [65, 66, 68, 63, 71];

/// Stream reserved for drawing reported counts, away from per-dataset streams.
const REPORTED_STREAM: u64 = u64::MAX;

/// Unscaled class-mean coefficients for the residential (class 1) and
/// commercial (class 2) curves, on nine cubic B-splines over `[0, 24]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseCurves {
    pub residential: Vec<f64>,
    pub commercial: Vec<f64>,
}

impl BaseCurves {
    /// Hand-made shapes: a low residential curve with a midday shoulder and
    /// an evening peak near 20h, and a commercial curve about six times
    /// larger that bottoms out before dawn and peaks near 18h.
    pub fn stand_in() -> Self {
        Self {
            residential: vec![0.40, 0.30, 0.22, 0.35, 0.75, 0.40, 1.05, 0.75, 0.42],
            commercial: vec![0.90, 0.45, 0.05, 1.60, 3.60, 5.20, 5.60, 2.40, 1.10],
        }
    }
}

impl Default for BaseCurves {
    fn default() -> Self {
        Self::stand_in()
    }
}

/// Full description of a simulation study; serializes to the scenario JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    /// 1-4 for the shipped cases, `None` for a custom scenario.
    #[serde(default)]
    pub case_id: Option<u8>,
    pub basis: BasisSpec,
    pub num_points: usize,
    pub replicates: usize,
    pub gammas: Vec<Vec<f64>>,
    pub sigma_gamma_sq: Vec<f64>,
    pub sigma_sq: f64,
    pub fraud: FraudMatrix,
    pub true_counts: Vec<CountVector>,
    /// Fixed reported counts; drawn once from `seed` when absent.
    #[serde(default)]
    pub reported_counts: Option<Vec<CountVector>>,
    pub seed: u64,
}

impl SimScenario {
    pub fn transformers(&self) -> usize {
        self.true_counts.len()
    }

    pub fn classes(&self) -> usize {
        self.gammas.len()
    }

    pub fn times(&self) -> Vec<f64> {
        midpoint_grid(&self.basis, self.num_points)
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            basis: self.basis,
            gammas: self.gammas.clone(),
            sigma_gamma_sq: self.sigma_gamma_sq.clone(),
            sigma_sq: self.sigma_sq,
            counts: self.true_counts.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if self.num_points == 0 || self.replicates == 0 {
            return Err(Error::InvalidInput(
                "scenario needs at least one time point and one day".into(),
            ));
        }
        if self.true_counts.is_empty() {
            return Err(Error::InvalidInput("scenario has no transformers".into()));
        }
        if self.fraud.classes() != self.classes() {
            return Err(Error::InvalidInput(format!(
                "fraud matrix has {} classes, scenario has {}",
                self.fraud.classes(),
                self.classes()
            )));
        }
        if let Some(rep) = &self.reported_counts {
            if rep.len() != self.true_counts.len() {
                return Err(Error::InvalidInput(format!(
                    "{} reported count vectors for {} transformers",
                    rep.len(),
                    self.true_counts.len()
                )));
            }
            for (i, (r, m)) in rep.iter().zip(&self.true_counts).enumerate() {
                if r.classes() != m.classes() || r.total() != m.total() {
                    return Err(Error::InvalidInput(format!(
                        "transformer {}: reported {r} and true {m} disagree on classes or total",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reported counts used by every dataset of this scenario.
    pub fn resolved_reported(&self) -> Result<Vec<CountVector>> {
        if let Some(rep) = &self.reported_counts {
            return Ok(rep.clone());
        }
        let mut rng = stream_rng(self.seed, REPORTED_STREAM);
        self.true_counts
            .iter()
            .map(|m| sample_reported(&self.fraud, m, &mut rng))
            .collect()
    }

    /// Dataset number `index`; each dataset has its own derived seed.
    pub fn simulate_dataset(&self, index: u64) -> Result<Vec<TransformerData>> {
        self.validate()?;
        let reported = self.resolved_reported()?;
        let params = self.params();
        let times = self.times();
        let design = eval_basis(&self.basis, &times)?;
        let mut rng = stream_rng(derive_seed(self.seed, index), 0);
        (0..self.transformers())
            .map(|i| {
                simulate_transformer(&params, &design, i, self.replicates, &reported[i], &mut rng)
                    .map(|mut d| {
                        d.transformer_id = i as u32 + 1;
                        d
                    })
            })
            .collect()
    }

    /// Datasets `0..count`, generated in parallel; identical to calling
    /// [`Self::simulate_dataset`] for each index in turn.
    pub fn simulate_many(&self, count: u64) -> Result<Vec<Vec<TransformerData>>> {
        install(|| {
            (0..count)
                .into_par_iter()
                .map(|k| self.simulate_dataset(k))
                .collect()
        })
    }
}

/// One consumer's load curve on the rows of `design`: the class mean plus a
/// random-coefficient deviation, without measurement noise.
pub fn simulate_consumer(
    params: &ModelParams,
    design: &DesignMatrix,
    class: usize,
    rng: &mut Rng,
) -> Result<DVector<f64>> {
    if class >= params.classes() {
        return Err(Error::InvalidInput(format!(
            "class {class} out of range for {} classes",
            params.classes()
        )));
    }
    let coef = consumer_coefficients(params, class, rng);
    Ok(&design.values * coef)
}

fn consumer_coefficients(params: &ModelParams, class: usize, rng: &mut Rng) -> DVector<f64> {
    let sd = params.sigma_gamma_sq[class].sqrt();
    let mut coef = params.gamma(class);
    if sd > 0.0 {
        for v in coef.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sd * z;
        }
    }
    coef
}

/// Aggregate readings of transformer `i` over `days` independent days.
///
/// Consumers are redrawn every day; noise is added to the aggregate.
pub fn simulate_transformer(
    params: &ModelParams,
    design: &DesignMatrix,
    i: usize,
    days: usize,
    reported: &CountVector,
    rng: &mut Rng,
) -> Result<TransformerData> {
    let m = params
        .counts
        .get(i)
        .ok_or_else(|| Error::InvalidInput(format!("no true counts for transformer {i}")))?;
    let n = design.nrows();
    let noise_sd = params.sigma_sq.sqrt();
    let mut y = DMatrix::zeros(n, days);
    for d in 0..days {
        // Psi = Phi: sum the coefficients, then project once
        let mut coef = DVector::zeros(params.basis.num_basis);
        for (class, &mc) in m.as_slice().iter().enumerate() {
            for _ in 0..mc {
                coef += consumer_coefficients(params, class, rng);
            }
        }
        let mut col = &design.values * coef;
        if noise_sd > 0.0 {
            for v in col.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise_sd * z;
            }
        }
        y.set_column(d, &col);
    }
    TransformerData::new(i as u32 + 1, y, design.times.clone(), reported.clone())
}

/// Min-max rescaling of a coefficient vector to `[0, 1]`; returns `(scaled, min, max)`.
pub fn rescale_unit(g: &[f64]) -> (Vec<f64>, f64, f64) {
    let a = g.iter().copied().fold(f64::INFINITY, f64::min);
    let b = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = b - a;
    let scaled = g
        .iter()
        .map(|v| if width > 0.0 { (v - a) / width } else { 0.0 })
        .collect();
    (scaled, a, b)
}

/// The fraud matrix of the two-class studies.
pub fn two_class_fraud() -> FraudMatrix {
    FraudMatrix::new(vec![vec![0.98, 0.02], vec![0.05, 0.95]]).expect("rows sum to one")
}

/// Builds one of the four two-class simulation cases.
///
/// Cases 1 and 2 rescale both curves to coefficients in `[0, 1]` and lift them
/// by [`RESCALED_OFFSET`], so the classes share a scale; consumer variances are
/// 0.03 and 0.06. Cases 3 and 4 keep the original scales and multiply those
/// variances by `(max - min)^2` of each class's coefficients. Odd cases use
/// balanced counts, even cases unbalanced. One day per transformer; set
/// `replicates` on the result for more.
pub fn build_case(case_id: u8, base: &BaseCurves, seed: u64) -> Result<SimScenario> {
    let (same_scale, balanced) = match case_id {
        1 => (true, true),
        2 => (true, false),
        3 => (false, true),
        4 => (false, false),
        other => {
            return Err(Error::InvalidInput(format!(
                "simulation case must be 1-4, got {other}"
            )))
        }
    };
    let basis = BasisSpec::default();
    if base.residential.len() != basis.num_basis || base.commercial.len() != basis.num_basis {
        return Err(Error::InvalidInput(format!(
            "base curves need {} coefficients each",
            basis.num_basis
        )));
    }

    let mut gammas = Vec::with_capacity(2);
    let mut sigma_gamma_sq = Vec::with_capacity(2);
    for (g, var) in [&base.residential, &base.commercial]
        .into_iter()
        .zip(BASE_CONSUMER_VARIANCE)
    {
        let (scaled, a, b) = rescale_unit(g);
        if same_scale {
            gammas.push(scaled.into_iter().map(|v| v + RESCALED_OFFSET).collect());
            sigma_gamma_sq.push(var);
        } else {
            gammas.push(g.clone());
            sigma_gamma_sq.push(var * (b - a).powi(2));
        }
    }

    let (truth, reported) = if balanced {
        (BALANCED_TRUE, BALANCED_REPORTED)
    } else {
        (UNBALANCED_TRUE, UNBALANCED_REPORTED)
    };
    let pair = |m1: u32| CountVector(vec![m1, CONSUMERS_PER_TRANSFORMER - m1]);

    let scenario = SimScenario {
        case_id: Some(case_id),
        basis,
        num_points: 96,
        replicates: 1,
        gammas,
        sigma_gamma_sq,
        sigma_sq: NOISE_VARIANCE,
        fraud: two_class_fraud(),
        true_counts: truth.iter().map(|&m| pair(m)).collect(),
        reported_counts: Some(reported.iter().map(|&r| pair(r)).collect()),
        seed,
    };
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(sgs: Vec<f64>, s2: f64) -> (ModelParams, DesignMatrix) {
        let basis = BasisSpec::new(3, 5, 0.0, 24.0).unwrap();
        let design = eval_basis(&basis, &midpoint_grid(&basis, 12)).unwrap();
        let params = ModelParams {
            basis,
            gammas: vec![vec![1.0, 2.0, 0.5, 1.5, 1.0], vec![3.0, 1.0, 2.0, 2.5, 0.5]],
            sigma_gamma_sq: sgs,
            sigma_sq: s2,
            counts: vec![CountVector(vec![4, 7])],
        };
        (params, design)
    }

    #[test]
    fn zero_variance_consumer_is_mean_curve() {
        let (params, design) = tiny_params(vec![0.0, 0.0], 1.0);
        let mut rng = stream_rng(1, 0);
        let w = simulate_consumer(&params, &design, 1, &mut rng).unwrap();
        assert_eq!(w, params.typology(&design, 1));
        assert!(simulate_consumer(&params, &design, 2, &mut rng).is_err());
    }

    #[test]
    fn consumer_mean_converges() {
        let (params, design) = tiny_params(vec![0.5, 0.2], 1.0);
        let draws = 10_000;
        let mut rng = stream_rng(2, 0);
        let n = design.nrows();
        let mut sum = DVector::zeros(n);
        let mut sumsq = DVector::zeros(n);
        for _ in 0..draws {
            let w = simulate_consumer(&params, &design, 0, &mut rng).unwrap();
            sumsq += w.component_mul(&w);
            sum += w;
        }
        let alpha = params.typology(&design, 0);
        for j in 0..n {
            let mean = sum[j] / draws as f64;
            let var = sumsq[j] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!((mean - alpha[j]).abs() < 4.0 * se, "point {j}");
        }
    }

    #[test]
    fn consumer_covariance_matches_basis() {
        let (params, design) = tiny_params(vec![0.5, 0.2], 1.0);
        let draws = 100_000;
        let mut rng = stream_rng(3, 0);
        let alpha = params.typology(&design, 0);
        let (s, t) = (2, 5);
        let mut acc = 0.0;
        for _ in 0..draws {
            let w = simulate_consumer(&params, &design, 0, &mut rng).unwrap();
            acc += (w[s] - alpha[s]) * (w[t] - alpha[t]);
        }
        let cov = acc / draws as f64;
        let phi = &design.values;
        let expected = 0.5 * phi.row(s).dot(&phi.row(t));
        // product of two normals with variances <= 0.5: sd of each term below 0.5*sqrt(2)
        assert!((cov - expected).abs() < 4.0 * 0.5 * 2f64.sqrt() / (draws as f64).sqrt());
    }

    #[test]
    fn noiseless_aggregate_is_weighted_sum() {
        let (params, design) = tiny_params(vec![0.0, 0.0], 0.0);
        let mut rng = stream_rng(4, 0);
        let d = simulate_transformer(&params, &design, 0, 3, &CountVector(vec![5, 6]), &mut rng).unwrap();
        let expected = params.typology(&design, 0) * 4.0 + params.typology(&design, 1) * 7.0;
        for day in 0..3 {
            for j in 0..design.nrows() {
                assert!((d.y[(j, day)] - expected[j]).abs() < 1e-12);
            }
        }
        assert_eq!(d.num_consumers(), 11);
    }

    #[test]
    fn aggregate_moments_match_closed_form() {
        let (params, design) = tiny_params(vec![0.3, 0.1], 2.0);
        let sims = 20_000;
        let mut rng = stream_rng(5, 0);
        let n = design.nrows();
        let mut ys = Vec::with_capacity(sims);
        for _ in 0..sims {
            let d = simulate_transformer(&params, &design, 0, 1, &CountVector(vec![4, 7]), &mut rng).unwrap();
            ys.push(d.y.column(0).into_owned());
        }
        let mean = ys.iter().fold(DVector::zeros(n), |a, y| a + y) / sims as f64;
        let mu = &design.values * params.mean_coefficients(&params.counts[0]);
        let pooled = 4.0 * 0.3 + 7.0 * 0.1;
        let cov_true = (&design.values * design.values.transpose()) * pooled
            + DMatrix::identity(n, n) * 2.0;
        for j in 0..n {
            let se = (cov_true[(j, j)] / sims as f64).sqrt();
            assert!((mean[j] - mu[j]).abs() < 4.0 * se);
        }
        for (s, t) in [(0, 0), (3, 4), (6, 6), (2, 9)] {
            let c: f64 = ys
                .iter()
                .map(|y| (y[s] - mean[s]) * (y[t] - mean[t]))
                .sum::<f64>()
                / (sims - 1) as f64;
            let se = ((cov_true[(s, s)] * cov_true[(t, t)] + cov_true[(s, t)].powi(2))
                / sims as f64)
                .sqrt();
            assert!((c - cov_true[(s, t)]).abs() < 4.0 * se, "cov({s},{t})={c}");
        }
    }

    #[test]
    fn case_counts_follow_design() {
        let c1 = build_case(1, &BaseCurves::stand_in(), 0).unwrap();
        let m1: Vec<u32> = c1.true_counts.iter().map(|m| m[0]).collect();
        assert_eq!(m1, vec![45, 29, 61, 24, 12]);
        assert_eq!(m1.iter().sum::<u32>(), 171);
        assert!(c1.true_counts.iter().all(|m| m.total() == 75));
        for case in [2, 4] {
            let s = build_case(case, &BaseCurves::stand_in(), 0).unwrap();
            let m1: Vec<u32> = s.true_counts.iter().map(|m| m[0]).collect();
            assert_eq!(m1, vec![66, 65, 69, 62, 72]);
            assert_eq!(m1.iter().sum::<u32>(), 334);
        }
        assert!(build_case(5, &BaseCurves::stand_in(), 0).is_err());
        assert!(build_case(0, &BaseCurves::stand_in(), 0).is_err());
    }

    #[test]
    fn rescaled_cases_share_scale() {
        let s = build_case(1, &BaseCurves::stand_in(), 0).unwrap();
        for g in &s.gammas {
            assert!(g.iter().all(|&v| (2.0..=3.0).contains(&v)));
            assert!(g.iter().any(|&v| v == 2.0) && g.iter().any(|&v| v == 3.0));
        }
        assert_eq!(s.sigma_gamma_sq, vec![0.03, 0.06]);
        let s3 = build_case(3, &BaseCurves::stand_in(), 0).unwrap();
        let base = BaseCurves::stand_in();
        assert_eq!(s3.gammas[0], base.residential);
        let w1: f64 = 1.05 - 0.22;
        assert!((s3.sigma_gamma_sq[0] - 0.03 * w1 * w1).abs() < 1e-15);
    }

    #[test]
    fn datasets_replay_and_differ() {
        let mut s = build_case(1, &BaseCurves::stand_in(), 9).unwrap();
        s.replicates = 2;
        let a = s.simulate_dataset(3).unwrap();
        let b = s.simulate_dataset(3).unwrap();
        let c = s.simulate_dataset(4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(s.simulate_many(5).unwrap()[3], a);
        assert_eq!((a[0].num_points(), a[0].days()), (96, 2));
        assert!(a.iter().all(|d| d.num_consumers() == 75));
    }

    #[test]
    fn drawn_reports_keep_totals() {
        let mut s = build_case(2, &BaseCurves::stand_in(), 17).unwrap();
        s.reported_counts = None;
        let r = s.resolved_reported().unwrap();
        assert_eq!(r, s.resolved_reported().unwrap());
        for (ri, mi) in r.iter().zip(&s.true_counts) {
            assert_eq!(ri.total(), mi.total());
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = build_case(3, &BaseCurves::stand_in(), 5).unwrap();
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: SimScenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
