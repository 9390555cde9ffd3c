//! Misreported class counts.
//!
//! Each of the `M_c` consumers of true class `c` reports class `r` with
//! probability `F(c, r)`, so the reported vector `R` is a sum of independent
//! multinomial rows. `P{R | M}` has no closed form, but it factors as
//!
//! ```text
//! P{R = r | M = m} = prod_j (sum_c F(c,j))^r_j / prod_j r_j!  *  prod_c m_c!  *  H(m)
//! ```
//!
//! where `H(m)` is the probability that splitting each reported column `j`
//! back into true classes, multinomially with probabilities `F(c,j) / sum_l F(l,j)`,
//! yields row totals `m`. One simulation per transformer therefore tabulates
//! `H` for every candidate `m` at once.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::rng::{install, stream_rng, Rng};

/// Largest number of count tables the exact routines will enumerate.
pub const EXACT_LIMIT: f64 = 1e7;

/// Tolerance on row sums accepted when loading a fraud matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;

const RUNS_PER_CHUNK: u64 = 8192;

/// Per-class consumer counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountVector(pub Vec<u32>);

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self(counts)
    }

    pub fn zeros(classes: usize) -> Self {
        Self(vec![0; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| c as u64).sum()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn l1_distance(&self, other: &CountVector) -> u64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs())
            .sum()
    }

    /// `sum_c ln(m_c!)`.
    pub fn ln_factorial_sum(&self) -> f64 {
        self.0.iter().map(|&m| ln_factorial(m as u64)).sum()
    }
}

impl From<Vec<u32>> for CountVector {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for CountVector {
    type Output = u32;
    fn index(&self, i: usize) -> &u32 {
        &self.0[i]
    }
}

impl std::fmt::Display for CountVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Row-stochastic misreporting matrix: `get(c, r) = P{report r | true class c}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FraudMatrix {
    classes: usize,
    probs: Vec<f64>,
}

impl FraudMatrix {
    /// Validates a square matrix of probabilities; rows within [`ROW_SUM_TOL`]
    /// of 1 are renormalized exactly.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 {
            return Err(Error::InvalidInput("fraud matrix has no rows".into()));
        }
        let mut probs = Vec::with_capacity(classes * classes);
        for (c, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::InvalidInput(format!(
                    "fraud matrix row {c} has {} entries, expected {classes}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidInput(format!(
                    "fraud matrix row {c} has entry {bad} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "fraud matrix row {c} sums to {sum}, not 1"
                )));
            }
            probs.extend(row.iter().map(|p| p / sum));
        }
        Ok(Self { classes, probs })
    }

    pub fn identity(classes: usize) -> Self {
        let mut probs = vec![0.0; classes * classes];
        for c in 0..classes {
            probs[c * classes + c] = 1.0;
        }
        Self { classes, probs }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, true_class: usize, reported: usize) -> f64 {
        self.probs[true_class * self.classes + reported]
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        &self.probs[true_class * self.classes..(true_class + 1) * self.classes]
    }

    pub fn column_sum(&self, reported: usize) -> f64 {
        (0..self.classes).map(|c| self.get(c, reported)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.classes).map(<[f64]>::to_vec).collect()
    }

    /// Same matrix with classes relabeled: new class `k` is old class `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let c = self.classes;
        let mut probs = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                probs[a * c + b] = self.get(perm[a], perm[b]);
            }
        }
        Self { classes: c, probs }
    }
}

impl TryFrom<Vec<Vec<f64>>> for FraudMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<FraudMatrix> for Vec<Vec<f64>> {
    fn from(f: FraudMatrix) -> Self {
        f.rows()
    }
}

fn check_classes(f: &FraudMatrix, v: &CountVector, what: &str) -> Result<()> {
    if v.classes() != f.classes() {
        return Err(Error::InvalidInput(format!(
            "{what} has {} classes but the fraud matrix has {}",
            v.classes(),
            f.classes()
        )));
    }
    Ok(())
}

/// Probabilities that a consumer reporting class `j` truly belongs to each class,
/// `F(c,j) / sum_l F(l,j)`.
pub fn column_probs(f: &FraudMatrix, j: usize) -> Result<Vec<f64>> {
    if j >= f.classes() {
        return Err(Error::InvalidInput(format!(
            "class index {j} out of range for {} classes",
            f.classes()
        )));
    }
    let total = f.column_sum(j);
    if total <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "fraud matrix column {j} is all zero: class {j} can never be reported"
        )));
    }
    Ok((0..f.classes()).map(|c| f.get(c, j) / total).collect())
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: rand::Rng + ?Sized>(trials: u32, probs: &[f64], rng: &mut R) -> Vec<u32> {
    let mut out = vec![0u32; probs.len()];
    let mut remaining = trials as u64;
    let mut mass = 1.0f64;
    let last = probs.len().saturating_sub(1);
    for (k, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k == last {
            out[k] = remaining as u32;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let x = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q)
                .expect("binomial probability in (0,1)")
                .sample(rng)
        };
        out[k] = x as u32;
        remaining -= x;
        mass -= p;
    }
    out
}

/// Draws the reported counts of a transformer whose true counts are `m`.
pub fn sample_reported<R: rand::Rng + ?Sized>(
    f: &FraudMatrix,
    m: &CountVector,
    rng: &mut R,
) -> Result<CountVector> {
    check_classes(f, m, "true count vector")?;
    let mut reported = vec![0u32; f.classes()];
    for (c, &mc) in m.as_slice().iter().enumerate() {
        let row = sample_multinomial(mc, f.row(c), rng);
        for (r, x) in reported.iter_mut().zip(row) {
            *r += x;
        }
    }
    Ok(CountVector(reported))
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// log of the number of compositions of each total into `parts` nonnegative parts, summed.
fn ln_table_count(totals: &[u32], parts: usize) -> f64 {
    let parts = parts as u64;
    totals
        .iter()
        .map(|&t| ln_binomial(t as u64 + parts - 1, parts - 1))
        .sum()
}

fn guard_enumeration(totals: &[u32], parts: usize, what: &str) -> Result<()> {
    let ln_count = ln_table_count(totals, parts);
    if ln_count > EXACT_LIMIT.ln() {
        return Err(Error::TooLarge(format!(
            "{what} needs about {:.3e} count tables (limit {EXACT_LIMIT:.0e})",
            ln_count.exp()
        )));
    }
    Ok(())
}

/// `ln` of the multinomial pmf; `-inf` for impossible outcomes.
fn ln_multinomial_pmf(x: &[u32], probs: &[f64]) -> f64 {
    let n: u64 = x.iter().map(|&v| v as u64).sum();
    let mut acc = ln_factorial(n);
    for (&xi, &p) in x.iter().zip(probs) {
        if xi == 0 {
            continue;
        }
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += xi as f64 * p.ln() - ln_factorial(xi as u64);
    }
    acc
}

/// Visits every composition of `total` into `parts.len()` parts, each part
/// bounded by the matching entry of `caps`.
fn for_each_composition(total: u32, caps: &[u32], parts: &mut Vec<u32>, visit: &mut dyn FnMut(&[u32])) {
    let k = parts.len();
    if caps.len() == k {
        if total == 0 {
            visit(parts);
        }
        return;
    }
    if caps.len() == k + 1 {
        if total <= caps[k] {
            parts.push(total);
            visit(parts);
            parts.pop();
        }
        return;
    }
    for x in 0..=total.min(caps[k]) {
        parts.push(x);
        for_each_composition(total - x, caps, parts, visit);
        parts.pop();
    }
}

/// `P{R = r | M = m}` by summing over every table with row sums `m` and column sums `r`.
pub fn exact_report_prob(f: &FraudMatrix, m: &CountVector, r: &CountVector) -> Result<f64> {
    check_classes(f, m, "true count vector")?;
    check_classes(f, r, "reported count vector")?;
    if m.total() != r.total() {
        return Err(Error::InvalidInput(format!(
            "true total {} differs from reported total {}",
            m.total(),
            r.total()
        )));
    }
    guard_enumeration(m.as_slice(), f.classes(), "exact report probability")?;

    fn rows(
        f: &FraudMatrix,
        m: &[u32],
        c: usize,
        remaining: &mut Vec<u32>,
        ln_acc: f64,
        sum: &mut f64,
    ) {
        if c == m.len() {
            if remaining.iter().all(|&v| v == 0) {
                *sum += ln_acc.exp();
            }
            return;
        }
        let caps = remaining.clone();
        let mut parts = Vec::with_capacity(caps.len());
        for_each_composition(m[c], &caps, &mut parts, &mut |row| {
            let lp = ln_multinomial_pmf(row, f.row(c));
            if lp == f64::NEG_INFINITY {
                return;
            }
            for (rem, &x) in remaining.iter_mut().zip(row) {
                *rem -= x;
            }
            rows(f, m, c + 1, remaining, ln_acc + lp, sum);
            for (rem, &x) in remaining.iter_mut().zip(row) {
                *rem += x;
            }
        });
    }

    let mut remaining = r.0.clone();
    let mut sum = 0.0;
    rows(f, m.as_slice(), 0, &mut remaining, 0.0, &mut sum);
    Ok(sum)
}

/// How an [`HTable`] was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HProvenance {
    /// Monte Carlo runs; `None` for an exact table.
    pub num_runs: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Cells {
    /// Hit counts out of `runs` simulated redistributions.
    Hits { runs: u64, seed: u64, hits: BTreeMap<CountVector, u64> },
    Exact(BTreeMap<CountVector, f64>),
}

/// `H(m)` for every reachable true-count vector `m` of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct HTable {
    reported: CountVector,
    cells: Cells,
}

impl HTable {
    pub fn reported(&self) -> &CountVector {
        &self.reported
    }

    pub fn provenance(&self) -> HProvenance {
        match &self.cells {
            Cells::Hits { runs, seed, .. } => HProvenance {
                num_runs: Some(*runs),
                seed: Some(*seed),
            },
            Cells::Exact(_) => HProvenance {
                num_runs: None,
                seed: None,
            },
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.cells, Cells::Exact(_))
    }

    /// `H(m)`, zero outside the table.
    pub fn h(&self, m: &CountVector) -> f64 {
        match &self.cells {
            Cells::Hits { runs, hits, .. } => {
                hits.get(m).map_or(0.0, |&k| k as f64 / *runs as f64)
            }
            Cells::Exact(p) => p.get(m).copied().unwrap_or(0.0),
        }
    }

    /// Hit count behind `H(m)` for simulated tables.
    pub fn hits(&self, m: &CountVector) -> Option<u64> {
        match &self.cells {
            Cells::Hits { hits, .. } => Some(hits.get(m).copied().unwrap_or(0)),
            Cells::Exact(_) => None,
        }
    }

    /// Cells in ascending count-vector order.
    pub fn entries(&self) -> Vec<(CountVector, f64)> {
        match &self.cells {
            Cells::Hits { runs, hits, .. } => hits
                .iter()
                .map(|(m, &k)| (m.clone(), k as f64 / *runs as f64))
                .collect(),
            Cells::Exact(p) => p.iter().map(|(m, &v)| (m.clone(), v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match &self.cells {
            Cells::Hits { hits, .. } => hits.len(),
            Cells::Exact(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_mass(&self) -> f64 {
        match &self.cells {
            Cells::Hits { runs, hits, .. } => {
                hits.values().sum::<u64>() as f64 / *runs as f64
            }
            Cells::Exact(p) => p.values().sum(),
        }
    }

    pub fn to_json(&self) -> HTableJson {
        let prov = self.provenance();
        let entries = match &self.cells {
            Cells::Hits { runs, hits, .. } => hits
                .iter()
                .map(|(m, &k)| HEntryJson {
                    m: m.0.clone(),
                    h: HValueJson::Rational { num: k, den: *runs },
                })
                .collect(),
            Cells::Exact(p) => p
                .iter()
                .map(|(m, &v)| HEntryJson {
                    m: m.0.clone(),
                    h: HValueJson::Real(v),
                })
                .collect(),
        };
        HTableJson {
            reported: self.reported.0.clone(),
            num_runs: prov.num_runs,
            seed: prov.seed,
            exact: self.is_exact(),
            entries,
        }
    }

    pub fn from_json(json: HTableJson) -> Result<Self> {
        let reported = CountVector(json.reported);
        let total = reported.total();
        let mut hits = BTreeMap::new();
        let mut probs = BTreeMap::new();
        for e in json.entries {
            let m = CountVector(e.m);
            if m.classes() != reported.classes() || m.total() != total {
                return Err(Error::InvalidInput(format!(
                    "H table entry {m} is inconsistent with reported counts {reported}"
                )));
            }
            match e.h {
                HValueJson::Rational { num, den } => {
                    if Some(den) != json.num_runs {
                        return Err(Error::InvalidInput(format!(
                            "H table entry {m} has denominator {den}, expected {:?}",
                            json.num_runs
                        )));
                    }
                    hits.insert(m, num);
                }
                HValueJson::Real(v) => {
                    probs.insert(m, v);
                }
            }
        }
        let cells = if json.exact {
            Cells::Exact(probs)
        } else {
            let runs = json
                .num_runs
                .ok_or_else(|| Error::InvalidInput("simulated H table lacks num_runs".into()))?;
            if hits.values().sum::<u64>() != runs {
                return Err(Error::InvalidInput(
                    "H table hit counts do not add up to num_runs".into(),
                ));
            }
            Cells::Hits {
                runs,
                seed: json.seed.unwrap_or(0),
                hits,
            }
        };
        Ok(Self { reported, cells })
    }
}

/// Wire form of an [`HTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTableJson {
    pub reported: Vec<u32>,
    pub num_runs: Option<u64>,
    pub seed: Option<u64>,
    pub exact: bool,
    pub entries: Vec<HEntryJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HEntryJson {
    pub m: Vec<u32>,
    pub h: HValueJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HValueJson {
    Rational { num: u64, den: u64 },
    Real(f64),
}

/// Splitting probabilities for every reported class with a nonzero count.
fn split_probs(f: &FraudMatrix, r: &CountVector) -> Result<Vec<(u32, Vec<f64>)>> {
    check_classes(f, r, "reported count vector")?;
    r.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &rj)| rj > 0)
        .map(|(j, &rj)| Ok((rj, column_probs(f, j)?)))
        .collect()
}

/// Monte Carlo estimate of `H` from `runs` simulated redistributions of `r`.
///
/// Runs are processed in fixed-size chunks, chunk `k` drawing from stream `k`
/// of `seed`, so the table does not depend on the number of worker threads.
pub fn estimate_h_table(f: &FraudMatrix, r: &CountVector, runs: u64, seed: u64) -> Result<HTable> {
    if runs == 0 {
        return Err(Error::InvalidInput("H table needs at least one run".into()));
    }
    let columns = split_probs(f, r)?;
    let classes = f.classes();
    let chunks = runs.div_ceil(RUNS_PER_CHUNK);

    let simulate_chunk = |chunk: u64| -> HashMap<CountVector, u64> {
        let mut rng: Rng = stream_rng(seed, chunk);
        let start = chunk * RUNS_PER_CHUNK;
        let end = (start + RUNS_PER_CHUNK).min(runs);
        let mut local = HashMap::new();
        let mut totals = vec![0u32; classes];
        for _ in start..end {
            totals.iter_mut().for_each(|t| *t = 0);
            for (rj, probs) in &columns {
                let x = sample_multinomial(*rj, probs, &mut rng);
                for (t, v) in totals.iter_mut().zip(x) {
                    *t += v;
                }
            }
            *local.entry(CountVector(totals.clone())).or_insert(0u64) += 1;
        }
        local
    };

    let partials: Vec<HashMap<CountVector, u64>> =
        install(|| (0..chunks).into_par_iter().map(simulate_chunk).collect());

    let mut hits = BTreeMap::new();
    for part in partials {
        for (m, k) in part {
            *hits.entry(m).or_insert(0) += k;
        }
    }
    Ok(HTable {
        reported: r.clone(),
        cells: Cells::Hits { runs, seed, hits },
    })
}

/// `H` computed exactly by convolving the column redistributions.
pub fn exact_h(f: &FraudMatrix, r: &CountVector) -> Result<HTable> {
    check_classes(f, r, "reported count vector")?;
    guard_enumeration(r.as_slice(), f.classes(), "exact H")?;
    let columns = split_probs(f, r)?;
    let classes = f.classes();

    let mut dist: BTreeMap<CountVector, f64> = BTreeMap::new();
    dist.insert(CountVector::zeros(classes), 1.0);
    for (rj, probs) in &columns {
        let mut column = Vec::new();
        let caps = vec![*rj; classes];
        let mut parts = Vec::with_capacity(classes);
        for_each_composition(*rj, &caps, &mut parts, &mut |x| {
            let lp = ln_multinomial_pmf(x, probs);
            if lp > f64::NEG_INFINITY {
                column.push((x.to_vec(), lp.exp()));
            }
        });
        let mut next = BTreeMap::new();
        for (m, &pm) in &dist {
            for (x, px) in &column {
                let key = CountVector(m.0.iter().zip(x).map(|(a, b)| a + b).collect());
                *next.entry(key).or_insert(0.0) += pm * px;
            }
        }
        dist = next;
    }
    dist.retain(|_, p| *p > 0.0);
    Ok(HTable {
        reported: r.clone(),
        cells: Cells::Exact(dist),
    })
}

/// Nearest small-denominator rational to `x`, so decimal inputs such as
/// `0.98` become `49/50`; falls back to the exact binary value.
pub fn rationalize(x: f64) -> BigRational {
    let tol = 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE);
    let (mut h0, mut h1) = (0i128, 1i128);
    let (mut k0, mut k1) = (1i128, 0i128);
    let mut y = x;
    for _ in 0..64 {
        let a = y.floor();
        if a.abs() > 1e15 {
            break;
        }
        let ai = a as i128;
        let (h2, k2) = (ai * h1 + h0, ai * k1 + k0);
        if k2 > 1_000_000_000_000 {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if (h1 as f64 / k1 as f64 - x).abs() <= tol {
            return BigRational::new(BigInt::from(h1), BigInt::from(k1));
        }
        let frac = y - a;
        if frac == 0.0 {
            break;
        }
        y = 1.0 / frac;
    }
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

fn big_factorial(n: u32) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, k| acc * BigInt::from(k))
}

/// `H` as exact rationals, with each fraud-matrix entry first read back as
/// a small-denominator fraction (see [`rationalize`]). Sorted by count vector.
pub fn exact_h_rational(f: &FraudMatrix, r: &CountVector) -> Result<Vec<(CountVector, BigRational)>> {
    check_classes(f, r, "reported count vector")?;
    guard_enumeration(r.as_slice(), f.classes(), "exact H")?;
    let classes = f.classes();
    let entries: Vec<Vec<BigRational>> = (0..classes)
        .map(|c| (0..classes).map(|j| rationalize(f.get(c, j))).collect())
        .collect();

    let mut dist: BTreeMap<CountVector, BigRational> = BTreeMap::new();
    dist.insert(CountVector::zeros(classes), BigRational::one());
    for (j, &rj) in r.as_slice().iter().enumerate() {
        if rj == 0 {
            continue;
        }
        let col_sum = (0..classes).fold(BigRational::zero(), |acc, c| acc + &entries[c][j]);
        if col_sum.is_zero() {
            return Err(Error::InvalidInput(format!(
                "reported class {} is unreachable: its fraud matrix column is zero",
                j + 1
            )));
        }
        let probs: Vec<BigRational> = (0..classes).map(|c| &entries[c][j] / &col_sum).collect();
        let mut column = Vec::new();
        let caps = vec![rj; classes];
        let mut parts = Vec::with_capacity(classes);
        for_each_composition(rj, &caps, &mut parts, &mut |x| {
            let mut p = BigRational::from_integer(big_factorial(rj));
            for (&xc, pc) in x.iter().zip(&probs) {
                p = p / BigRational::from_integer(big_factorial(xc)) * pc.pow(xc as i32);
            }
            if !p.is_zero() {
                column.push((x.to_vec(), p));
            }
        });
        let mut next: BTreeMap<CountVector, BigRational> = BTreeMap::new();
        for (m, pm) in &dist {
            for (x, px) in &column {
                let key = CountVector(m.0.iter().zip(x).map(|(a, b)| a + b).collect());
                let entry = next.entry(key).or_insert_with(BigRational::zero);
                *entry = &*entry + pm * px;
            }
        }
        dist = next;
    }
    Ok(dist.into_iter().collect())
}

/// `ln` of the `m`-free factor `prod_j (sum_c F(c,j))^r_j / prod_j r_j!`.
pub fn ln_report_factor(f: &FraudMatrix, r: &CountVector) -> f64 {
    r.as_slice()
        .iter()
        .enumerate()
        .map(|(j, &rj)| {
            if rj == 0 {
                0.0
            } else {
                rj as f64 * f.column_sum(j).ln() - ln_factorial(rj as u64)
            }
        })
        .sum()
}

/// `ln P{R = r | M = m}` from `H(m)`; `-inf` when `H(m) = 0`.
pub fn ln_report_prob_from_h(f: &FraudMatrix, m: &CountVector, r: &CountVector, h: f64) -> f64 {
    if h <= 0.0 {
        return f64::NEG_INFINITY;
    }
    ln_report_factor(f, r) + m.ln_factorial_sum() + h.ln()
}

/// `P{R = r | M = m}` from `H(m)`, assembled in log space.
pub fn report_prob_from_h(f: &FraudMatrix, m: &CountVector, r: &CountVector, h: f64) -> f64 {
    ln_report_prob_from_h(f, m, r, h).exp()
}

/// Candidate true-count vectors: the support of `H`, most probable first,
/// ties in ascending lexicographic order.
pub fn candidate_counts(table: &HTable) -> Result<Vec<CountVector>> {
    let mut cells: Vec<(CountVector, f64)> =
        table.entries().into_iter().filter(|(_, h)| *h > 0.0).collect();
    if cells.is_empty() {
        return Err(Error::InvalidInput(format!(
            "H table for reported counts {} is empty",
            table.reported
        )));
    }
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(cells.into_iter().map(|(m, _)| m).collect())
}

/// Uniformly random row-stochastic matrix, used by the property tests and examples.
pub fn random_fraud_matrix<R: rand::Rng + ?Sized>(classes: usize, rng: &mut R) -> FraudMatrix {
    let rows = (0..classes)
        .map(|_| {
            let w: Vec<f64> = (0..classes).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    FraudMatrix::new(rows).expect("normalized rows")
}
