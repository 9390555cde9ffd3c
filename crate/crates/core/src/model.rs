//! Model parameters and observed transformer data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, DesignMatrix};
use crate::counts::CountVector;
use crate::error::{Error, Result};

/// Everything the likelihood depends on.
///
/// Row `c` of `gammas` holds the spline coefficients of the class-`c` mean
/// curve. Consumer-level coefficients scatter around it with covariance
/// `sigma_gamma_sq[c] * I`, and `sigma_sq` is the measurement-noise variance
/// of each aggregate reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub basis: BasisSpec,
    pub gammas: Vec<Vec<f64>>,
    pub sigma_gamma_sq: Vec<f64>,
    pub sigma_sq: f64,
    pub counts: Vec<CountVector>,
}

impl ModelParams {
    pub fn classes(&self) -> usize {
        self.gammas.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        let c = self.classes();
        if c == 0 {
            return Err(Error::InvalidInput("model has no classes".into()));
        }
        if let Some(row) = self.gammas.iter().find(|g| g.len() != self.basis.num_basis) {
            return Err(Error::InvalidInput(format!(
                "coefficient vector has {} entries, basis has {}",
                row.len(),
                self.basis.num_basis
            )));
        }
        if self.sigma_gamma_sq.len() != c {
            return Err(Error::InvalidInput(format!(
                "{} consumer variances for {c} classes",
                self.sigma_gamma_sq.len()
            )));
        }
        if self.sigma_gamma_sq.iter().any(|v| !(*v >= 0.0)) || !(self.sigma_sq >= 0.0) {
            return Err(Error::InvalidInput("variances must be nonnegative".into()));
        }
        if let Some(m) = self.counts.iter().find(|m| m.classes() != c) {
            return Err(Error::InvalidInput(format!(
                "count vector {m} does not have {c} classes"
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, class: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.gammas[class])
    }

    /// Coefficients of the expected aggregate, `sum_c m_c gamma^c`.
    pub fn mean_coefficients(&self, m: &CountVector) -> DVector<f64> {
        let mut mu = DVector::zeros(self.basis.num_basis);
        for (g, &mc) in self.gammas.iter().zip(m.as_slice()) {
            for (acc, v) in mu.iter_mut().zip(g) {
                *acc += mc as f64 * v;
            }
        }
        mu
    }

    /// `sum_c m_c sigma_gamma_sq[c]`, the multiplier of `Psi Psi'` in the aggregate covariance.
    pub fn pooled_consumer_variance(&self, m: &CountVector) -> f64 {
        pooled_variance(&self.sigma_gamma_sq, m)
    }

    /// Class mean curve on the rows of `design`.
    pub fn typology(&self, design: &DesignMatrix, class: usize) -> DVector<f64> {
        &design.values * self.gamma(class)
    }
}

pub(crate) fn pooled_variance(sigma_gamma_sq: &[f64], m: &CountVector) -> f64 {
    sigma_gamma_sq
        .iter()
        .zip(m.as_slice())
        .map(|(s, &mc)| s * mc as f64)
        .sum()
}

/// Aggregate readings of one transformer: column `d` of `y` is day `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerData {
    pub transformer_id: u32,
    pub y: DMatrix<f64>,
    pub times: Vec<f64>,
    pub reported: CountVector,
}

impl TransformerData {
    pub fn new(transformer_id: u32, y: DMatrix<f64>, times: Vec<f64>, reported: CountVector) -> Result<Self> {
        let data = Self {
            transformer_id,
            y,
            times,
            reported,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.nrows() == 0 || self.y.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "transformer {} has no observations",
                self.transformer_id
            )));
        }
        if self.y.nrows() != self.times.len() {
            return Err(Error::InvalidInput(format!(
                "transformer {}: {} readings per day but {} times",
                self.transformer_id,
                self.y.nrows(),
                self.times.len()
            )));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.y.nrows()
    }

    pub fn days(&self) -> usize {
        self.y.ncols()
    }

    pub fn num_consumers(&self) -> u64 {
        self.reported.total()
    }
}

/// Checks that a data set is non-empty and shares one grid and class count.
pub fn check_consistent(data: &[TransformerData]) -> Result<()> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidInput("no transformers".into()))?;
    for d in data {
        d.validate()?;
        if d.times != first.times {
            return Err(Error::InvalidInput(format!(
                "transformer {} uses a different time grid than transformer {}",
                d.transformer_id, first.transformer_id
            )));
        }
        if d.reported.classes() != first.reported.classes() {
            return Err(Error::InvalidInput(format!(
                "transformer {} reports {} classes, transformer {} reports {}",
                d.transformer_id,
                d.reported.classes(),
                first.transformer_id,
                first.reported.classes()
            )));
        }
    }
    Ok(())
}
