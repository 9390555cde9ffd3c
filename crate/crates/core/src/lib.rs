//! Estimating consumer load typologies from aggregated transformer readings
//! when the per-class consumer counts are misreported.
//!
//! The pieces, bottom up:
//!
//! - [`basis`]: clamped B-spline bases and design matrices.
//! - [`counts`]: count vectors, fraud matrices and the H table of true counts
//!   compatible with a report.
//! - [`sim`]: simulation of consumers, transformers and whole scenarios.
//! - [`likelihood`]: Gaussian and count log-likelihood terms.
//! - [`fit`]: block coordinate ascent for all parameters.
//! - [`cli`] and [`report`]: the `aggload` command line tool.

pub mod basis;
pub mod cli;
pub mod counts;
pub mod data_io;
pub mod error;
pub mod fit;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sim;

pub use basis::{eval_basis, midpoint_grid, BasisSpec, DesignMatrix};
pub use counts::{estimate_h_table, exact_h, CountVector, FraudMatrix, HTable};
pub use error::{Error, Result};
pub use fit::{fit, fit_from, FitConfig, FitResult, FitStatus};
pub use likelihood::{lstar, total_loglik, Score, Workspace};
pub use model::{ModelParams, TransformerData};
pub use sim::{build_case, BaseCurves, SimScenario};
