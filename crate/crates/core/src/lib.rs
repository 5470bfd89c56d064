//! Marginal treatment-effect estimation for cluster-randomized trials whose
//! outcomes go missing at both the cluster and the individual level.
//!
//! The pipeline is: load or simulate a [`ClusteredDataset`], derive the
//! missingness indicators, fit logistic propensity models (optionally through
//! the EM correction for misclassified cluster drop-out), turn them into GEE
//! weights (IPW, MIPW or empirical-likelihood multiply-robust weights), solve
//! the weighted GEE and bootstrap whole clusters for inference.

pub mod data;
pub mod em;
pub mod error;
pub mod estimate;
pub mod formula;
pub mod gee;
pub mod inference;
pub mod mr;
pub mod propensity;
pub mod rng;
pub mod simulate;

pub use data::{ClusteredDataset, Levels, MissingnessSummary, UnitRecord};
pub use error::{Error, ErrorKind, Result};
pub use estimate::{fit_marginal, FitConfig, FitOutput, Method};
pub use formula::{DesignMatrix, Formula, FormulaLevel, Term};
pub use gee::{CorrStructure, FitResult, Link, WorkingCorrelation};
pub use inference::{cluster_bootstrap, BootstrapResult};
