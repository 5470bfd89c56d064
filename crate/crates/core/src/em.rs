//! EM correction for misclassified cluster-level drop-out.
//!
//! A group whose outcomes are all missing either dropped out (`C = 0`) or
//! stayed in with every individual missing. The true indicator is treated as
//! latent; the E-step gives its posterior and the M-step splits into two
//! weighted logistic fits.

use crate::data::{ClusteredDataset, MissingnessSummary};
use crate::error::{Error, Result};
use crate::formula::{build_design_matrix, DesignMatrix, Formula};
use crate::propensity::{fit_logistic_with, logistic_loglik, softplus, LogisticOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    /// Posterior probability that each group truly stayed in the study.
    pub cluster_posteriors: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { tol: 1e-6, max_iter: 500 }
    }
}

/// Design matrices for the group-level (`z`) and unit-level (`x`) models.
#[derive(Debug, Clone)]
pub struct EmDesign {
    pub z: DesignMatrix,
    pub x: DesignMatrix,
}

impl EmDesign {
    pub fn new(ds: &ClusteredDataset, gamma_formula: &Formula, eta_formula: &Formula) -> Result<Self> {
        let gf = gamma_formula.clone().with_level(ds.group_level());
        Ok(EmDesign { z: build_design_matrix(&gf, ds)?, x: build_design_matrix(eta_formula, ds)? })
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Sum over each group's units of `log(1 - phi)`.
fn group_log_all_missing(eta_lin: &[f64], ds: &ClusteredDataset) -> Vec<f64> {
    let mut out = vec![0.0; ds.n_groups()];
    for (u, &e) in eta_lin.iter().enumerate() {
        out[ds.unit_group()[u]] -= softplus(e);
    }
    out
}

pub fn estep_cluster_weights(
    gamma: &[f64],
    eta: &[f64],
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> Vec<f64> {
    let zl = design.z.mul_vec(gamma);
    let xl = design.x.mul_vec(eta);
    let log_none = group_log_all_missing(&xl, ds);
    zl.iter()
        .enumerate()
        .map(|(g, &z)| {
            if ms.c_obs[g] == 1 {
                return 1.0;
            }
            let log_stay = -softplus(-z) + log_none[g];
            let log_drop = -softplus(z);
            (log_stay - log_add_exp(log_drop, log_stay)).exp()
        })
        .collect()
}

/// Unit weights of the eta fit: 1 in observed groups, the posterior elsewhere.
fn unit_weights(w: &[f64], ds: &ClusteredDataset, ms: &MissingnessSummary) -> Vec<f64> {
    ds.unit_group()
        .iter()
        .map(|&g| if ms.c_obs[g] == 1 { 1.0 } else { w[g] })
        .collect()
}

fn r_as_f64(ms: &MissingnessSummary) -> Vec<f64> {
    ms.r.iter().map(|&r| r as f64).collect()
}

/// Expected complete-data log-likelihood at `(gamma, eta)` under posteriors `w`.
pub fn q_function(
    gamma: &[f64],
    eta: &[f64],
    w: &[f64],
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> f64 {
    let uw = unit_weights(w, ds, ms);
    logistic_loglik(&design.z, w, None, gamma) + logistic_loglik(&design.x, &r_as_f64(ms), Some(&uw), eta)
}

pub fn mstep(
    w: &[f64],
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> Result<(Vec<f64>, Vec<f64>)> {
    mstep_from(w, design, ds, ms, None)
}

fn mstep_from(
    w: &[f64],
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
    start: Option<(&[f64], &[f64])>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let opts = |s: Option<&[f64]>| LogisticOptions { start: s.map(<[f64]>::to_vec), ..Default::default() };
    let gamma = fit_logistic_with(&design.z, w, None, &opts(start.map(|s| s.0)))?;
    let uw = unit_weights(w, ds, ms);
    let eta = fit_logistic_with(&design.x, &r_as_f64(ms), Some(&uw), &opts(start.map(|s| s.1)))?;
    Ok((gamma.coefficients, eta.coefficients))
}

/// Fits on the observed indicator, ignoring misclassification.
pub fn naive_fits(design: &EmDesign, ds: &ClusteredDataset, ms: &MissingnessSummary) -> Result<(Vec<f64>, Vec<f64>)> {
    let w: Vec<f64> = ms.c_obs.iter().map(|&c| c as f64).collect();
    mstep(&w, design, ds, ms)
}

pub fn observed_loglik(
    gamma: &[f64],
    eta: &[f64],
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> f64 {
    let zl = design.z.mul_vec(gamma);
    let xl = design.x.mul_vec(eta);
    let mut ll = 0.0;
    let mut group_r = vec![0.0; ds.n_groups()];
    for (u, &e) in xl.iter().enumerate() {
        group_r[ds.unit_group()[u]] += ms.r[u] as f64 * e - softplus(e);
    }
    for (g, &z) in zl.iter().enumerate() {
        ll += if ms.c_obs[g] == 1 {
            -softplus(-z) + group_r[g]
        } else {
            // every unit has R = 0 here, so group_r is the log of prod(1 - phi)
            log_add_exp(-softplus(z), -softplus(-z) + group_r[g])
        };
    }
    ll
}

pub fn run_em(
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
    gamma_formula: &Formula,
    eta_formula: &Formula,
    opts: EmOptions,
) -> Result<EmFit> {
    let design = EmDesign::new(ds, gamma_formula, eta_formula)?;
    run_em_design(&design, ds, ms, opts)
}

pub fn run_em_design(
    design: &EmDesign,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
    opts: EmOptions,
) -> Result<EmFit> {
    let (mut gamma, mut eta) = naive_fits(design, ds, ms)?;
    let mut trace = vec![observed_loglik(&gamma, &eta, design, ds, ms)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let w = estep_cluster_weights(&gamma, &eta, design, ds, ms);
        let (g1, e1) = mstep_from(&w, design, ds, ms, Some((&gamma, &eta)))?;
        let dq = q_function(&g1, &e1, &w, design, ds, ms) - q_function(&gamma, &eta, &w, design, ds, ms);
        let dtheta = gamma
            .iter()
            .zip(&g1)
            .chain(eta.iter().zip(&e1))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        gamma = g1;
        eta = e1;
        trace.push(observed_loglik(&gamma, &eta, design, ds, ms));
        if dq * dq <= opts.tol && dtheta < opts.tol {
            converged = true;
            break;
        }
    }
    let fit = EmFit {
        cluster_posteriors: estep_cluster_weights(&gamma, &eta, design, ds, ms),
        gamma,
        eta,
        loglik_trace: trace,
        converged,
        iterations,
    };
    if converged {
        Ok(fit)
    } else {
        Err(Error::EmNotConverged(Box::new(fit)))
    }
}
