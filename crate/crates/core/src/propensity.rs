//! Logistic propensity-score models.

use nalgebra::{DMatrix, DVector};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::formula::{DesignMatrix, Formula};

pub const PROB_FLOOR: f64 = 1e-10;
pub const SEPARATION_BOUND: f64 = 30.0;

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone)]
pub struct LogisticOptions {
    pub tol_score: f64,
    pub max_iter: usize,
    pub start: Option<Vec<f64>>,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { tol_score: 1e-8, max_iter: 100, start: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

/// Weighted Bernoulli log-likelihood `sum w [y eta - log(1 + e^eta)]`.
pub fn logistic_loglik(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>, beta: &[f64]) -> f64 {
    let eta = x.mul_vec(beta);
    eta.iter()
        .enumerate()
        .map(|(i, &e)| w.map_or(1.0, |w| w[i]) * (y[i] * e - softplus(e)))
        .sum()
}

pub fn fit_logistic(x: &DesignMatrix, y: &[f64], w: Option<&[f64]>) -> Result<LogisticFit> {
    fit_logistic_with(x, y, w, &LogisticOptions::default())
}

/// Newton-Raphson with step halving.
pub fn fit_logistic_with(
    x: &DesignMatrix,
    y: &[f64],
    w: Option<&[f64]>,
    opts: &LogisticOptions,
) -> Result<LogisticFit> {
    let (n, p) = (x.nrows, x.ncols);
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: y.len() });
    }
    if let Some(w) = w {
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: w.len() });
        }
    }
    let mut beta = match &opts.start {
        Some(s) if s.len() == p => s.clone(),
        _ => vec![0.0; p],
    };
    let mut ll = logistic_loglik(x, y, w, &beta);
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    for iter in 0..=opts.max_iter {
        score.iter_mut().for_each(|s| *s = 0.0);
        info.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..n {
            let wi = w.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                continue;
            }
            let row = x.row(i);
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = expit(eta);
            let r = wi * (y[i] - mu);
            let v = wi * mu * (1.0 - mu);
            for a in 0..p {
                score[a] += r * row[a];
                let va = v * row[a];
                for b in a..p {
                    info[a * p + b] += va * row[b];
                }
            }
        }
        let max_score = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max_score < opts.tol_score {
            return Ok(LogisticFit { coefficients: beta, converged: true, iterations: iter, loglik: ll });
        }
        if iter == opts.max_iter {
            break;
        }
        let h = DMatrix::from_fn(p, p, |a, b| if a <= b { info[a * p + b] } else { info[b * p + a] });
        let chol = h.cholesky().ok_or(Error::SingularInformation)?;
        let step = chol.solve(&DVector::from_column_slice(&score));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cll = logistic_loglik(x, y, w, &cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NotConverged { what: "logistic fit (line search)", iterations: iter });
        }
        let big = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if big > SEPARATION_BOUND {
            return Err(Error::Separation(big));
        }
    }
    Err(Error::NotConverged { what: "logistic fit", iterations: opts.max_iter })
}

/// Clamped fitted probabilities.
pub fn evaluate_ps(fit: &PropensityFit, x: &DesignMatrix) -> Result<Vec<f64>> {
    evaluate_coefficients(&fit.coefficients, x)
}

pub fn evaluate_coefficients(coefficients: &[f64], x: &DesignMatrix) -> Result<Vec<f64>> {
    if coefficients.len() != x.ncols {
        return Err(Error::DimensionMismatch { expected: x.ncols, found: coefficients.len() });
    }
    Ok(x.mul_vec(coefficients).into_iter().map(|e| clamp_prob(expit(e))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub formula: Formula,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
}

impl PropensityFit {
    pub fn new(formula: Formula, fit: LogisticFit) -> Self {
        PropensityFit {
            formula,
            coefficients: fit.coefficients,
            converged: fit.converged,
            iterations: fit.iterations,
            loglik: fit.loglik,
        }
    }
}

/// The candidate sets: `individual_models` evaluate per unit, `cluster_models`
/// per group (cluster or subcluster).
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModelSet {
    pub individual_models: Vec<PropensityFit>,
    pub cluster_models: Vec<PropensityFit>,
}

impl PropensityModelSet {
    /// `(phi[k][unit], lambda[l][group])`.
    pub fn evaluate(&self, ds: &ClusteredDataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let eval = |f: &PropensityFit| {
            let x = crate::formula::build_design_matrix(&f.formula, ds)?;
            evaluate_ps(f, &x)
        };
        let phi = self.individual_models.iter().map(eval).collect::<Result<Vec<_>>>()?;
        let lambda = self.cluster_models.iter().map(eval).collect::<Result<Vec<_>>>()?;
        Ok((phi, lambda))
    }
}

/// Moment targets `chi[k][l]`, averaged over every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiTable {
    pub k: usize,
    pub l: usize,
    /// Row-major over `(k, l)`.
    pub values: Vec<f64>,
}

impl ChiTable {
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.l + l]
    }
}

pub fn chi_table(set: &PropensityModelSet, ds: &ClusteredDataset) -> Result<ChiTable> {
    let (phi, lambda) = set.evaluate(ds)?;
    Ok(chi_from_probs(&phi, &lambda, ds.unit_group()))
}

/// `phi[k]` per unit, `lambda[l]` per group, `unit_group` maps units to groups.
pub fn chi_from_probs(phi: &[Vec<f64>], lambda: &[Vec<f64>], unit_group: &[usize]) -> ChiTable {
    let n = unit_group.len() as f64;
    let mut values = Vec::with_capacity(phi.len() * lambda.len());
    for ph in phi {
        for la in lambda {
            let s: f64 = ph.iter().zip(unit_group).map(|(p, &g)| p * la[g]).sum();
            values.push(s / n);
        }
    }
    ChiTable { k: phi.len(), l: lambda.len(), values }
}
