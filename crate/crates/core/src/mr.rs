//! Empirical-likelihood multiply-robust weights.
//!
//! Observed units receive weights `w = 1 / (n (1 + rho' g))` where `g` stacks
//! `phi^k lambda^l - chi^{kl}` over every candidate model pair and `rho`
//! minimizes `-sum log(1 + rho' g)`.

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusteredDataset, MissingnessSummary};
use crate::error::{Error, Result};
use crate::propensity::{chi_from_probs, ChiTable, PropensityModelSet};

const DENOM_FLOOR: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-9;
const MAX_NEWTON: usize = 200;
const RANK_TOL: f64 = 1e-10;
const POLISH_STEPS: usize = 3;

/// Constraint rows for the observed units.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintVectors {
    /// Row-major, one row of length `kl` per observed unit.
    pub g: Vec<f64>,
    pub kl: usize,
    pub chi: ChiTable,
    /// Dataset index of each observed unit.
    pub units: Vec<usize>,
    /// `phi^1 lambda^1` for each observed unit.
    pub phi1lambda1: Vec<f64>,
}

impl ConstraintVectors {
    pub fn n(&self) -> usize {
        self.units.len()
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.g[i * self.kl..(i + 1) * self.kl]
    }
}

pub fn build_g(
    set: &PropensityModelSet,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> Result<ConstraintVectors> {
    let (phi, lambda) = set.evaluate(ds)?;
    let chi = chi_from_probs(&phi, &lambda, ds.unit_group());
    Ok(build_g_from_probs(&phi, &lambda, chi, ds.unit_group(), ms))
}

/// `chi` must come from the same probabilities averaged over all units.
pub fn build_g_from_probs(
    phi: &[Vec<f64>],
    lambda: &[Vec<f64>],
    chi: ChiTable,
    unit_group: &[usize],
    ms: &MissingnessSummary,
) -> ConstraintVectors {
    let kl = phi.len() * lambda.len();
    let units: Vec<usize> = (0..unit_group.len()).filter(|&u| ms.r[u] == 1).collect();
    let mut g = Vec::with_capacity(units.len() * kl);
    for &u in &units {
        let gr = unit_group[u];
        for (k, ph) in phi.iter().enumerate() {
            for (l, la) in lambda.iter().enumerate() {
                g.push(ph[u] * la[gr] - chi.get(k, l));
            }
        }
    }
    let phi1lambda1 = units.iter().map(|&u| phi[0][u] * lambda[0][unit_group[u]]).collect();
    ConstraintVectors { g, kl, chi, units, phi1lambda1 }
}

/// Minimizer of `-sum log(1 + x' a_i)` over the rows `a_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElSolution {
    /// Full-length multiplier; dropped columns hold zero.
    pub x: Vec<f64>,
    pub dropped: Vec<usize>,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    /// Smallest `1 + x' a_i`; values near zero mean the solution hugs the boundary.
    pub min_denominator: f64,
}

/// Columns kept by a pivoted Cholesky of `A'A`.
fn independent_columns(a: &[f64], n: usize, dim: usize) -> Vec<usize> {
    let mut s = vec![0.0; dim * dim];
    for i in 0..n {
        let r = &a[i * dim..(i + 1) * dim];
        for p in 0..dim {
            for q in 0..dim {
                s[p * dim + q] += r[p] * r[q];
            }
        }
    }
    let scale = (0..dim).map(|p| s[p * dim + p]).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut diag: Vec<f64> = (0..dim).map(|p| s[p * dim + p]).collect();
    let mut l = vec![vec![0.0; dim]; dim];
    let mut kept = Vec::new();
    let mut remaining: Vec<usize> = (0..dim).collect();
    while !remaining.is_empty() {
        let (pos, &piv) = remaining
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, &usize)>, cur| match best {
                Some(b) if diag[*b.1] >= diag[*cur.1] => Some(b),
                _ => Some(cur),
            })
            .unwrap();
        if diag[piv] <= RANK_TOL * scale {
            break;
        }
        remaining.remove(pos);
        let d = diag[piv].sqrt();
        let col = kept.len();
        l[piv][col] = d;
        for &q in &remaining {
            let mut v = s[q * dim + piv];
            for c in 0..col {
                v -= l[q][c] * l[piv][c];
            }
            l[q][col] = v / d;
            diag[q] -= l[q][col] * l[q][col];
        }
        kept.push(piv);
    }
    kept.sort_unstable();
    kept
}

fn objective(a: &[f64], n: usize, dim: usize, x: &[f64]) -> Option<(f64, f64)> {
    let mut f = 0.0;
    let mut min_d = f64::INFINITY;
    for i in 0..n {
        let d = 1.0 + a[i * dim..(i + 1) * dim].iter().zip(x).map(|(g, r)| g * r).sum::<f64>();
        if d <= DENOM_FLOOR {
            return None;
        }
        min_d = min_d.min(d);
        f -= d.ln();
    }
    Some((f, min_d))
}

/// `sum_i 1 / (1 + x'a_i)`.
fn mass(a: &[f64], n: usize, dim: usize, x: &[f64]) -> f64 {
    (0..n).map(|i| 1.0 / (1.0 + a[i * dim..(i + 1) * dim].iter().zip(x).map(|(g, r)| g * r).sum::<f64>())).sum()
}

/// Newton's method with backtracking inside the feasible region.
pub fn el_solve(a: &[f64], n: usize, dim: usize) -> Result<ElSolution> {
    let kept = independent_columns(a, n, dim);
    let dropped: Vec<usize> = (0..dim).filter(|c| !kept.contains(c)).collect();
    let k = kept.len();
    if k == 0 {
        return Ok(ElSolution { x: vec![0.0; dim], dropped, iterations: 0, objective_trace: vec![0.0], min_denominator: 1.0 });
    }
    let sub: Vec<f64> = (0..n).flat_map(|i| kept.iter().map(move |&c| a[i * dim + c])).collect();
    let mut x = vec![0.0; k];
    let (mut f, mut min_d) = objective(&sub, n, k, &x).unwrap();
    let mut trace = vec![f];
    let unbounded = -(n as f64) * (1.0 / DENOM_FLOOR).ln();
    let mut iterations = 0;
    let mut converged = false;
    let mut polish = 0;
    let mut last_gmax = f64::INFINITY;
    while iterations < MAX_NEWTON {
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for i in 0..n {
            let r = &sub[i * k..(i + 1) * k];
            let d = 1.0 + r.iter().zip(&x).map(|(g, v)| g * v).sum::<f64>();
            let inv = 1.0 / d;
            for p in 0..k {
                grad[p] -= r[p] * inv;
                let hp = r[p] * inv * inv;
                for q in p..k {
                    hess[p * k + q] += hp * r[q];
                }
            }
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < GRAD_TOL {
            // At an interior solution the weights 1/(n d_i) sum to one; a
            // runaway multiplier flattens the gradient while the sum decays.
            if (mass(&sub, n, k, &x) / n as f64 - 1.0).abs() > 1e-6 {
                return Err(Error::NoInteriorSolution);
            }
            converged = true;
            // A few extra Newton steps push the moment identities to rounding level.
            if polish >= POLISH_STEPS || gmax < 1e-15 * n as f64 || gmax >= last_gmax {
                break;
            }
            polish += 1;
        }
        last_gmax = gmax;
        iterations += 1;
        let h = DMatrix::from_fn(k, k, |p, q| if p <= q { hess[p * k + q] } else { hess[q * k + p] });
        let step = match h.cholesky() {
            Some(c) => c.solve(&DVector::from_iterator(k, grad.iter().map(|g| -g))),
            None if converged => break,
            None => return Err(Error::NoInteriorSolution),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..80 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(v, s)| v + t * s).collect();
            if let Some((fc, mc)) = objective(&sub, n, k, &cand) {
                if fc <= f + 1e-13 * (1.0 + f.abs()) {
                    x = cand;
                    f = fc;
                    min_d = mc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        trace.push(f);
        if f < unbounded || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NoInteriorSolution);
        }
        if !moved {
            break;
        }
    }
    if !converged {
        let mut grad = vec![0.0; k];
        for i in 0..n {
            let r = &sub[i * k..(i + 1) * k];
            let d = 1.0 + r.iter().zip(&x).map(|(g, v)| g * v).sum::<f64>();
            for p in 0..k {
                grad[p] -= r[p] / d;
            }
        }
        if !grad.iter().all(|g| g.abs() < GRAD_TOL) {
            return Err(if min_d < 1e-6 { Error::NoInteriorSolution } else {
                Error::NotConverged { what: "empirical-likelihood multiplier", iterations }
            });
        }
    }
    let mut full = vec![0.0; dim];
    for (v, &c) in x.iter().zip(&kept) {
        full[c] = *v;
    }
    Ok(ElSolution { x: full, dropped, iterations, objective_trace: trace, min_denominator: min_d })
}

pub fn solve_rho(cv: &ConstraintVectors) -> Result<ElSolution> {
    if cv.n() == 0 {
        return Err(Error::NoInteriorSolution);
    }
    el_solve(&cv.g, cv.n(), cv.kl)
}

/// `w_i = 1 / ((1 + rho' g_i) n)`.
pub fn mr_weights(rho: &[f64], cv: &ConstraintVectors) -> Vec<f64> {
    let n = cv.n() as f64;
    (0..cv.n())
        .map(|i| 1.0 / ((1.0 + cv.row(i).iter().zip(rho).map(|(g, r)| g * r).sum::<f64>()) * n))
        .collect()
}

/// Dual empirical probabilities `p` and multiplier `eps` for the constraints
/// rescaled by `phi^1 lambda^1`.
pub fn solve_dual_p(cv: &ConstraintVectors) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cv.n();
    if n == 0 {
        return Err(Error::NoInteriorSolution);
    }
    let h: Vec<f64> = (0..n)
        .flat_map(|i| {
            let s = cv.phi1lambda1[i];
            cv.row(i).iter().map(move |g| g / s)
        })
        .collect();
    let sol = el_solve(&h, n, cv.kl)?;
    let p = (0..n)
        .map(|i| {
            let d = 1.0 + h[i * cv.kl..(i + 1) * cv.kl].iter().zip(&sol.x).map(|(a, b)| a * b).sum::<f64>();
            1.0 / (n as f64 * d)
        })
        .collect();
    Ok((p, sol.x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MRWeightSolution {
    pub rho: Vec<f64>,
    /// One weight per observed unit, in the order of `ConstraintVectors::units`.
    pub weights: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub dropped: Vec<usize>,
    pub min_denominator: f64,
    pub dual_p: Option<Vec<f64>>,
    pub dual_eps: Option<Vec<f64>>,
}

impl MRWeightSolution {
    /// `|sum w phi^k lambda^l - chi^{kl}|` for every pair, which equals `|sum w g|`.
    pub fn constraint_residuals(&self, cv: &ConstraintVectors) -> Vec<f64> {
        let mut res = vec![0.0; cv.kl];
        for (i, w) in self.weights.iter().enumerate() {
            for (r, g) in res.iter_mut().zip(cv.row(i)) {
                *r += w * g;
            }
        }
        res.iter().map(|r| r.abs()).collect()
    }
}

pub fn solve_mr(cv: &ConstraintVectors, with_dual: bool) -> Result<MRWeightSolution> {
    let sol = solve_rho(cv)?;
    let weights = mr_weights(&sol.x, cv);
    let (dual_p, dual_eps) = if with_dual {
        let (p, e) = solve_dual_p(cv)?;
        (Some(p), Some(e))
    } else {
        (None, None)
    };
    Ok(MRWeightSolution {
        rho: sol.x,
        weights,
        objective_trace: sol.objective_trace,
        dropped: sol.dropped,
        min_denominator: sol.min_denominator,
        dual_p,
        dual_eps,
    })
}
