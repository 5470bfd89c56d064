#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;

use mlgee::data::{ClusteredDataset, Levels, MissingnessSummary, UnitRecord};
use mlgee::propensity::expit;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maximizes a smooth concave function by Newton steps on finite-difference
/// gradients and Hessians, halving steps that decrease the objective.
pub fn numeric_maximize(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let at = |x: &[f64], j: usize, d: f64| {
        let mut y = x.to_vec();
        y[j] += d;
        y
    };
    for _ in 0..200 {
        let h = 1e-5;
        let grad: Vec<f64> = (0..n).map(|j| (f(&at(&x, j, h)) - f(&at(&x, j, -h))) / (2.0 * h)).collect();
        let k = 1e-4;
        let hess = DMatrix::from_fn(n, n, |i, j| {
            let pp = f(&at(&at(&x, i, k), j, k));
            let pm = f(&at(&at(&x, i, k), j, -k));
            let mp = f(&at(&at(&x, i, -k), j, k));
            let mm = f(&at(&at(&x, i, -k), j, -k));
            (pp - pm - mp + mm) / (4.0 * k * k)
        });
        let step = (-hess).lu().solve(&DVector::from_vec(grad)).expect("nonsingular Hessian");
        let f0 = f(&x);
        let mut t = 1.0;
        let mut cand: Vec<f64> = x.clone();
        for _ in 0..40 {
            cand = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if f(&cand) >= f0 - 1e-12 * f0.abs().max(1.0) {
                break;
            }
            t *= 0.5;
        }
        let moved = x.iter().zip(&cand).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = cand;
        if moved < 1e-12 {
            break;
        }
    }
    x
}

/// Root of a continuous function with a sign change on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Newton iteration with a central-difference Jacobian.
pub fn fd_newton(f: impl Fn(&[f64]) -> Vec<f64>, x0: &[f64]) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0.to_vec();
    for _ in 0..100 {
        let fx = f(&x);
        if fx.iter().all(|v| v.abs() < 1e-14) {
            break;
        }
        let h = 1e-6;
        let jac = DMatrix::from_fn(n, n, |i, j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            (f(&xp)[i] - f(&xm)[i]) / (2.0 * h)
        });
        let step = jac.lu().solve(&DVector::from_vec(fx)).expect("nonsingular Jacobian");
        let mut moved = 0.0f64;
        for j in 0..n {
            x[j] -= step[j];
            moved = moved.max(step[j].abs());
        }
        if moved < 1e-15 {
            break;
        }
    }
    x
}

/// Stacked GEE equation `sum_i D_i' V_i^{-1} W_i (y_i - mu_i)` for the
/// identity link with an exchangeable working correlation over the observed
/// units of each cluster, built with dense inverses.
pub fn dense_gee_equation(ds: &ClusteredDataset, ms: &MissingnessSummary, w: &[f64], alpha: f64, beta: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; 2];
    for i in 0..ds.n_clusters() {
        let obs: Vec<usize> = ds.cluster_units(i).iter().copied().filter(|&k| ms.r[k] == 1).collect();
        if obs.is_empty() {
            continue;
        }
        let n = obs.len();
        let c = DMatrix::from_fn(n, n, |p, q| if p == q { 1.0 } else { alpha });
        let cinv = c.try_inverse().unwrap();
        let a = ds.cluster_treatment(i) as f64;
        let mu = beta[0] + beta[1] * a;
        let wr = DVector::from_iterator(n, obs.iter().map(|&k| w[k] * (ds.outcomes()[k].unwrap() - mu)));
        let v = cinv * wr;
        let s: f64 = v.iter().sum();
        u[0] += s;
        u[1] += a * s;
    }
    u
}

/// Observed-data log-likelihood by summing the joint probability over every
/// configuration of the latent group indicators.
pub fn loglik_by_enumeration(
    lambda: &[f64],
    phi: &[f64],
    unit_group: &[usize],
    r: &[u8],
) -> f64 {
    let g = lambda.len();
    assert!(g <= 16);
    let mut total = 0.0;
    for mask in 0u32..(1 << g) {
        let mut p = 1.0;
        for k in 0..g {
            let c = (mask >> k) & 1;
            p *= if c == 1 { lambda[k] } else { 1.0 - lambda[k] };
        }
        for (u, &gr) in unit_group.iter().enumerate() {
            let c = (mask >> gr) & 1;
            p *= match (c, r[u]) {
                (1, 1) => phi[u],
                (1, _) => 1.0 - phi[u],
                (_, 1) => 0.0,
                _ => 1.0,
            };
        }
        total += p;
    }
    total.ln()
}

/// Small two-level dataset with a cluster covariate `z` and a unit
/// covariate `x`; groups drop out with `expit(gamma' (1, A, z))` and units
/// with `expit(eta' (1, A, x))`.
pub fn random_two_level(
    rng: &mut impl Rng,
    m: usize,
    max_size: usize,
    gamma: [f64; 3],
    eta: [f64; 3],
) -> ClusteredDataset {
    let mut units = Vec::new();
    for i in 0..m {
        let a = u8::from(i % 2 == 0);
        let af = a as f64;
        let z: f64 = rng.gen_range(-1.0..1.0);
        let c = rng.gen::<f64>() < expit(gamma[0] + gamma[1] * af + gamma[2] * z);
        let n = rng.gen_range(1..=max_size);
        for j in 0..n {
            let x: f64 = rng.gen_range(-1.5..1.5);
            let r = rng.gen::<f64>() < expit(eta[0] + eta[1] * af + eta[2] * x);
            let y = 1.0 + 0.5 * af + x + rng.gen_range(-1.0..1.0);
            units.push(UnitRecord {
                cluster_id: format!("k{i}"),
                subcluster_id: None,
                unit_id: j.to_string(),
                treatment: a,
                outcome: (c && r).then_some(y),
                covariates: BTreeMap::from([("x".to_string(), x), ("z".to_string(), z)]),
            });
        }
    }
    ClusteredDataset::from_units(Levels::Two, "A", "Y", vec!["x".into(), "z".into()], units).unwrap()
}
