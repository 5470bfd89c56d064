use mlgee::data::{derive_missingness, read_dataset, Schema};
use mlgee::em::{estep_cluster_weights, mstep, observed_loglik, q_function, run_em, EmDesign, EmOptions};
use mlgee::formula::{parse_formula, DesignMatrix};
use mlgee::gee::{solve_gee, AlphaMode, CorrStructure, GeeOptions, Link, WeightKind, WeightMatrixSpec, WorkingCorrelation};
use mlgee::mr::{build_g_from_probs, solve_mr, solve_rho, ConstraintVectors};
use mlgee::propensity::{chi_from_probs, expit, fit_logistic, logistic_loglik, ChiTable};
use mlgee::Levels;
use rand::Rng;

use super::*;

/// Largest gap between the Newton fit and a direct maximization over 20
/// random instances.
pub fn logistic_oracle_gap() -> f64 {
    let mut r = rng(101);
    let mut gap = 0.0f64;
    for inst in 0..20 {
        let n = 80;
        let truth = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|x| f64::from(u8::from(r.gen::<f64>() < expit(truth[0] + truth[1] * x[1] + truth[2] * x[2]))))
            .collect();
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..3.0)).collect();
        let w = (inst % 2 == 1).then_some(w);
        let x = DesignMatrix::from_rows(&rows);
        let fit = fit_logistic(&x, &y, w.as_deref()).unwrap();
        let direct = numeric_maximize(|b| logistic_loglik(&x, &y, w.as_deref(), b), &[0.0; 3]);
        for (a, b) in fit.coefficients.iter().zip(&direct) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

pub fn scalar_cv(g: &[f64]) -> ConstraintVectors {
    ConstraintVectors {
        g: g.to_vec(),
        kl: 1,
        chi: ChiTable { k: 1, l: 1, values: vec![0.5] },
        units: (0..g.len()).collect(),
        phi1lambda1: vec![0.5; g.len()],
    }
}

/// Largest gap between the scalar multiplier and bisection, including a
/// hand-solved case.
pub fn rho_oracle_gap() -> f64 {
    // 0.4 / (1 + 0.2 rho) = 0.1 / (1 - 0.1 rho) gives rho = 5.
    let s = solve_rho(&scalar_cv(&[0.2, 0.2, -0.1])).unwrap();
    let mut gap = (s.x[0] - 5.0).abs();

    let mut r = rng(7);
    for _ in 0..25 {
        let n = r.gen_range(3..40);
        let mut g: Vec<f64> = (0..n).map(|_| r.gen_range(-0.5..0.5)).collect();
        g[0] = -0.3;
        g[1] = 0.4;
        let eq = |rho: f64| g.iter().map(|v| v / (1.0 + rho * v)).sum::<f64>();
        let hi = -1.0 / g.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12;
        let lo = -1.0 / g.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
        let root = bisect(eq, lo, hi);
        let s = solve_rho(&scalar_cv(&g)).unwrap();
        gap = gap.max((s.x[0] - root).abs());
    }
    gap
}

const GEE_TOY: &str = "cluster,id,A,Y
a,1,1,2.5
a,2,1,3.1
b,1,1,1.9
b,2,1,2.2
b,3,1,
b,4,1,3.6
b,5,1,2.8
c,1,0,1.2
c,2,0,0.4
c,3,0,1.7
c,4,0,0.9
c,5,0,1.1
d,1,0,0.3
d,2,0,1.6
";

/// Largest gap between the GEE solver, a generic root-finder on the dense
/// estimating equation, and the frozen root.
pub fn gee_oracle_gap() -> f64 {
    let ds = read_dataset(GEE_TOY.as_bytes(), &Schema::default(), Levels::Two).unwrap();
    let ms = derive_missingness(&ds);
    let w: Vec<f64> = (0..ds.n_units()).map(|u| if ms.r[u] == 1 { 1.0 + 0.25 * (u % 3) as f64 } else { 0.0 }).collect();
    let spec = WeightMatrixSpec { kind: WeightKind::Ipw, values: w.clone() };
    let opts = GeeOptions { alpha: AlphaMode::Fixed(WorkingCorrelation::Exchangeable(0.3)), ..GeeOptions::default() };
    let fit = solve_gee(&ds, &ms, Link::Identity, CorrStructure::Exchangeable, &spec, &opts).unwrap();
    let root = fd_newton(|b| dense_gee_equation(&ds, &ms, &w, 0.3, b), &[0.0, 0.0]);
    // Frozen output of the root-finder on this toy.
    let frozen = [1.0154850746268655, 1.7072527443986565];
    (0..2).fold(0.0f64, |g, p| g.max((fit.beta[p] - root[p]).abs()).max((frozen[p] - root[p]).abs()))
}

/// Largest gap between the closed-form observed log-likelihood and
/// enumeration of the latent indicators over 20 instances.
pub fn loglik_oracle_gap() -> f64 {
    let mut r = rng(33);
    let mut gap = 0.0f64;
    let gf = parse_formula("C ~ 1 + A + z").unwrap();
    let ef = parse_formula("R ~ 1 + A + x").unwrap();
    for _ in 0..20 {
        let ds = random_two_level(&mut r, 8, 3, [0.5, 0.3, -0.8], [0.2, -0.4, 1.0]);
        let ms = derive_missingness(&ds);
        let design = EmDesign::new(&ds, &gf, &ef).unwrap();
        let gamma: Vec<f64> = (0..3).map(|_| r.gen_range(-1.5..1.5)).collect();
        let eta: Vec<f64> = (0..3).map(|_| r.gen_range(-1.5..1.5)).collect();
        let lambda: Vec<f64> = design.z.mul_vec(&gamma).into_iter().map(expit).collect();
        let phi: Vec<f64> = design.x.mul_vec(&eta).into_iter().map(expit).collect();
        let brute = loglik_by_enumeration(&lambda, &phi, ds.unit_group(), &ms.r);
        let ll = observed_loglik(&gamma, &eta, &design, &ds, &ms);
        gap = gap.max((ll - brute).abs());
    }
    gap
}

/// Largest gap between the M-step and a numeric maximization of Q.
pub fn mstep_oracle_gap() -> f64 {
    let mut r = rng(58);
    let mut gap = 0.0f64;
    let gf = parse_formula("C ~ 1 + A + z").unwrap();
    let ef = parse_formula("R ~ 1 + A + x").unwrap();
    for _ in 0..5 {
        let ds = random_two_level(&mut r, 40, 3, [0.8, 0.3, -0.8], [0.4, -0.4, 1.0]);
        let ms = derive_missingness(&ds);
        let design = EmDesign::new(&ds, &gf, &ef).unwrap();
        let w = estep_cluster_weights(&[0.5, 0.2, -0.5], &[0.3, -0.2, 0.8], &design, &ds, &ms);
        let (g, e) = mstep(&w, &design, &ds, &ms).unwrap();
        let g_num = numeric_maximize(|gg| q_function(gg, &e, &w, &design, &ds, &ms), &[0.0; 3]);
        let e_num = numeric_maximize(|ee| q_function(&g, ee, &w, &design, &ds, &ms), &[0.0; 3]);
        for (a, b) in g.iter().chain(&e).zip(g_num.iter().chain(&e_num)) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}


pub struct MrIdentityCheck {
    pub instances: usize,
    pub identity_gap: f64,
    pub sum_gap: f64,
    pub max_residual: f64,
    pub min_weight: f64,
}

/// Solves the multiply robust weights on `want` random small instances
/// (M <= 10, K and L <= 3) that admit an interior solution and records the
/// worst deviation from the dual identity and the constraints.
pub fn mr_identity_check(want: usize, seed: u64) -> MrIdentityCheck {
    let mut r = rng(seed);
    let mut out =
        MrIdentityCheck { instances: 0, identity_gap: 0.0, sum_gap: 0.0, max_residual: 0.0, min_weight: f64::INFINITY };
    let mut attempts = 0;
    while out.instances < want {
        attempts += 1;
        assert!(attempts < 100 * want, "too few feasible instances");
        let m = r.gen_range(2..=10);
        let ds = random_two_level(&mut r, m, 4, [1.5, 0.0, 0.5], [1.0, 0.0, 0.5]);
        let ms = derive_missingness(&ds);
        let k = r.gen_range(1..=3);
        let l = r.gen_range(1..=3);
        let phi: Vec<Vec<f64>> =
            (0..k).map(|_| (0..ds.n_units()).map(|_| r.gen_range(0.2..0.95)).collect()).collect();
        let lambda: Vec<Vec<f64>> =
            (0..l).map(|_| (0..ds.n_groups()).map(|_| r.gen_range(0.2..0.95)).collect()).collect();
        if ms.n_observed() < 2 {
            continue;
        }
        let chi = chi_from_probs(&phi, &lambda, ds.unit_group());
        let cv = build_g_from_probs(&phi, &lambda, chi, ds.unit_group(), &ms);
        let Ok(sol) = solve_mr(&cv, true) else { continue };
        out.instances += 1;
        out.sum_gap = out.sum_gap.max((sol.weights.iter().sum::<f64>() - 1.0).abs());
        out.max_residual = sol.constraint_residuals(&cv).iter().fold(out.max_residual, |a, &b| a.max(b));
        let p = sol.dual_p.as_ref().expect("dual requested");
        let chi11 = cv.chi.get(0, 0);
        for i in 0..cv.n() {
            out.identity_gap = out.identity_gap.max((sol.weights[i] - p[i] * chi11 / cv.phi1lambda1[i]).abs());
            out.min_weight = out.min_weight.min(sol.weights[i]);
        }
    }
    out
}

pub struct EmMonotonicityCheck {
    pub datasets: usize,
    pub converged: usize,
    pub worst_drop: f64,
}

/// Runs EM on `n` random small datasets, recording convergence and the
/// largest decrease anywhere in the log-likelihood traces.
pub fn em_monotonicity_check(n: usize, seed: u64) -> EmMonotonicityCheck {
    let mut r = rng(seed);
    let gf = parse_formula("C ~ 1 + A + z").unwrap();
    let ef = parse_formula("R ~ 1 + A + x").unwrap();
    let mut out = EmMonotonicityCheck { datasets: n, converged: 0, worst_drop: 0.0 };
    for _ in 0..n {
        let ds = random_two_level(&mut r, 60, 5, [0.0, 0.3, -0.8], [0.8, -0.4, 1.0]);
        let ms = derive_missingness(&ds);
        let fit = match run_em(&ds, &ms, &gf, &ef, EmOptions::default()) {
            Ok(f) => f,
            Err(mlgee::Error::EmNotConverged(f)) => *f,
            Err(_) => continue,
        };
        if fit.converged && fit.iterations <= 500 {
            out.converged += 1;
        }
        for pair in fit.loglik_trace.windows(2) {
            out.worst_drop = out.worst_drop.max(pair[0] - pair[1]);
        }
    }
    out
}
