//! Weighted GEE for the marginal model `g(mu) = b_I + b_A A`.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Levels, MissingnessSummary};
use crate::error::{Error, Result};
use crate::propensity::expit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }
    /// `(dmu/deta, variance function)` at `mu`.
    fn derivs(self, mu: f64) -> (f64, f64) {
        match self {
            Link::Identity => (1.0, 1.0),
            Link::Logit => {
                let v = (mu * (1.0 - mu)).max(1e-12);
                (v, v)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrStructure {
    #[serde(rename = "ind")]
    Independence,
    #[serde(rename = "exch")]
    Exchangeable,
    #[serde(rename = "block")]
    BlockExchangeable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable(f64),
    BlockExchangeable { within: f64, between: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub link: Link,
    pub coefficients: [f64; 2],
}

impl WorkingCorrelation {
    /// `C = a I + b blockdiag(J) + c J`.
    fn abc(self) -> (f64, f64, f64) {
        match self {
            WorkingCorrelation::Independence => (1.0, 0.0, 0.0),
            WorkingCorrelation::Exchangeable(al) => (1.0 - al, 0.0, al),
            WorkingCorrelation::BlockExchangeable { within, between } => (1.0 - within, within - between, between),
        }
    }

    /// Positive definiteness for a cluster whose subclusters have `sizes` members.
    /// Reduces to the `a > 0` check plus a Cholesky of the small matrix
    /// `diag(a + b n_s) + c sqrt(n_s n_t)` on the block-constant subspace.
    /// A block with `a + b n_s = 0` is reported as not positive definite
    /// because the closed-form solve divides by it.
    pub fn is_pd(self, sizes: &[usize]) -> bool {
        let (a, b, c) = self.abc();
        if a <= 0.0 {
            return false;
        }
        let e: Vec<f64> = sizes.iter().map(|&n| a + b * n as f64).collect();
        if e.iter().any(|&v| v == 0.0) {
            return false;
        }
        if e.iter().all(|&v| v > 0.0) {
            let acc: f64 = sizes.iter().zip(&e).map(|(&n, &v)| n as f64 / v).sum();
            return 1.0 + c * acc > 0.0;
        }
        let g = sizes.len();
        let small = DMatrix::from_fn(g, g, |s, t| {
            (if s == t { e[s] } else { 0.0 }) + c * ((sizes[s] * sizes[t]) as f64).sqrt()
        });
        small.cholesky().is_some()
    }

    /// Overwrites `y` with `C^{-1} y`; `y` is ordered by subcluster block.
    pub fn solve_in_place(self, sizes: &[usize], y: &mut [f64]) {
        let (a, b, c) = self.abc();
        if b == 0.0 && c == 0.0 {
            y.iter_mut().for_each(|v| *v /= a);
            return;
        }
        let mut sums = Vec::with_capacity(sizes.len());
        let (mut num, mut den) = (0.0, 1.0);
        let mut off = 0;
        for &n in sizes {
            let ys: f64 = y[off..off + n].iter().sum();
            let e = a + b * n as f64;
            num += ys / e;
            den += c * n as f64 / e;
            sums.push(ys);
            off += n;
        }
        let t = num / den;
        let mut off = 0;
        for (&n, ys) in sizes.iter().zip(sums) {
            let s = (ys - c * n as f64 * t) / (a + b * n as f64);
            for v in &mut y[off..off + n] {
                *v = (*v - b * s - c * t) / a;
            }
            off += n;
        }
    }

    pub fn matrix(self, sizes: &[usize]) -> DMatrix<f64> {
        let (a, b, c) = self.abc();
        let block: Vec<usize> = sizes.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat(s).take(n)).collect();
        let n = block.len();
        DMatrix::from_fn(n, n, |i, j| {
            (if i == j { a } else { 0.0 }) + if block[i] == block[j] { b } else { 0.0 } + c
        })
    }
}

/// Closed-form inverse of the `n x n` compound-symmetry matrix.
pub fn exchangeable_inverse(n: usize, alpha: f64) -> DMatrix<f64> {
    let k = alpha / (1.0 - alpha + n as f64 * alpha);
    DMatrix::from_fn(n, n, |i, j| ((if i == j { 1.0 } else { 0.0 }) - k) / (1.0 - alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    None,
    Ipw,
    Mipw,
    Mmr,
}

/// Diagonal GEE weight for every unit; zero wherever the outcome is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrixSpec {
    pub kind: WeightKind,
    pub values: Vec<f64>,
}

/// Ingredients for [`build_weight_spec`].
#[derive(Debug, Clone, Default)]
pub struct WeightInputs<'a> {
    /// Unconditional propensity per unit.
    pub pi: Option<&'a [f64]>,
    /// Individual-level propensity per unit.
    pub phi: Option<&'a [f64]>,
    /// Cluster-level propensity per group.
    pub lambda: Option<&'a [f64]>,
    /// Multiply-robust weights with the unit each belongs to.
    pub mr: Option<(&'a [usize], &'a [f64])>,
}

pub fn build_weight_spec(
    kind: WeightKind,
    inputs: &WeightInputs<'_>,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> Result<WeightMatrixSpec> {
    let missing = |what: &str| Error::MissingInput { method: format!("{kind:?}"), what: what.into() };
    let n = ds.n_units();
    let values = match kind {
        WeightKind::None => ms.r.iter().map(|&r| r as f64).collect(),
        WeightKind::Ipw => {
            let pi = inputs.pi.ok_or_else(|| missing("an unconditional propensity model"))?;
            (0..n).map(|u| if ms.r[u] == 1 { 1.0 / pi[u] } else { 0.0 }).collect()
        }
        WeightKind::Mipw => {
            let phi = inputs.phi.ok_or_else(|| missing("an individual-level propensity model"))?;
            let lambda = inputs.lambda.ok_or_else(|| missing("a cluster-level propensity model"))?;
            (0..n)
                .map(|u| {
                    let g = ds.unit_group()[u];
                    let rc = (ms.r[u] * ms.c_obs[g]) as f64;
                    if rc == 0.0 { 0.0 } else { rc / (phi[u] * lambda[g]) }
                })
                .collect()
        }
        WeightKind::Mmr => {
            let (units, w) = inputs.mr.ok_or_else(|| missing("multiply-robust weights"))?;
            let scale = units.len() as f64;
            let mut v = vec![0.0; n];
            for (&u, &wi) in units.iter().zip(w) {
                if ms.r[u] == 1 {
                    v[u] = wi * scale;
                }
            }
            v
        }
    };
    Ok(WeightMatrixSpec { kind, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: [f64; 2],
    /// `max |U| / sum w` at the returned estimate.
    pub score_norm: f64,
    pub iterations: usize,
    pub alpha_hat: WorkingCorrelation,
    pub n_clusters_used: usize,
    pub weight_diagnostics: WeightDiagnostics,
    /// Residual variance estimate (1 for the logit link up to overdispersion).
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Estimate,
    Fixed(WorkingCorrelation),
}

#[derive(Debug, Clone, Copy)]
pub struct GeeOptions {
    pub max_sweeps: usize,
    pub tol: f64,
    pub alpha: AlphaMode,
}

impl Default for GeeOptions {
    fn default() -> Self {
        GeeOptions { max_sweeps: 50, tol: 1e-8, alpha: AlphaMode::Estimate }
    }
}

/// Observed units of one cluster ordered by subcluster.
struct ClusterBlock {
    treatment: f64,
    units: Vec<usize>,
    sizes: Vec<usize>,
}

fn observed_blocks(ds: &ClusteredDataset, ms: &MissingnessSummary) -> Vec<ClusterBlock> {
    (0..ds.n_clusters())
        .filter_map(|i| {
            let mut units = Vec::new();
            let mut sizes = Vec::new();
            for &g in ds.cluster_groups(i) {
                let before = units.len();
                units.extend(ds.group_units(g).iter().copied().filter(|&u| ms.r[u] == 1));
                if units.len() > before {
                    sizes.push(units.len() - before);
                }
            }
            if units.is_empty() {
                return None;
            }
            if ds.levels() == Levels::Two {
                sizes = vec![units.len()];
            }
            Some(ClusterBlock { treatment: ds.cluster_treatment(i) as f64, units, sizes })
        })
        .collect()
}

/// Moment estimator of the working correlation from standardized residuals
/// of observed units (entries of unobserved units are ignored).
pub fn estimate_alpha(
    residuals: &[f64],
    structure: CorrStructure,
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
) -> Result<WorkingCorrelation> {
    let blocks = observed_blocks(ds, ms);
    estimate_alpha_blocks(residuals, structure, &blocks)
}

fn estimate_alpha_blocks(
    residuals: &[f64],
    structure: CorrStructure,
    blocks: &[ClusterBlock],
) -> Result<WorkingCorrelation> {
    if structure == CorrStructure::Independence {
        return Ok(WorkingCorrelation::Independence);
    }
    let (mut ss, mut n) = (0.0, 0usize);
    let (mut within, mut n_within) = (0.0, 0usize);
    let (mut total, mut n_total) = (0.0, 0usize);
    let mut n_max = 0;
    for b in blocks {
        let e: Vec<f64> = b.units.iter().map(|&u| residuals[u]).collect();
        let sq: f64 = e.iter().map(|v| v * v).sum();
        let s: f64 = e.iter().sum();
        ss += sq;
        n += e.len();
        n_max = n_max.max(e.len());
        total += (s * s - sq) / 2.0;
        n_total += e.len() * (e.len() - 1) / 2;
        let mut off = 0;
        for &k in &b.sizes {
            let part = &e[off..off + k];
            let ps: f64 = part.iter().sum();
            let psq: f64 = part.iter().map(|v| v * v).sum();
            within += (ps * ps - psq) / 2.0;
            n_within += k * (k - 1) / 2;
            off += k;
        }
    }
    if n_total == 0 || ss == 0.0 {
        return Err(Error::TooFewPairs);
    }
    let var = ss / n as f64;
    match structure {
        CorrStructure::Exchangeable => {
            let alpha = total / n_total as f64 / var;
            let lo = if n_max > 1 { -1.0 / (n_max as f64 - 1.0) + 0.01 } else { -0.99 };
            Ok(WorkingCorrelation::Exchangeable(alpha.clamp(lo.min(0.0), 0.99)))
        }
        CorrStructure::BlockExchangeable => {
            let n_between = n_total - n_within;
            if n_within == 0 || n_between == 0 {
                return Err(Error::TooFewPairs);
            }
            let aw = (within / n_within as f64 / var).clamp(-0.99, 0.99);
            let ab = ((total - within) / n_between as f64 / var).clamp(-0.99, 0.99);
            let mut corr = WorkingCorrelation::BlockExchangeable { within: aw, between: ab };
            let mut shrink = 1.0;
            while !blocks.iter().all(|b| corr.is_pd(&b.sizes)) {
                shrink *= 0.9;
                corr = WorkingCorrelation::BlockExchangeable { within: aw * shrink, between: ab * shrink };
            }
            Ok(corr)
        }
        CorrStructure::Independence => unreachable!(),
    }
}

fn alpha_distance(a: WorkingCorrelation, b: WorkingCorrelation) -> f64 {
    use WorkingCorrelation::*;
    match (a, b) {
        (Independence, Independence) => 0.0,
        (Exchangeable(x), Exchangeable(y)) => (x - y).abs(),
        (BlockExchangeable { within: w1, between: b1 }, BlockExchangeable { within: w2, between: b2 }) => {
            (w1 - w2).abs().max((b1 - b2).abs())
        }
        _ => f64::INFINITY,
    }
}

struct Problem<'a> {
    link: Link,
    y: &'a [Option<f64>],
    w: &'a [f64],
    blocks: Vec<ClusterBlock>,
}

impl Problem<'_> {
    fn residuals(&self, beta: [f64; 2], out: &mut [f64]) {
        for b in &self.blocks {
            let mu = self.link.inverse(beta[0] + beta[1] * b.treatment);
            let (_, v) = self.link.derivs(mu);
            let sd = v.sqrt();
            for &u in &b.units {
                out[u] = (self.y[u].unwrap() - mu) / sd;
            }
        }
    }

    /// Score and (non-symmetric) Fisher information.
    fn score_info(&self, beta: [f64; 2], corr: WorkingCorrelation) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut u_tot = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        let mut z = Vec::new();
        for b in &self.blocks {
            let mu = self.link.inverse(beta[0] + beta[1] * b.treatment);
            let (d, v) = self.link.derivs(mu);
            z.clear();
            z.resize(b.units.len(), 1.0);
            corr.solve_in_place(&b.sizes, &mut z);
            let (mut zr, mut zw) = (0.0, 0.0);
            for (&u, &zj) in b.units.iter().zip(&z) {
                let wj = self.w[u];
                zr += zj * wj * (self.y[u].unwrap() - mu);
                zw += zj * wj;
            }
            let x = [1.0, b.treatment];
            for p in 0..2 {
                u_tot[p] += x[p] * d / v * zr;
                for q in 0..2 {
                    h[p][q] += x[p] * x[q] * d * d / v * zw;
                }
            }
        }
        (u_tot, h)
    }
}

fn solve2(h: [[f64; 2]; 2], u: [f64; 2]) -> Option<[f64; 2]> {
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    Some([(h[1][1] * u[0] - h[0][1] * u[1]) / det, (h[0][0] * u[1] - h[1][0] * u[0]) / det])
}

pub fn solve_gee(
    ds: &ClusteredDataset,
    ms: &MissingnessSummary,
    link: Link,
    structure: CorrStructure,
    wspec: &WeightMatrixSpec,
    opts: &GeeOptions,
) -> Result<FitResult> {
    if ds.levels() == Levels::Two && structure == CorrStructure::BlockExchangeable {
        return Err(Error::Config("block-exchangeable correlation requires three-level data".into()));
    }
    let w = &wspec.values;
    let blocks = observed_blocks(ds, ms);
    let mut arm = [(0.0, 0.0); 2];
    let mut active = Vec::new();
    for b in &blocks {
        for &u in &b.units {
            if w[u] > 0.0 {
                let a = &mut arm[b.treatment as usize];
                a.0 += w[u] * ds.outcomes()[u].unwrap();
                a.1 += w[u];
                active.push(w[u]);
            }
        }
    }
    for (k, a) in arm.iter().enumerate() {
        if a.1 <= 0.0 {
            return Err(Error::ArmEmpty(k as u8));
        }
    }
    let means = [arm[0].0 / arm[0].1, arm[1].0 / arm[1].1];
    let mut beta = match link {
        Link::Identity => [means[0], means[1] - means[0]],
        Link::Logit => {
            let lg = |m: f64| {
                let m = m.clamp(1e-6, 1.0 - 1e-6);
                (m / (1.0 - m)).ln()
            };
            [lg(means[0]), lg(means[1]) - lg(means[0])]
        }
    };
    let total_w: f64 = active.iter().sum();
    let n_clusters_used = blocks
        .iter()
        .filter(|b| b.units.iter().any(|&u| w[u] > 0.0))
        .count();
    let problem = Problem { link, y: ds.outcomes(), w, blocks };

    let mut corr = match opts.alpha {
        AlphaMode::Fixed(c) => c,
        AlphaMode::Estimate => WorkingCorrelation::Independence,
    };
    let mut resid = vec![0.0; ds.n_units()];
    let mut warned = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_sweeps {
        iterations += 1;
        let prev = corr;
        if opts.alpha == AlphaMode::Estimate {
            problem.residuals(beta, &mut resid);
            corr = match estimate_alpha_blocks(&resid, structure, &problem.blocks) {
                Ok(c) => c,
                Err(Error::TooFewPairs) => {
                    if !warned {
                        warn!("too few observed pairs for the working correlation; using independence");
                        warned = true;
                    }
                    WorkingCorrelation::Independence
                }
                Err(e) => return Err(e),
            };
        }
        if !problem.blocks.iter().all(|b| corr.is_pd(&b.sizes)) {
            return Err(Error::NonPositiveDefiniteCorrelation);
        }
        let (u, h) = problem.score_info(beta, corr);
        let step = solve2(h, u).ok_or(Error::SingularInformation)?;
        beta = [beta[0] + step[0], beta[1] + step[1]];
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::NotConverged { what: "GEE", iterations });
        }
        let moved = step[0].abs().max(step[1].abs());
        if moved < opts.tol && (iterations > 1 || opts.alpha != AlphaMode::Estimate) && alpha_distance(prev, corr) < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { what: "GEE", iterations });
    }
    let mut score_norm = f64::INFINITY;
    for _ in 0..25 {
        let (u, h) = problem.score_info(beta, corr);
        score_norm = u[0].abs().max(u[1].abs()) / total_w;
        if score_norm < opts.tol {
            break;
        }
        let step = solve2(h, u).ok_or(Error::SingularInformation)?;
        beta = [beta[0] + step[0], beta[1] + step[1]];
    }
    if score_norm >= opts.tol {
        return Err(Error::NotConverged { what: "GEE", iterations });
    }
    problem.residuals(beta, &mut resid);
    let n_obs: usize = problem.blocks.iter().map(|b| b.units.len()).sum();
    let rss: f64 = problem.blocks.iter().flat_map(|b| b.units.iter()).map(|&u| resid[u] * resid[u]).sum();
    let scale = rss / (n_obs.saturating_sub(2).max(1)) as f64;
    let weight_diagnostics = WeightDiagnostics {
        min: active.iter().copied().fold(f64::INFINITY, f64::min),
        max: active.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: total_w / active.len() as f64,
        n_active: active.len(),
    };
    Ok(FitResult { beta, score_norm, iterations, alpha_hat: corr, n_clusters_used, weight_diagnostics, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_missingness, read_dataset, Schema};

    #[test]
    fn closed_form_matches_dense_inverse() {
        for &(n, a) in &[(1usize, 0.3), (2, -0.5), (7, 0.6), (50, 0.05)] {
            let dense = WorkingCorrelation::Exchangeable(a).matrix(&[n]).try_inverse().unwrap();
            let closed = exchangeable_inverse(n, a);
            assert!((dense - closed).abs().max() < 1e-10);
        }
    }

    #[test]
    fn block_solve_matches_dense() {
        let corr = WorkingCorrelation::BlockExchangeable { within: 0.4, between: 0.1 };
        let sizes = [3, 1, 4];
        let m = corr.matrix(&sizes);
        let y: Vec<f64> = (0..8).map(|k| (k as f64 * 0.7).sin()).collect();
        let mut x = y.clone();
        corr.solve_in_place(&sizes, &mut x);
        let back = &m * nalgebra::DVector::from_vec(x);
        for (a, b) in back.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.cholesky().is_some());
        assert!(corr.is_pd(&sizes));
        assert!(!WorkingCorrelation::Exchangeable(-0.5).is_pd(&[3]));
    }

    fn toy(csv: &str) -> (ClusteredDataset, MissingnessSummary) {
        let ds = read_dataset(csv.as_bytes(), &Schema::default(), crate::data::Levels::Two).unwrap();
        let ms = derive_missingness(&ds);
        (ds, ms)
    }

    #[test]
    fn independence_gives_arm_means() {
        let (ds, ms) = toy("cluster,id,A,Y\na,1,0,1\na,2,0,2\nb,1,0,6\nc,1,1,4\nc,2,1,\nc,3,1,8\n");
        let ws = build_weight_spec(WeightKind::None, &WeightInputs::default(), &ds, &ms).unwrap();
        let fit = solve_gee(&ds, &ms, Link::Identity, CorrStructure::Independence, &ws, &GeeOptions::default()).unwrap();
        assert!((fit.beta[0] - 3.0).abs() < 1e-12);
        assert!((fit.beta[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_alpha() {
        // clusters {1, 2}, {-1, 0, 1}, {2}
        let (ds, ms) = toy("cluster,id,A,Y\na,1,0,0\na,2,0,0\nb,1,1,0\nb,2,1,0\nb,3,1,0\nc,1,0,0\n");
        let e = [1.0, 2.0, -1.0, 0.0, 1.0, 2.0];
        let alpha = estimate_alpha(&e, CorrStructure::Exchangeable, &ds, &ms).unwrap();
        // pairs: 1*2, (-1*0 + -1*1 + 0*1) -> sum 1 over 4 pairs; mean square 11/6
        let expect = (1.0 / 4.0) / (11.0 / 6.0);
        assert_eq!(alpha, WorkingCorrelation::Exchangeable(expect));
    }

    #[test]
    fn perfect_correlation_is_clipped() {
        let (ds, ms) = toy("cluster,id,A,Y\na,1,0,0\na,2,0,0\nb,1,1,0\nb,2,1,0\n");
        let e = [1.0, 1.0, -1.0, -1.0];
        let alpha = estimate_alpha(&e, CorrStructure::Exchangeable, &ds, &ms).unwrap();
        assert_eq!(alpha, WorkingCorrelation::Exchangeable(0.99));
    }

    #[test]
    fn singletons_have_no_pairs() {
        let (ds, ms) = toy("cluster,id,A,Y\na,1,0,0\nb,1,1,0\n");
        assert!(matches!(
            estimate_alpha(&[1.0, -1.0], CorrStructure::Exchangeable, &ds, &ms),
            Err(Error::TooFewPairs)
        ));
    }

    #[test]
    fn weight_spec_entries() {
        let (ds, ms) = toy("cluster,id,A,Y\na,1,0,1\na,2,0,\n");
        let phi = [0.5, 0.5];
        let lambda = [0.8];
        let inputs = WeightInputs { phi: Some(&phi), lambda: Some(&lambda), ..Default::default() };
        let ws = build_weight_spec(WeightKind::Mipw, &inputs, &ds, &ms).unwrap();
        assert!((ws.values[0] - 2.5).abs() < 1e-15);
        assert_eq!(ws.values[1], 0.0);
        assert!(matches!(
            build_weight_spec(WeightKind::Ipw, &WeightInputs::default(), &ds, &ms),
            Err(Error::MissingInput { .. })
        ));
    }
}
