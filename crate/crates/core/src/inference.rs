//! Cluster bootstrap and Monte Carlo summaries.

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::estimate::{fit_many, fit_marginal, FitConfig};
use crate::rng::{replicate_stream, stream};

/// Share of failed replicates above which a result is flagged unreliable.
pub const FAILURE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub b: usize,
    pub estimate: [f64; 2],
    /// Successful replicates in replicate order.
    pub beta_replicates: Vec<[f64; 2]>,
    pub se: [f64; 2],
    /// `[lower, upper]` per coefficient.
    pub ci_normal: [[f64; 2]; 2],
    pub ci_percentile: [[f64; 2]; 2],
    pub n_failed: usize,
    pub unreliable: bool,
}

/// Draws `M` clusters with replacement; duplicates become distinct clusters.
pub fn resample<R: Rng>(ds: &ClusteredDataset, rng: &mut R) -> ClusteredDataset {
    let m = ds.n_clusters();
    let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
    ds.select_clusters(&idx)
}

/// Replicate estimates for several configurations sharing each resample.
/// Replicate `k` uses stream `stream_of(k)`; `None` marks a failed fit.
pub fn bootstrap_replicates<F>(
    ds: &ClusteredDataset,
    cfgs: &[FitConfig],
    b: usize,
    seed: u64,
    stream_of: F,
) -> Vec<Vec<Option<[f64; 2]>>>
where
    F: Fn(u64) -> u64 + Sync,
{
    (0..b as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, stream_of(k));
            let bs = resample(ds, &mut rng);
            fit_many(&bs, cfgs)
                .into_iter()
                .map(|r| match r {
                    Ok(out) => Some(out.fit.beta),
                    Err(e) => {
                        debug!("bootstrap replicate {k} failed: {e}");
                        None
                    }
                })
                .collect()
        })
        .collect()
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Nearest-rank 2.5% and 97.5% order statistics.
fn percentile_interval(values: &[f64]) -> [f64; 2] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = |q: f64| ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    [v[rank(0.025)], v[rank(0.975)]]
}

pub fn summarize_bootstrap(estimate: [f64; 2], reps: &[Option<[f64; 2]>]) -> Result<BootstrapResult> {
    let b = reps.len();
    let ok: Vec<[f64; 2]> = reps.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(b));
    }
    let n_failed = b - ok.len();
    let mut se = [0.0; 2];
    let mut ci_normal = [[0.0; 2]; 2];
    let mut ci_percentile = [[0.0; 2]; 2];
    for p in 0..2 {
        let col: Vec<f64> = ok.iter().map(|r| r[p]).collect();
        se[p] = sd(&col);
        ci_normal[p] = [estimate[p] - 1.96 * se[p], estimate[p] + 1.96 * se[p]];
        ci_percentile[p] = percentile_interval(&col);
    }
    Ok(BootstrapResult {
        b,
        estimate,
        beta_replicates: ok,
        se,
        ci_normal,
        ci_percentile,
        n_failed,
        unreliable: n_failed as f64 > FAILURE_FRACTION * b as f64,
    })
}

pub fn cluster_bootstrap(ds: &ClusteredDataset, cfg: &FitConfig, b: usize, seed: u64) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::Config("the bootstrap needs at least 2 replicates".into()));
    }
    let estimate = fit_marginal(ds, cfg)?.fit.beta;
    let reps: Vec<Option<[f64; 2]>> =
        bootstrap_replicates(ds, std::slice::from_ref(cfg), b, seed, |k| replicate_stream(0, k + 1))
            .into_iter()
            .map(|r| r[0])
            .collect();
    summarize_bootstrap(estimate, &reps)
}

/// Treatment-effect estimate of one Monte Carlo replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub beta_a: f64,
    pub se: f64,
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub bias: f64,
    pub emp_se: f64,
    pub est_se: f64,
    /// Percentage of intervals containing the truth.
    pub coverage: f64,
    pub n: usize,
}

pub fn summarize_study(method: &str, reps: &[ReplicateEstimate], truth: f64) -> SummaryRow {
    let n = reps.len();
    let est: Vec<f64> = reps.iter().map(|r| r.beta_a).collect();
    let mean = est.iter().sum::<f64>() / n as f64;
    let covered = reps.iter().filter(|r| r.ci[0] <= truth && truth <= r.ci[1]).count();
    SummaryRow {
        method: method.to_string(),
        bias: mean - truth,
        emp_se: sd(&est),
        est_se: reps.iter().map(|r| r.se).sum::<f64>() / n as f64,
        coverage: 100.0 * covered as f64 / n as f64,
        n,
    }
}
