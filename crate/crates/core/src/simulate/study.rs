use std::fmt::Write as _;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::derive_missingness;
use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::estimate::{em_and_naive, fit_many, FitConfig, Method};
use crate::formula::{parse_formula, Formula, FormulaLevel};
use crate::inference::{bootstrap_replicates, summarize_bootstrap, summarize_study, ReplicateEstimate, SummaryRow};
use crate::rng::{replicate_stream, stream};

use super::generate::generate_with_rng;
use super::scenario::Scenario;

/// Method names accepted by [`study_method`].
pub const METHOD_NAMES: [&str; 6] = ["cc", "ipw", "mipw-noem", "mipw-em", "mmr-noem", "mmr"];

#[derive(Debug, Clone, PartialEq)]
pub struct StudyMethod {
    pub name: String,
    pub config: FitConfig,
}

fn parse_all(texts: &[String], level: FormulaLevel) -> Result<Vec<Formula>> {
    texts.iter().map(|t| Ok(parse_formula(t)?.with_level(level))).collect()
}

/// Builds the configuration of a named method from the scenario's models.
pub fn study_method(name: &str, sc: &Scenario) -> Result<StudyMethod> {
    let cluster_level = match sc.covariates {
        super::scenario::CovariateLaw::ThreeLevel(_) => FormulaLevel::Subcluster,
        _ => FormulaLevel::Cluster,
    };
    let individual = parse_all(&sc.models.ps_individual, FormulaLevel::Individual)?;
    let cluster = parse_all(&sc.models.ps_cluster, cluster_level)?;
    let mut cfg = match name {
        "cc" => FitConfig::new(Method::Cc),
        "ipw" => {
            let mut c = FitConfig::new(Method::Ipw);
            c.ipw_formula = Some(parse_formula(&sc.models.ipw)?);
            c
        }
        "mipw-noem" | "mipw-em" | "mipw" => {
            let mut c = FitConfig::new(Method::Mipw);
            c.ps_individual = individual[..1].to_vec();
            c.ps_cluster = cluster[..1].to_vec();
            c
        }
        "mmr-noem" | "mmr" | "mmr-em" => {
            let mut c = FitConfig::new(Method::Mmr);
            c.ps_individual = individual;
            c.ps_cluster = cluster;
            c
        }
        other => return Err(Error::Config(format!("unknown study method `{other}`"))),
    };
    cfg.em = !name.ends_with("-noem");
    Ok(StudyMethod { name: name.into(), config: cfg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: String,
    pub seed: u64,
    pub n_reps: usize,
    pub bootstrap_b: usize,
    pub rows: Vec<SummaryRow>,
    /// Replicates per method whose point estimate failed.
    pub failed: Vec<usize>,
    /// Mean share of groups whose observed participation equals the latent one.
    pub agreement_rate: f64,
    /// Mean share of units with an observed outcome.
    pub observed_rate: f64,
}

impl StudySummary {
    /// Fixed-precision CSV, identical for any thread count.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,bias,emp_se,est_se,coverage\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{:.6},{:.2}", r.method, r.bias, r.emp_se, r.est_se, r.coverage).unwrap();
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

struct RepOutcome {
    estimates: Vec<Option<ReplicateEstimate>>,
    agreement: f64,
    observed: f64,
}

fn run_replicate(sc: &Scenario, cfgs: &[FitConfig], r: u64, b: usize, seed: u64) -> RepOutcome {
    let gd = generate_with_rng(sc, &mut stream(seed, replicate_stream(r, 0)));
    let ds = &gd.dataset;
    let ms = derive_missingness(ds);
    let agree = gd.true_c.iter().zip(&ms.c_obs).filter(|(a, b)| a == b).count();
    let points = fit_many(ds, cfgs);
    let boot = if b > 0 {
        bootstrap_replicates(ds, cfgs, b, seed, |k| replicate_stream(r, k + 1))
    } else {
        Vec::new()
    };
    let estimates = points
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let est = match p {
                Ok(out) => out.fit.beta,
                Err(e) => {
                    debug!("replicate {r}, method {k}: {e}");
                    return None;
                }
            };
            if b == 0 {
                return Some(ReplicateEstimate { beta_a: est[1], se: f64::NAN, ci: [f64::NAN; 2] });
            }
            let reps: Vec<Option<[f64; 2]>> = boot.iter().map(|row| row[k]).collect();
            let s = summarize_bootstrap(est, &reps).ok()?;
            Some(ReplicateEstimate { beta_a: est[1], se: s.se[1], ci: s.ci_normal[1] })
        })
        .collect();
    RepOutcome {
        estimates,
        agreement: agree as f64 / ds.n_groups() as f64,
        observed: ms.n_observed() as f64 / ds.n_units() as f64,
    }
}

/// Monte Carlo study: replicate `r` draws its dataset from stream `(r, 0)` and
/// bootstrap resample `k` from stream `(r, k + 1)`.
pub fn run_study(
    sc: &Scenario,
    methods: &[StudyMethod],
    n_reps: usize,
    b: usize,
    seed: u64,
) -> Result<StudySummary> {
    if n_reps == 0 {
        return Err(Error::Config("a study needs at least one replicate".into()));
    }
    let cfgs: Vec<FitConfig> = methods.iter().map(|m| m.config.clone()).collect();
    let reps: Vec<RepOutcome> =
        (0..n_reps as u64).into_par_iter().map(|r| run_replicate(sc, &cfgs, r, b, seed)).collect();
    let mut rows = Vec::with_capacity(methods.len());
    let mut failed = Vec::with_capacity(methods.len());
    for (k, m) in methods.iter().enumerate() {
        let ok: Vec<ReplicateEstimate> = reps.iter().filter_map(|o| o.estimates[k]).collect();
        failed.push(n_reps - ok.len());
        if ok.is_empty() {
            return Err(Error::AllReplicatesFailed(n_reps));
        }
        rows.push(summarize_study(&m.name, &ok, sc.truth[1]));
    }
    Ok(StudySummary {
        scenario: sc.name.clone(),
        seed,
        n_reps,
        bootstrap_b: b,
        rows,
        failed,
        agreement_rate: reps.iter().map(|o| o.agreement).sum::<f64>() / n_reps as f64,
        observed_rate: reps.iter().map(|o| o.observed).sum::<f64>() / n_reps as f64,
    })
}

/// Absolute bias of EM and naive propensity coefficients for the correctly
/// specified models, cluster coefficients first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBias {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    /// Absolute bias of the mean estimate.
    pub em: Vec<f64>,
    pub naive: Vec<f64>,
    pub em_mean: Vec<f64>,
    pub naive_mean: Vec<f64>,
    pub n_used: usize,
}

pub fn ps_parameter_bias(sc: &Scenario, n_reps: usize, seed: u64) -> Result<ParamBias> {
    let m = study_method("mipw-em", sc)?;
    let (cf, inf) = (&m.config.ps_cluster[0], &m.config.ps_individual[0]);
    let truth: Vec<f64> = sc.ps.gamma.iter().chain(&sc.ps.eta).copied().collect();
    let fits: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let gd = generate_with_rng(sc, &mut stream(seed, replicate_stream(r, 0)));
            match em_and_naive(&gd.dataset, cf, inf, EmOptions::default()) {
                Ok((em, (ng, ne))) => Some((
                    em.gamma.iter().chain(&em.eta).copied().collect(),
                    ng.iter().chain(&ne).copied().collect(),
                )),
                Err(e) => {
                    debug!("replicate {r}: {e}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = fits.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(n_reps));
    }
    let p = truth.len();
    let mut em = vec![0.0; p];
    let mut naive = vec![0.0; p];
    for (e, nv) in &ok {
        for j in 0..p {
            em[j] += e[j] / ok.len() as f64;
            naive[j] += nv[j] / ok.len() as f64;
        }
    }
    let names = cf.column_names().into_iter().chain(inf.column_names()).collect();
    Ok(ParamBias {
        names,
        em: em.iter().zip(&truth).map(|(a, t)| (a - t).abs()).collect(),
        naive: naive.iter().zip(&truth).map(|(a, t)| (a - t).abs()).collect(),
        truth,
        em_mean: em,
        naive_mean: naive,
        n_used: ok.len(),
    })
}
