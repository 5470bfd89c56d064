//! End-to-end estimation: propensity models, optional EM, weights, GEE.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{derive_missingness, ClusteredDataset, MissingnessSummary};
use crate::em::{naive_fits, run_em_design, EmDesign, EmFit, EmOptions};
use crate::error::{Error, Result};
use crate::formula::{build_design_matrix, DesignMatrix, Formula, FormulaLevel};
use crate::gee::{
    build_weight_spec, solve_gee, CorrStructure, FitResult, GeeOptions, Link, WeightInputs, WeightKind,
};
use crate::mr::{build_g_from_probs, solve_mr};
use crate::propensity::{chi_from_probs, evaluate_coefficients, fit_logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cc,
    Ipw,
    Mipw,
    Mmr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub method: Method,
    pub link: Link,
    pub corr: CorrStructure,
    /// Individual-level candidate models.
    pub ps_individual: Vec<Formula>,
    /// Cluster-level (subcluster-level for three-level data) candidate models.
    pub ps_cluster: Vec<Formula>,
    pub ipw_formula: Option<Formula>,
    pub em: bool,
    pub em_options: EmOptions,
}

impl FitConfig {
    pub fn new(method: Method) -> Self {
        FitConfig {
            method,
            link: Link::Identity,
            corr: CorrStructure::Exchangeable,
            ps_individual: Vec::new(),
            ps_cluster: Vec::new(),
            ipw_formula: None,
            em: true,
            em_options: EmOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = format!("{:?}", self.method).to_uppercase();
        let missing = |what: &str| Err(Error::MissingInput { method: name.clone(), what: what.into() });
        match self.method {
            Method::Cc => Ok(()),
            Method::Ipw if self.ipw_formula.is_none() => missing("an unconditional propensity formula"),
            Method::Ipw => Ok(()),
            Method::Mipw if self.ps_individual.len() != 1 => {
                missing("exactly one individual-level propensity formula")
            }
            Method::Mipw if self.ps_cluster.len() != 1 => missing("exactly one cluster-level propensity formula"),
            Method::Mmr if self.ps_individual.is_empty() => {
                missing("at least one individual-level propensity formula (P1)")
            }
            Method::Mmr if self.ps_cluster.is_empty() => missing("at least one cluster-level propensity formula (P2)"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCoefficients {
    pub formula: String,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub cluster_formula: String,
    pub individual_formula: String,
    pub iterations: usize,
    pub converged: bool,
    pub initial_loglik: f64,
    pub final_loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSummary {
    pub rho: Vec<f64>,
    pub chi: Vec<f64>,
    pub dropped_constraints: Vec<usize>,
    pub min_denominator: f64,
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub fit: FitResult,
    pub individual_models: Vec<ModelCoefficients>,
    pub cluster_models: Vec<ModelCoefficients>,
    pub em: Vec<EmSummary>,
    pub mr: Option<MrSummary>,
}

type Key = (String, FormulaLevel);

fn key(f: &Formula) -> Key {
    (f.to_string(), f.level)
}

/// Per-dataset memo of designs and fits so that several methods on the same
/// data (or a bootstrap replicate) fit each model once.
struct Cache<'a> {
    ds: &'a ClusteredDataset,
    ms: MissingnessSummary,
    designs: HashMap<Key, DesignMatrix>,
    naive_individual: HashMap<Key, Vec<f64>>,
    naive_cluster: HashMap<Key, Vec<f64>>,
    unconditional: HashMap<Key, Vec<f64>>,
    em: HashMap<(Key, Key), EmFit>,
}

impl<'a> Cache<'a> {
    fn new(ds: &'a ClusteredDataset) -> Self {
        Cache {
            ds,
            ms: derive_missingness(ds),
            designs: HashMap::new(),
            naive_individual: HashMap::new(),
            naive_cluster: HashMap::new(),
            unconditional: HashMap::new(),
            em: HashMap::new(),
        }
    }

    fn design(&mut self, f: &Formula) -> Result<&DesignMatrix> {
        let k = key(f);
        if !self.designs.contains_key(&k) {
            let x = build_design_matrix(f, self.ds)?;
            self.designs.insert(k.clone(), x);
        }
        Ok(&self.designs[&k])
    }

    fn unconditional(&mut self, f: &Formula) -> Result<Vec<f64>> {
        if let Some(c) = self.unconditional.get(&key(f)) {
            return Ok(c.clone());
        }
        let r: Vec<f64> = self.ms.r.iter().map(|&r| r as f64).collect();
        let x = self.design(f)?;
        let coef = fit_logistic(x, &r, None)?.coefficients;
        self.unconditional.insert(key(f), coef.clone());
        Ok(coef)
    }

    fn naive_individual(&mut self, f: &Formula) -> Result<Vec<f64>> {
        if let Some(c) = self.naive_individual.get(&key(f)) {
            return Ok(c.clone());
        }
        let r: Vec<f64> = self.ms.r.iter().map(|&r| r as f64).collect();
        let w: Vec<f64> = self.ds.unit_group().iter().map(|&g| self.ms.c_obs[g] as f64).collect();
        let x = self.design(f)?;
        let coef = fit_logistic(x, &r, Some(&w))?.coefficients;
        self.naive_individual.insert(key(f), coef.clone());
        Ok(coef)
    }

    fn naive_cluster(&mut self, f: &Formula) -> Result<Vec<f64>> {
        if let Some(c) = self.naive_cluster.get(&key(f)) {
            return Ok(c.clone());
        }
        let c: Vec<f64> = self.ms.c_obs.iter().map(|&c| c as f64).collect();
        let x = self.design(f)?;
        let coef = fit_logistic(x, &c, None)?.coefficients;
        self.naive_cluster.insert(key(f), coef.clone());
        Ok(coef)
    }

    fn em(&mut self, cluster: &Formula, individual: &Formula, opts: EmOptions) -> Result<EmFit> {
        let k = (key(cluster), key(individual));
        if let Some(fit) = self.em.get(&k) {
            return Ok(fit.clone());
        }
        let design = EmDesign { z: self.design(cluster)?.clone(), x: self.design(individual)?.clone() };
        let fit = run_em_design(&design, self.ds, &self.ms, opts)?;
        self.em.insert(k, fit.clone());
        Ok(fit)
    }

    fn probs(&mut self, f: &Formula, coef: &[f64]) -> Result<Vec<f64>> {
        evaluate_coefficients(coef, self.design(f)?)
    }

    /// Coefficients for every candidate model, through EM pairs or naive fits.
    fn candidate_fits(
        &mut self,
        individual: &[Formula],
        cluster: &[Formula],
        em: bool,
        opts: EmOptions,
        em_out: &mut Vec<EmSummary>,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (k, l) = (individual.len(), cluster.len());
        let mut eta: Vec<Option<Vec<f64>>> = vec![None; k];
        let mut gamma: Vec<Option<Vec<f64>>> = vec![None; l];
        if em {
            for i in 0..k.max(l) {
                let (a, b) = (i.min(k - 1), i.min(l - 1));
                let fit = self.em(&cluster[b], &individual[a], opts)?;
                em_out.push(EmSummary {
                    cluster_formula: cluster[b].to_string(),
                    individual_formula: individual[a].to_string(),
                    iterations: fit.iterations,
                    converged: fit.converged,
                    initial_loglik: fit.loglik_trace[0],
                    final_loglik: *fit.loglik_trace.last().unwrap(),
                });
                eta[a].get_or_insert(fit.eta);
                gamma[b].get_or_insert(fit.gamma);
            }
        } else {
            for (a, f) in individual.iter().enumerate() {
                eta[a] = Some(self.naive_individual(f)?);
            }
            for (b, f) in cluster.iter().enumerate() {
                gamma[b] = Some(self.naive_cluster(f)?);
            }
        }
        Ok((eta.into_iter().map(Option::unwrap).collect(), gamma.into_iter().map(Option::unwrap).collect()))
    }

    fn run(&mut self, cfg: &FitConfig) -> Result<FitOutput> {
        cfg.validate()?;
        let ind: Vec<Formula> = cfg.ps_individual.iter().map(|f| f.clone().with_level(FormulaLevel::Individual)).collect();
        let clu: Vec<Formula> = cfg.ps_cluster.iter().map(|f| f.clone().with_level(self.ds.group_level())).collect();
        let mut out = FitOutput {
            fit: empty_fit(),
            individual_models: Vec::new(),
            cluster_models: Vec::new(),
            em: Vec::new(),
            mr: None,
        };
        let record = |fs: &[Formula], cs: &[Vec<f64>]| {
            fs.iter()
                .zip(cs)
                .map(|(f, c)| ModelCoefficients { formula: f.to_string(), coefficients: c.clone() })
                .collect::<Vec<_>>()
        };
        let wspec = match cfg.method {
            Method::Cc => build_weight_spec(WeightKind::None, &WeightInputs::default(), self.ds, &self.ms)?,
            Method::Ipw => {
                let f = cfg.ipw_formula.clone().unwrap().with_level(FormulaLevel::Individual);
                let coef = self.unconditional(&f)?;
                let pi = self.probs(&f, &coef)?;
                out.individual_models = record(std::slice::from_ref(&f), std::slice::from_ref(&coef));
                let inputs = WeightInputs { pi: Some(&pi), ..Default::default() };
                build_weight_spec(WeightKind::Ipw, &inputs, self.ds, &self.ms)?
            }
            Method::Mipw => {
                let (eta, gamma) = self.candidate_fits(&ind, &clu, cfg.em, cfg.em_options, &mut out.em)?;
                let phi = self.probs(&ind[0], &eta[0])?;
                let lambda = self.probs(&clu[0], &gamma[0])?;
                out.individual_models = record(&ind, &eta);
                out.cluster_models = record(&clu, &gamma);
                let inputs = WeightInputs { phi: Some(&phi), lambda: Some(&lambda), ..Default::default() };
                build_weight_spec(WeightKind::Mipw, &inputs, self.ds, &self.ms)?
            }
            Method::Mmr => {
                let (eta, gamma) = self.candidate_fits(&ind, &clu, cfg.em, cfg.em_options, &mut out.em)?;
                let phi = ind.iter().zip(&eta).map(|(f, c)| self.probs(f, c)).collect::<Result<Vec<_>>>()?;
                let lambda = clu.iter().zip(&gamma).map(|(f, c)| self.probs(f, c)).collect::<Result<Vec<_>>>()?;
                out.individual_models = record(&ind, &eta);
                out.cluster_models = record(&clu, &gamma);
                let chi = chi_from_probs(&phi, &lambda, self.ds.unit_group());
                let cv = build_g_from_probs(&phi, &lambda, chi, self.ds.unit_group(), &self.ms);
                let sol = solve_mr(&cv, false)?;
                out.mr = Some(MrSummary {
                    rho: sol.rho.clone(),
                    chi: cv.chi.values.clone(),
                    dropped_constraints: sol.dropped.clone(),
                    min_denominator: sol.min_denominator,
                    max_constraint_residual: sol.constraint_residuals(&cv).into_iter().fold(0.0, f64::max),
                });
                let inputs = WeightInputs { mr: Some((&cv.units, &sol.weights)), ..Default::default() };
                build_weight_spec(WeightKind::Mmr, &inputs, self.ds, &self.ms)?
            }
        };
        out.fit = solve_gee(self.ds, &self.ms, cfg.link, cfg.corr, &wspec, &GeeOptions::default())?;
        Ok(out)
    }
}

fn empty_fit() -> FitResult {
    FitResult {
        beta: [f64::NAN; 2],
        score_norm: f64::NAN,
        iterations: 0,
        alpha_hat: crate::gee::WorkingCorrelation::Independence,
        n_clusters_used: 0,
        weight_diagnostics: crate::gee::WeightDiagnostics { min: 0.0, max: 0.0, mean: 0.0, n_active: 0 },
        scale: f64::NAN,
    }
}

pub fn fit_marginal(ds: &ClusteredDataset, cfg: &FitConfig) -> Result<FitOutput> {
    Cache::new(ds).run(cfg)
}

/// Fits several configurations on one dataset, sharing model fits.
pub fn fit_many(ds: &ClusteredDataset, cfgs: &[FitConfig]) -> Vec<Result<FitOutput>> {
    let mut cache = Cache::new(ds);
    cfgs.iter().map(|c| cache.run(c)).collect()
}

/// Naive and EM coefficients of one cluster/individual model pair.
pub fn em_and_naive(
    ds: &ClusteredDataset,
    cluster: &Formula,
    individual: &Formula,
    opts: EmOptions,
) -> Result<(EmFit, (Vec<f64>, Vec<f64>))> {
    let ms = derive_missingness(ds);
    let design = EmDesign::new(ds, cluster, individual)?;
    let naive = naive_fits(&design, ds, &ms)?;
    let em = run_em_design(&design, ds, &ms, opts)?;
    Ok((em, naive))
}
