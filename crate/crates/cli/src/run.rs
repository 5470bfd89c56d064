use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use mlgee::data::{derive_missingness, load_dataset, write_dataset};
use mlgee::formula::parse_formula;
use mlgee::inference::cluster_bootstrap;
use mlgee::simulate::{generate_dataset, run_study, study_method, Scenario, StudyMethod, StudySummary};
use mlgee::{BootstrapResult, ClusteredDataset, Error, FitConfig, FitOutput, Levels, Result};

use crate::config::{Command, RunConfig};

#[derive(Serialize)]
struct FitDocument<'a> {
    config: &'a RunConfig,
    result: FitOutput,
    bootstrap: Option<BootstrapResult>,
}

#[derive(Serialize)]
struct SimulateDocument<'a> {
    config: &'a RunConfig,
    n_clusters: usize,
    n_units: usize,
    observed_fraction: f64,
    missing_cluster_fraction: f64,
    indicator_agreement: f64,
}

#[derive(Serialize)]
struct StudyDocument<'a> {
    config: &'a RunConfig,
    summary: StudySummary,
}

pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    match cfg.command {
        Command::Fit | Command::Bootstrap => fit(cfg, out),
        Command::Simulate => simulate(cfg, out),
        Command::Study => study(cfg, out),
    }
}

fn fit_config(cfg: &RunConfig) -> Result<FitConfig> {
    let method = cfg.method.ok_or_else(|| Error::Config("--method is required".into()))?;
    let mut fc = FitConfig::new(method);
    fc.link = cfg.link;
    fc.corr = cfg.corr;
    fc.ps_individual = cfg.ps_individual.iter().map(|f| parse_formula(f)).collect::<Result<_>>()?;
    fc.ps_cluster = cfg.ps_cluster.iter().map(|f| parse_formula(f)).collect::<Result<_>>()?;
    fc.ipw_formula = cfg.ipw_formula.as_deref().map(parse_formula).transpose()?;
    fc.em = cfg.em;
    fc.validate()?;
    Ok(fc)
}

fn load(cfg: &RunConfig) -> Result<ClusteredDataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("--data is required".into()))?;
    let levels = if cfg.levels == 3 { Levels::Three } else { Levels::Two };
    load_dataset(path, &cfg.schema, levels)
}

fn fit(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let fc = fit_config(cfg)?;
    if cfg.command == Command::Bootstrap && cfg.bootstrap < 2 {
        return Err(Error::Config("bootstrap needs --bootstrap of at least 2".into()));
    }
    let ds = load(cfg)?;
    let result = mlgee::fit_marginal(&ds, &fc)?;
    let bootstrap = if cfg.bootstrap > 0 { Some(cluster_bootstrap(&ds, &fc, cfg.bootstrap, cfg.seed)?) } else { None };
    write_json(&FitDocument { config: cfg, result, bootstrap }, out)
}

fn scenario(cfg: &RunConfig) -> Result<&Scenario> {
    cfg.scenario.as_ref().ok_or_else(|| Error::Config("--scenario is required".into()))
}

fn simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let gd = generate_dataset(scenario(cfg)?, cfg.seed);
    let ds = &gd.dataset;
    let ms = derive_missingness(ds);
    match out {
        Some(path) => {
            write_dataset(ds, BufWriter::new(File::create(path)?))?;
            let agree = gd.true_c.iter().zip(&ms.c_obs).filter(|(a, b)| a == b).count();
            let doc = SimulateDocument {
                config: cfg,
                n_clusters: ds.n_clusters(),
                n_units: ds.n_units(),
                observed_fraction: ms.n_observed() as f64 / ds.n_units() as f64,
                missing_cluster_fraction: gd.true_c.iter().filter(|&&c| c == 0).count() as f64
                    / gd.true_c.len() as f64,
                indicator_agreement: agree as f64 / gd.true_c.len() as f64,
            };
            write_json(&doc, Some(&sibling_json(path)))
        }
        None => write_dataset(ds, io::stdout().lock()),
    }
}

fn study(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let sc = scenario(cfg)?;
    let methods: Vec<StudyMethod> = cfg.methods.iter().map(|m| study_method(m, sc)).collect::<Result<_>>()?;
    let summary = run_study(sc, &methods, cfg.reps, cfg.bootstrap, cfg.seed)?;
    match out {
        Some(path) => {
            std::fs::write(path, summary.to_csv())?;
            write_json(&StudyDocument { config: cfg, summary }, Some(&sibling_json(path)))
        }
        None => {
            io::stdout().lock().write_all(summary.to_csv().as_bytes())?;
            Ok(())
        }
    }
}

/// `results.csv` -> `results.json`.
fn sibling_json(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "json") {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        return p.into();
    }
    path.with_extension("json")
}

fn write_json<T: Serialize>(doc: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Error::Config(format!("serializing output: {e}")))?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
