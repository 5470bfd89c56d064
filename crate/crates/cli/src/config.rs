use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use mlgee::data::Schema;
use mlgee::simulate::{scenario_by_name, Scenario, METHOD_NAMES};
use mlgee::{CorrStructure, Error, Link, Method, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Point estimate, optionally with bootstrap inference.
    Fit,
    /// Point estimate with cluster-bootstrap inference.
    Bootstrap,
    /// Draw one dataset from a scenario.
    Simulate,
    /// Monte Carlo study over a scenario.
    Study,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cc,
    Ipw,
    Mipw,
    Mmr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Identity,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorrArg {
    Ind,
    Exch,
    Block,
}

/// Marginal treatment effects in cluster-randomized trials with missing
/// outcomes at the cluster and individual level.
///
/// Formulas look like `R ~ 1 + A + age + A:age + age^2`. A formula argument
/// starting with `@` names a file holding one formula per line.
#[derive(Debug, Parser)]
#[command(name = "mlgee", version)]
pub struct Args {
    /// What to run; may be omitted with --config.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// Input CSV for fit and bootstrap.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON file naming the cluster, subcluster, id, treatment and outcome columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Nesting depth of the data.
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub levels: Option<u8>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Comma-separated study methods: cc, ipw, mipw-noem, mipw-em, mmr-noem, mmr.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Link of the marginal mean model [default: identity].
    #[arg(long, value_enum)]
    pub link: Option<LinkArg>,
    /// Working correlation [default: exch].
    #[arg(long, value_enum)]
    pub corr: Option<CorrArg>,
    /// Individual-level propensity model (repeatable).
    #[arg(long = "ps-individual")]
    pub ps_individual: Vec<String>,
    /// Cluster-level (subcluster-level with --levels 3) propensity model (repeatable).
    #[arg(long = "ps-cluster")]
    pub ps_cluster: Vec<String>,
    /// Unconditional observation model for IPW.
    #[arg(long)]
    pub ipw_formula: Option<String>,
    /// Correct cluster drop-out indicators with EM (default).
    #[arg(long, overrides_with = "no_em")]
    pub em: bool,
    /// Fit propensity models to the observed indicators directly.
    #[arg(long, overrides_with = "em")]
    pub no_em: bool,
    /// Bootstrap replicates.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Master seed; drawn from the clock when absent.
    #[arg(long, env = "MLGEE_SEED")]
    pub seed: Option<u64>,
    /// Monte Carlo replicates for study.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Output path; study and simulate write CSV here and JSON next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Rerun the `config` object of an earlier result document.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Everything that determines the results of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub data: Option<PathBuf>,
    pub schema: Schema,
    pub levels: u8,
    pub method: Option<Method>,
    pub link: Link,
    pub corr: CorrStructure,
    pub ps_individual: Vec<String>,
    pub ps_cluster: Vec<String>,
    pub ipw_formula: Option<String>,
    pub em: bool,
    pub bootstrap: usize,
    pub seed: u64,
    pub reps: usize,
    pub scenario: Option<Scenario>,
    pub methods: Vec<String>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn expand_formulas(values: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for v in values {
        match v.strip_prefix('@') {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                out.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from));
            }
            None => out.push(v.clone()),
        }
    }
    Ok(out)
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(sc) = scenario_by_name(spec) {
        return Ok(sc);
    }
    let path = Path::new(spec);
    if path.exists() {
        return Scenario::from_json(&std::fs::read_to_string(path)?);
    }
    Err(config_error(format!("unknown scenario `{spec}`")))
}

fn clock_seed() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
}

impl Args {
    fn sets_run_options(&self) -> bool {
        self.command.is_some()
            || self.data.is_some()
            || self.schema.is_some()
            || self.levels.is_some()
            || self.method.is_some()
            || !self.methods.is_empty()
            || self.link.is_some()
            || self.corr.is_some()
            || !self.ps_individual.is_empty()
            || !self.ps_cluster.is_empty()
            || self.ipw_formula.is_some()
            || self.em
            || self.no_em
            || self.bootstrap.is_some()
            || self.reps.is_some()
            || self.scenario.is_some()
    }

    /// Resolves defaults into a complete configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            if self.sets_run_options() {
                return Err(config_error("--config only combines with --out, --threads and --seed"));
            }
            let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let cfg = doc.get("config").cloned().unwrap_or(doc);
            let mut cfg: RunConfig =
                serde_json::from_value(cfg).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            if let Some(seed) = self.seed {
                cfg.seed = seed;
            }
            return Ok(cfg);
        }
        let command = self.command.ok_or_else(|| config_error("a command or --config is required"))?;
        let levels = self.levels.unwrap_or(2);
        let mut schema = match &self.schema {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?,
            None => Schema::default(),
        };
        if levels == 3 && schema.subcluster.is_none() {
            schema.subcluster = Some("subcluster".into());
        }
        let method = self.method.map(|m| match m {
            MethodArg::Cc => Method::Cc,
            MethodArg::Ipw => Method::Ipw,
            MethodArg::Mipw => Method::Mipw,
            MethodArg::Mmr => Method::Mmr,
        });
        let link = match self.link.unwrap_or(LinkArg::Identity) {
            LinkArg::Identity => Link::Identity,
            LinkArg::Logit => Link::Logit,
        };
        let corr = match self.corr.unwrap_or(CorrArg::Exch) {
            CorrArg::Ind => CorrStructure::Independence,
            CorrArg::Exch => CorrStructure::Exchangeable,
            CorrArg::Block => CorrStructure::BlockExchangeable,
        };
        let scenario = self.scenario.as_deref().map(load_scenario).transpose()?;
        let methods = if self.methods.is_empty() && command == Command::Study {
            ["cc", "ipw", "mipw-noem", "mipw-em", "mmr"].map(String::from).to_vec()
        } else {
            self.methods.clone()
        };
        if let Some(bad) = methods.iter().find(|m| !METHOD_NAMES.contains(&m.as_str())) {
            return Err(config_error(format!("unknown study method `{bad}`")));
        }
        let bootstrap = self.bootstrap.unwrap_or(match command {
            Command::Bootstrap => 200,
            Command::Study => 50,
            _ => 0,
        });
        let seed = self.seed.unwrap_or_else(|| {
            let s = clock_seed();
            log::info!("no seed given, using {s}");
            s
        });
        Ok(RunConfig {
            command,
            data: self.data.clone(),
            schema,
            levels,
            method,
            link,
            corr,
            ps_individual: expand_formulas(&self.ps_individual)?,
            ps_cluster: expand_formulas(&self.ps_cluster)?,
            ipw_formula: self.ipw_formula.clone(),
            em: !self.no_em,
            bootstrap,
            seed,
            reps: self.reps.unwrap_or(if command == Command::Study { 200 } else { 0 }),
            scenario,
            methods,
        })
    }
}
