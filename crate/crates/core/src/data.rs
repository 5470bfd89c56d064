//! Clustered trial data, CSV ingestion and missingness indicators.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::FormulaLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Levels {
    /// Units nested in clusters.
    Two,
    /// Units nested in subclusters nested in clusters.
    Three,
}

/// One row of input data.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub cluster_id: String,
    pub subcluster_id: Option<String>,
    pub unit_id: String,
    pub treatment: u8,
    pub outcome: Option<f64>,
    pub covariates: BTreeMap<String, f64>,
}

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub cluster: String,
    pub subcluster: Option<String>,
    pub id: String,
    pub treatment: String,
    pub outcome: String,
    /// `None` means every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            cluster: "cluster".into(),
            subcluster: None,
            id: "id".into(),
            treatment: "A".into(),
            outcome: "Y".into(),
            covariates: None,
        }
    }
}

/// Immutable clustered dataset stored column-wise.
///
/// Clusters and subclusters get internal indices in order of first
/// appearance. A "group" is the level at which the cluster-level missingness
/// indicator lives: the cluster for two-level data and the subcluster for
/// three-level data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    levels: Levels,
    treatment_name: String,
    outcome_name: String,
    covariate_names: Vec<String>,
    cluster_ids: Vec<String>,
    group_ids: Vec<String>,
    unit_ids: Vec<String>,
    unit_cluster: Vec<usize>,
    unit_group: Vec<usize>,
    group_cluster: Vec<usize>,
    treatment: Vec<u8>,
    outcome: Vec<Option<f64>>,
    covariates: Vec<Vec<f64>>,
    cluster_units: Vec<Vec<usize>>,
    group_units: Vec<Vec<usize>>,
    cluster_groups: Vec<Vec<usize>>,
}

impl ClusteredDataset {
    pub fn from_units(
        levels: Levels,
        treatment_name: &str,
        outcome_name: &str,
        covariate_names: Vec<String>,
        units: Vec<UnitRecord>,
    ) -> Result<Self> {
        let mut b = Builder::new(levels, treatment_name, outcome_name, covariate_names);
        for (row, u) in units.into_iter().enumerate() {
            let mut cov = Vec::with_capacity(b.covariate_names.len());
            for name in &b.covariate_names {
                match u.covariates.get(name) {
                    Some(v) if v.is_finite() => cov.push(*v),
                    _ => return Err(Error::MissingCovariateCell { row, col: name.clone() }),
                }
            }
            b.push(row, u.cluster_id, u.subcluster_id, u.unit_id, u.treatment, u.outcome, &cov)?;
        }
        b.finish()
    }

    pub fn levels(&self) -> Levels {
        self.levels
    }
    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }
    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }
    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }
    pub fn n_groups(&self) -> usize {
        self.group_ids.len()
    }
    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }
    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }
    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }
    pub fn unit_cluster(&self) -> &[usize] {
        &self.unit_cluster
    }
    pub fn unit_group(&self) -> &[usize] {
        &self.unit_group
    }
    pub fn group_cluster(&self) -> &[usize] {
        &self.group_cluster
    }
    pub fn cluster_units(&self, i: usize) -> &[usize] {
        &self.cluster_units[i]
    }
    pub fn group_units(&self, g: usize) -> &[usize] {
        &self.group_units[g]
    }
    pub fn cluster_groups(&self, i: usize) -> &[usize] {
        &self.cluster_groups[i]
    }
    pub fn cluster_treatment(&self, i: usize) -> u8 {
        self.treatment[i]
    }
    pub fn unit_treatment(&self, u: usize) -> u8 {
        self.treatment[self.unit_cluster[u]]
    }
    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.outcome
    }
    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        let k = self.covariate_names.iter().position(|c| c == name)?;
        Some(&self.covariates[k])
    }

    /// Per-unit values of a variable usable in formulas: the treatment or a covariate.
    pub fn variable(&self, name: &str) -> Option<Vec<f64>> {
        if name == self.treatment_name {
            return Some((0..self.n_units()).map(|u| self.unit_treatment(u) as f64).collect());
        }
        self.covariate(name).map(|c| c.to_vec())
    }

    /// Highest nesting level at which `name` is constant.
    pub fn variable_level(&self, name: &str) -> Option<FormulaLevel> {
        if name == self.treatment_name {
            return Some(FormulaLevel::Cluster);
        }
        let col = self.covariate(name)?;
        let constant_within = |sets: &[Vec<usize>]| {
            sets.iter().all(|units| units.iter().all(|&u| col[u] == col[units[0]]))
        };
        if constant_within(&self.cluster_units) {
            Some(FormulaLevel::Cluster)
        } else if self.levels == Levels::Three && constant_within(&self.group_units) {
            Some(FormulaLevel::Subcluster)
        } else {
            Some(FormulaLevel::Individual)
        }
    }

    /// Level at which the cluster-level propensity model is evaluated.
    pub fn group_level(&self) -> FormulaLevel {
        match self.levels {
            Levels::Two => FormulaLevel::Cluster,
            Levels::Three => FormulaLevel::Subcluster,
        }
    }

    pub fn to_units(&self) -> Vec<UnitRecord> {
        (0..self.n_units())
            .map(|u| UnitRecord {
                cluster_id: self.cluster_ids[self.unit_cluster[u]].clone(),
                subcluster_id: match self.levels {
                    Levels::Two => None,
                    Levels::Three => Some(self.group_ids[self.unit_group[u]].clone()),
                },
                unit_id: self.unit_ids[u].clone(),
                treatment: self.unit_treatment(u),
                outcome: self.outcome[u],
                covariates: self
                    .covariate_names
                    .iter()
                    .zip(&self.covariates)
                    .map(|(n, c)| (n.clone(), c[u]))
                    .collect(),
            })
            .collect()
    }

    /// Dataset made of the listed clusters (repeats allowed), each given a
    /// fresh cluster id so duplicates stay distinct.
    pub fn select_clusters(&self, clusters: &[usize]) -> ClusteredDataset {
        let mut b = Builder::new(
            self.levels,
            &self.treatment_name,
            &self.outcome_name,
            self.covariate_names.clone(),
        );
        let mut cov = vec![0.0; self.covariate_names.len()];
        for (k, &i) in clusters.iter().enumerate() {
            let cid = format!("{}#{}", self.cluster_ids[i], k);
            for &u in &self.cluster_units[i] {
                for (c, col) in cov.iter_mut().zip(&self.covariates) {
                    *c = col[u];
                }
                let sub = match self.levels {
                    Levels::Two => None,
                    Levels::Three => Some(self.group_ids[self.unit_group[u]].clone()),
                };
                b.push_unchecked(
                    cid.clone(),
                    sub,
                    self.unit_ids[u].clone(),
                    self.treatment[i],
                    self.outcome[u],
                    &cov,
                );
            }
        }
        b.finish_unchecked()
    }
}

/// Incremental dataset construction shared by the CSV reader, the simulator
/// and the bootstrap.
pub(crate) struct Builder {
    levels: Levels,
    treatment_name: String,
    covariate_names: Vec<String>,
    cluster_index: HashMap<String, usize>,
    group_index: HashMap<(usize, String), usize>,
    seen_units: HashSet<(usize, String)>,
    ds: ClusteredDataset,
}

impl Builder {
    pub(crate) fn new(
        levels: Levels,
        treatment_name: &str,
        outcome_name: &str,
        covariate_names: Vec<String>,
    ) -> Self {
        let ncov = covariate_names.len();
        Builder {
            levels,
            treatment_name: treatment_name.into(),
            covariate_names: covariate_names.clone(),
            cluster_index: HashMap::new(),
            group_index: HashMap::new(),
            seen_units: HashSet::new(),
            ds: ClusteredDataset {
                levels,
                treatment_name: treatment_name.into(),
                outcome_name: outcome_name.into(),
                covariate_names,
                cluster_ids: Vec::new(),
                group_ids: Vec::new(),
                unit_ids: Vec::new(),
                unit_cluster: Vec::new(),
                unit_group: Vec::new(),
                group_cluster: Vec::new(),
                treatment: Vec::new(),
                outcome: Vec::new(),
                covariates: vec![Vec::new(); ncov],
                cluster_units: Vec::new(),
                group_units: Vec::new(),
                cluster_groups: Vec::new(),
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        row: usize,
        cluster_id: String,
        subcluster_id: Option<String>,
        unit_id: String,
        treatment: u8,
        outcome: Option<f64>,
        covariates: &[f64],
    ) -> Result<()> {
        if treatment > 1 {
            return Err(Error::InvalidValue {
                row,
                col: self.treatment_name.clone(),
                value: treatment.to_string(),
            });
        }
        if self.levels == Levels::Three && subcluster_id.is_none() {
            return Err(Error::MissingSubcluster(row));
        }
        if let Some(&i) = self.cluster_index.get(&cluster_id) {
            if self.ds.treatment[i] != treatment {
                return Err(Error::TreatmentNotClusterConstant(cluster_id));
            }
            if !self.seen_units.insert((i, unit_id.clone())) {
                return Err(Error::DuplicateUnitId(unit_id));
            }
        } else {
            self.seen_units.insert((self.ds.cluster_ids.len(), unit_id.clone()));
        }
        self.push_unchecked(cluster_id, subcluster_id, unit_id, treatment, outcome, covariates);
        Ok(())
    }

    pub(crate) fn push_unchecked(
        &mut self,
        cluster_id: String,
        subcluster_id: Option<String>,
        unit_id: String,
        treatment: u8,
        outcome: Option<f64>,
        covariates: &[f64],
    ) {
        let ds = &mut self.ds;
        let u = ds.unit_ids.len();
        let i = match self.cluster_index.get(&cluster_id) {
            Some(&i) => i,
            None => {
                let i = ds.cluster_ids.len();
                self.cluster_index.insert(cluster_id.clone(), i);
                ds.cluster_ids.push(cluster_id.clone());
                ds.treatment.push(treatment);
                ds.cluster_units.push(Vec::new());
                ds.cluster_groups.push(Vec::new());
                i
            }
        };
        let gkey = subcluster_id.unwrap_or_else(|| cluster_id.clone());
        let g = match self.group_index.get(&(i, gkey.clone())) {
            Some(&g) => g,
            None => {
                let g = ds.group_ids.len();
                ds.group_ids.push(gkey.clone());
                ds.group_cluster.push(i);
                ds.group_units.push(Vec::new());
                ds.cluster_groups[i].push(g);
                self.group_index.insert((i, gkey), g);
                g
            }
        };
        ds.unit_ids.push(unit_id);
        ds.unit_cluster.push(i);
        ds.unit_group.push(g);
        ds.outcome.push(outcome);
        for (col, &v) in ds.covariates.iter_mut().zip(covariates) {
            col.push(v);
        }
        ds.cluster_units[i].push(u);
        ds.group_units[g].push(u);
    }

    pub(crate) fn finish(self) -> Result<ClusteredDataset> {
        if self.ds.unit_ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(self.finish_unchecked())
    }

    pub(crate) fn finish_unchecked(self) -> ClusteredDataset {
        self.ds
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

/// Reads a CSV file into a dataset.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema, levels: Levels) -> Result<ClusteredDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema, levels)
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema, levels: Levels) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let ci = col(&schema.cluster)?;
    let si = match (levels, &schema.subcluster) {
        (Levels::Three, Some(s)) => Some(col(s)?),
        (Levels::Three, None) => Some(col("subcluster")?),
        (Levels::Two, _) => None,
    };
    let ii = col(&schema.id)?;
    let ti = col(&schema.treatment)?;
    let yi = col(&schema.outcome)?;
    let reserved: Vec<usize> = [Some(ci), si, Some(ii), Some(ti), Some(yi)].into_iter().flatten().collect();
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(k, h)| !reserved.contains(k) && h.as_str() != "subcluster")
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_idx = covariate_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    let mut b = Builder::new(levels, &schema.treatment, &schema.outcome, covariate_names.clone());
    let mut cov = vec![0.0; cov_idx.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let treatment = match parse_number(field(ti)) {
            Some(v) if v == 0.0 || v == 1.0 => v as u8,
            _ => {
                return Err(Error::InvalidValue {
                    row,
                    col: schema.treatment.clone(),
                    value: field(ti).to_string(),
                })
            }
        };
        let outcome = if is_missing(field(yi)) {
            None
        } else {
            Some(parse_number(field(yi)).ok_or_else(|| Error::InvalidValue {
                row,
                col: schema.outcome.clone(),
                value: field(yi).to_string(),
            })?)
        };
        for ((c, &k), name) in cov.iter_mut().zip(&cov_idx).zip(&covariate_names) {
            if is_missing(field(k)) {
                return Err(Error::MissingCovariateCell { row, col: name.clone() });
            }
            *c = parse_number(field(k)).ok_or_else(|| Error::InvalidValue {
                row,
                col: name.clone(),
                value: field(k).to_string(),
            })?;
        }
        let sub = si.map(|k| field(k).to_string());
        if let Some(s) = &sub {
            if s.is_empty() {
                return Err(Error::MissingSubcluster(row));
            }
        }
        b.push(row, field(ci).to_string(), sub, field(ii).to_string(), treatment, outcome, &cov)?;
    }
    b.finish()
}

/// Writes the dataset as CSV with columns
/// `cluster[,subcluster],id,<treatment>,<outcome>,<covariates...>`.
pub fn write_dataset<W: Write>(ds: &ClusteredDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_string()];
    if ds.levels == Levels::Three {
        header.push("subcluster".into());
    }
    header.push("id".into());
    header.push(ds.treatment_name.clone());
    header.push(ds.outcome_name.clone());
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for u in 0..ds.n_units() {
        let mut rec = vec![ds.cluster_ids[ds.unit_cluster[u]].clone()];
        if ds.levels == Levels::Three {
            rec.push(ds.group_ids[ds.unit_group[u]].clone());
        }
        rec.push(ds.unit_ids[u].clone());
        rec.push(ds.unit_treatment(u).to_string());
        rec.push(ds.outcome[u].map(|y| y.to_string()).unwrap_or_default());
        rec.extend(ds.covariates.iter().map(|c| c[u].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Observation indicators derived from outcome presence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingnessSummary {
    /// R per unit.
    pub r: Vec<u8>,
    /// Observed cluster-level indicator per group.
    pub c_obs: Vec<u8>,
    /// Number of groups with `c_obs = 1`.
    pub s: usize,
    /// Observed outcome count per group.
    pub m: Vec<usize>,
}

impl MissingnessSummary {
    pub fn n_observed(&self) -> usize {
        self.m.iter().sum()
    }
}

pub fn derive_missingness(ds: &ClusteredDataset) -> MissingnessSummary {
    let r: Vec<u8> = ds.outcome.iter().map(|y| y.is_some() as u8).collect();
    let m: Vec<usize> = ds
        .group_units
        .iter()
        .map(|units| units.iter().filter(|&&u| r[u] == 1).count())
        .collect();
    let c_obs: Vec<u8> = m.iter().map(|&k| (k > 0) as u8).collect();
    let s = c_obs.iter().map(|&c| c as usize).sum();
    MissingnessSummary { r, c_obs, s, m }
}
