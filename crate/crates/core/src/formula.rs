//! Propensity model formulas and design matrices.
//!
//! Grammar: `resp ~ term (+ term)*` where a term is `1`, `name`,
//! `name:name` or `name^2`. Whitespace is ignored.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Levels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FormulaLevel {
    Individual,
    Subcluster,
    Cluster,
}

impl fmt::Display for FormulaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FormulaLevel::Individual => "individual",
            FormulaLevel::Subcluster => "subcluster",
            FormulaLevel::Cluster => "cluster",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Main(String),
    Interaction(String, String),
    Square(String),
}

impl Term {
    fn variables(&self) -> Vec<&str> {
        match self {
            Term::Intercept => vec![],
            Term::Main(a) | Term::Square(a) => vec![a],
            Term::Interaction(a, b) => vec![a, b],
        }
    }

    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Interaction(a, b), Term::Interaction(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => self == other,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("1"),
            Term::Main(a) => f.write_str(a),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
            Term::Square(a) => write!(f, "{a}^2"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Formula {
    pub response: String,
    pub rhs_terms: Vec<Term>,
    pub level: FormulaLevel,
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        for (k, t) in self.rhs_terms.iter().enumerate() {
            if k > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl Formula {
    pub fn with_level(mut self, level: FormulaLevel) -> Self {
        self.level = level;
        self
    }

    pub fn column_names(&self) -> Vec<String> {
        self.rhs_terms
            .iter()
            .map(|t| match t {
                Term::Intercept => "(Intercept)".to_string(),
                t => t.to_string(),
            })
            .collect()
    }
}

impl Serialize for Formula {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(is_name_char)
        && !s.chars().next().unwrap().is_ascii_digit()
}

/// Parses a formula. The level defaults to `Individual`; callers attach the
/// intended level with [`Formula::with_level`].
pub fn parse_formula(text: &str) -> Result<Formula> {
    let syntax = |position: usize, message: &str| Error::Syntax { position, message: message.into() };
    let tilde = text.find('~').ok_or_else(|| syntax(0, "expected `~`"))?;
    let response: String = text[..tilde].chars().filter(|c| !c.is_whitespace()).collect();
    if !valid_name(&response) {
        return Err(syntax(0, "invalid response name"));
    }
    let mut terms: Vec<Term> = Vec::new();
    let mut start = tilde + 1;
    let rhs = &text[start..];
    for piece in rhs.split('+') {
        let pos = start + piece.len() - piece.trim_start().len();
        start += piece.len() + 1;
        let t: String = piece.chars().filter(|c| !c.is_whitespace()).collect();
        if t.is_empty() {
            return Err(syntax(pos, "empty term"));
        }
        let term = if t == "1" {
            Term::Intercept
        } else if let Some(base) = t.strip_suffix("^2") {
            if !valid_name(base) {
                return Err(syntax(pos, "invalid squared term"));
            }
            Term::Square(base.into())
        } else if let Some((a, b)) = t.split_once(':') {
            if !valid_name(a) || !valid_name(b) || a == b {
                return Err(syntax(pos, "invalid interaction"));
            }
            Term::Interaction(a.into(), b.into())
        } else if valid_name(&t) {
            Term::Main(t)
        } else {
            return Err(syntax(pos, "invalid term"));
        };
        if terms.iter().any(|x| x.same_as(&term)) {
            return Err(Error::DuplicateTerm(term.to_string()));
        }
        terms.push(term);
    }
    Ok(Formula { response, rhs_terms: terms, level: FormulaLevel::Individual })
}

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
    pub column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DesignMatrix {
            nrows: rows.len(),
            ncols,
            data,
            column_names: (0..ncols).map(|k| format!("x{k}")).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    /// Linear predictor `X b`.
    pub fn mul_vec(&self, b: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.ncols.max(1))
            .take(self.nrows)
            .map(|r| r.iter().zip(b).map(|(x, c)| x * c).sum())
            .collect()
    }
}

/// Row index lists for the formula level: one row per unit, per subcluster
/// or per cluster, each represented by its first unit.
fn level_representatives(ds: &ClusteredDataset, level: FormulaLevel) -> Result<Vec<usize>> {
    Ok(match level {
        FormulaLevel::Individual => (0..ds.n_units()).collect(),
        FormulaLevel::Subcluster => {
            if ds.levels() != Levels::Three {
                return Err(Error::Config("subcluster-level formula requires three-level data".into()));
            }
            (0..ds.n_groups()).map(|g| ds.group_units(g)[0]).collect()
        }
        FormulaLevel::Cluster => (0..ds.n_clusters()).map(|i| ds.cluster_units(i)[0]).collect(),
    })
}

pub fn build_design_matrix(f: &Formula, ds: &ClusteredDataset) -> Result<DesignMatrix> {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let fetch = |name: &str| -> Result<Vec<f64>> {
        let level = ds.variable_level(name).ok_or_else(|| Error::UnknownVariable(name.into()))?;
        if level < f.level {
            return Err(Error::LevelViolation { variable: name.into(), level: f.level.to_string() });
        }
        Ok(ds.variable(name).unwrap())
    };
    for t in &f.rhs_terms {
        for v in t.variables() {
            if !columns.iter().any(|(n, _)| n == v) {
                columns.push((v.to_string(), fetch(v)?));
            }
        }
    }
    let get = |name: &str| &columns.iter().find(|(n, _)| n == name).unwrap().1;
    let rows = level_representatives(ds, f.level)?;
    let p = f.rhs_terms.len();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &u in &rows {
        for t in &f.rhs_terms {
            data.push(match t {
                Term::Intercept => 1.0,
                Term::Main(a) => get(a)[u],
                Term::Interaction(a, b) => get(a)[u] * get(b)[u],
                Term::Square(a) => get(a)[u] * get(a)[u],
            });
        }
    }
    Ok(DesignMatrix { nrows: rows.len(), ncols: p, data, column_names: f.column_names() })
}
