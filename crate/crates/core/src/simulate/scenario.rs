use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeLaw {
    Fixed(usize),
    DiscreteUniform(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub beta_i: f64,
    pub beta_a: f64,
    pub beta_z: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_az: Vec<f64>,
    pub beta_ax: Vec<f64>,
}

/// True propensity coefficients, in the column order of the first
/// (correctly specified) cluster and individual formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsParams {
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Child-nutrition style covariates.
///
/// Cluster level: household size, education, wealth, complementary food.
/// Individual level: sex, iron product use, age (months), wasting, stunting
/// and underweight z-scores, hemoglobin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullCovariates {
    pub household_size: [i64; 2],
    pub p_education: f64,
    pub p_wealth: f64,
    pub p_comp_food: f64,
    pub p_male: f64,
    pub age: TruncNormal,
    /// Wasting, stunting, underweight.
    pub zscore_means: [f64; 3],
    pub zscore_sds: [f64; 3],
    pub zscore_corr: f64,
    pub hemoglobin: [f64; 2],
    pub iron_prob: f64,
    pub iron_cluster_sd: f64,
}

/// `X1..X3` equicorrelated normals, `X4 = X1^2 - E[X1^2]`, `Z1, Z2` cluster
/// means of `X1, X2`, `Z3` Poisson, `Z4` normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AltCovariates {
    pub x_sds: [f64; 3],
    pub x_corr: f64,
    pub z3_rate: f64,
    pub z4_mean: f64,
    pub z4_sd: f64,
}

/// Synthetic three-level design: cluster covariate `Z ~ N(0,1)`, subcluster
/// binary `S`, unit covariate `X ~ N(0,1)`. `S` drives missingness only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeLevelCovariates {
    pub subclusters: SizeLaw,
    pub p_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    Null(NullCovariates),
    Alternative(AltCovariates),
    ThreeLevel(ThreeLevelCovariates),
}

/// Candidate propensity formulas; the first entry of each list is the
/// correctly specified model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioModels {
    pub ps_individual: Vec<String>,
    pub ps_cluster: Vec<String>,
    pub ipw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub m: usize,
    /// Units per cluster (per subcluster for three-level designs).
    pub cluster_size: SizeLaw,
    pub icc: f64,
    pub sigma_eps2: f64,
    pub outcome: OutcomeParams,
    pub ps: PsParams,
    pub covariates: CovariateLaw,
    pub models: ScenarioModels,
    pub truth: [f64; 2],
}

impl Scenario {
    pub fn sigma_delta2(&self) -> f64 {
        self.icc * self.sigma_eps2 / (1.0 - self.icc)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

fn null_covariates() -> NullCovariates {
    NullCovariates {
        household_size: [2, 10],
        p_education: 0.67,
        p_wealth: 0.51,
        p_comp_food: 0.875,
        p_male: 0.51,
        age: TruncNormal { mean: 19.7, sd: 8.6, lower: 6.0, upper: 46.0 },
        zscore_means: [-0.63, -0.89, -0.92],
        zscore_sds: [0.98, 1.2, 0.98],
        zscore_corr: 0.1,
        hemoglobin: [10.3, 1.3],
        iron_prob: 0.0235,
        iron_cluster_sd: 0.05,
    }
}

fn null_scenario(name: &str, m: usize, size: SizeLaw, icc: f64, sigma_eps2: f64) -> Scenario {
    Scenario {
        name: name.into(),
        m,
        cluster_size: size,
        icc,
        sigma_eps2,
        outcome: OutcomeParams {
            beta_i: 43.5,
            beta_a: 0.5,
            beta_z: vec![0.5, 0.8, 0.7],
            beta_x: vec![0.8, 1.5, -0.5],
            beta_az: vec![0.3, -1.5, 0.2],
            beta_ax: vec![-0.1, 0.5, -1.1],
        },
        ps: PsParams {
            gamma: vec![1.10, -0.29, 0.18, -0.29, -0.22, 0.26, -0.51, -0.36],
            eta: vec![1.73, -0.36, 0.10, -0.11, 0.18, -0.36, 0.41],
        },
        covariates: CovariateLaw::Null(null_covariates()),
        models: ScenarioModels {
            ps_individual: vec![
                "R ~ 1 + A + comp_food + wasting + stunting + A:wasting + A:stunting".into(),
                "R ~ 1 + A + comp_food + age + underweight".into(),
            ],
            ps_cluster: vec![
                "C ~ 1 + A + hh_size + education + wealth + A:hh_size + A:education + A:wealth".into(),
                "C ~ 1 + A + comp_food + A:comp_food".into(),
            ],
            ipw: "R ~ 1 + A + comp_food + wasting + stunting + A:wasting + A:stunting".into(),
        },
        truth: [63.5, 0.0],
    }
}

fn alt_scenario(name: &str, m: usize, size: SizeLaw, icc: f64, sigma_eps2: f64) -> Scenario {
    Scenario {
        name: name.into(),
        m,
        cluster_size: size,
        icc,
        sigma_eps2,
        outcome: OutcomeParams {
            beta_i: 0.0,
            beta_a: 1.5,
            beta_z: vec![2.0, -2.5, 1.0, -1.0],
            beta_x: vec![1.0, 1.2, 0.5, -0.5],
            beta_az: vec![0.8, -0.4, 1.0, -1.0],
            beta_ax: vec![0.5, 0.3, 1.0, -1.0],
        },
        ps: PsParams {
            gamma: vec![2.44, 0.18, 0.12, -0.39, -0.22, -0.29],
            eta: vec![1.73, -0.22, -0.16, 0.18, 0.26, 0.03, 0.18, -0.05, 0.18, 0.26, -0.22, -0.29],
        },
        covariates: CovariateLaw::Alternative(AltCovariates {
            x_sds: [1.0, 1.2, 0.8],
            x_corr: 0.1,
            z3_rate: 1.2,
            z4_mean: 1.2,
            z4_sd: 1.0,
        }),
        models: ScenarioModels {
            ps_individual: vec![
                "R ~ 1 + A + Z3 + X1 + X2 + X3 + X4 + A:Z3 + A:X1 + A:X2 + A:X3 + A:X4".into(),
                "R ~ 1 + A + X2 + A:X2 + Z1 + A:Z1".into(),
            ],
            ps_cluster: vec!["C ~ 1 + A + Z3 + Z4 + A:Z3 + A:Z4".into(), "C ~ 1 + A + Z1 + A:Z1".into()],
            ipw: "R ~ 1 + A + Z3 + X1 + X2 + X3 + X4 + A:Z3 + A:X1 + A:X2 + A:X3 + A:X4".into(),
        },
        truth: [0.0, 1.5],
    }
}

/// Synthetic three-level scenario used by the property tests.
pub fn three_level_scenario() -> Scenario {
    Scenario {
        name: "three-level-synthetic".into(),
        m: 40,
        cluster_size: SizeLaw::DiscreteUniform(1, 4),
        icc: 0.1,
        sigma_eps2: 1.0,
        outcome: OutcomeParams {
            beta_i: 1.0,
            beta_a: 0.5,
            beta_z: vec![0.7],
            beta_x: vec![1.0],
            beta_az: vec![0.3],
            beta_ax: vec![-0.4],
        },
        ps: PsParams { gamma: vec![1.5, -0.3, 0.4, -0.8], eta: vec![1.0, 0.2, 0.5] },
        covariates: CovariateLaw::ThreeLevel(ThreeLevelCovariates {
            subclusters: SizeLaw::DiscreteUniform(2, 5),
            p_s: 0.5,
        }),
        models: ScenarioModels {
            ps_individual: vec!["R ~ 1 + A + X".into(), "R ~ 1 + A".into()],
            ps_cluster: vec!["C ~ 1 + A + Z + S".into(), "C ~ 1 + A".into()],
            ipw: "R ~ 1 + A + X".into(),
        },
        truth: [1.0, 0.5],
    }
}

/// The six two-level scenarios plus the synthetic three-level one.
pub fn builtin_scenarios() -> Vec<Scenario> {
    use SizeLaw::*;
    vec![
        null_scenario("null-du15", 1552, DiscreteUniform(1, 5), 0.0804, 0.5),
        null_scenario("null-n3", 1552, Fixed(3), 0.0804, 0.5),
        null_scenario("null-du3050", 300, DiscreteUniform(30, 50), 0.2, 5.0),
        alt_scenario("alt-du14", 1552, DiscreteUniform(1, 4), 0.0804, 0.5),
        alt_scenario("alt-n3", 1552, Fixed(3), 0.2, 5.0),
        alt_scenario("alt-du3050", 300, DiscreteUniform(30, 50), 0.2, 5.0),
        three_level_scenario(),
    ]
}

pub fn scenario_by_name(name: &str) -> Option<Scenario> {
    builtin_scenarios().into_iter().find(|s| s.name == name)
}
