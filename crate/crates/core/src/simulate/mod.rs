//! Data-generating processes and Monte Carlo studies.

mod generate;
mod scenario;
mod study;

pub use generate::{
    generate_dataset, generate_with_rng, GeneratedData, ALT_COVARIATES, NULL_COVARIATES, THREE_LEVEL_COVARIATES,
};
pub use scenario::{
    builtin_scenarios, scenario_by_name, three_level_scenario, AltCovariates, CovariateLaw, NullCovariates,
    OutcomeParams, PsParams, Scenario, ScenarioModels, SizeLaw, ThreeLevelCovariates, TruncNormal,
};
pub use study::{ps_parameter_bias, run_study, study_method, ParamBias, StudyMethod, StudySummary, METHOD_NAMES};
