//! Aggregating several epigenetic clocks into one latent aging measure,
//! plus the regression, exposure and regression-discontinuity analyses
//! that consume it.
//!
//! The three index estimators live in [`aggregation`] (inverse-covariance
//! weighting and factor weighting) and [`sem`] (MIMIC maximum likelihood).
//! [`simulator`] generates cohorts with known truth for all of them.

// `!(x < bound)` is used on purpose so that NaN lands on the failing side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod cohort;
pub mod config;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod montecarlo;
pub mod rdd;
pub mod report;
pub mod sem;
pub mod simulator;

pub use aggregation::{
    build_index, efa, efa_with, factor_weights, index_scores, leave_one_out, mega_fa, mega_wgt,
    sample_covariance, sample_covariance_with, weighted_index_weights, ClockPanel, CovarianceEstimate,
    Denominator, EfaOptions, Extraction, FactorSolution, IndexResult, KaiserBasis, MegaWeights, Method,
};
pub use cohort::{
    combine_raters, dichotomize, load_cohort, prevalence_table, read_cohort, AbuseIndicator, AbuseKind,
    AbuseRule, CohortTable, Column, ColumnKind, LoadReport, Period, Rater, RaterSet, Schema,
};
pub use error::{ErrorClass, MegaError, Result};
pub use inference::{
    age_acceleration, constrained_sur_gls, ols, ols_fit, ControlSet, Estimate, LinearModelSpec, RegressionFit,
    RowFilter, SeType, SurCovariance, WaldTest,
};
pub use montecarlo::{sem_coverage, CoverageSummary};
pub use rdd::{rdd_fit, rdd_heterogeneity, Heterogeneity, HeterogeneityMode, RddFit, RddSpec, RddTable};
pub use report::RegressionTable;
pub use sem::{
    build_mimic, fit_sem, latent_scores, parse_model_spec, rescale_reference, LatentBlock, ScoreMode, SemFit,
    SemModel, SemOptions, SemSe, Structural,
};
pub use simulator::SimConfig;
