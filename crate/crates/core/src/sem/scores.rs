//! Per-subject latent scores from a fitted model, in reference-indicator units.

use nalgebra::DVector;

use super::fit::SemFit;
use crate::cohort::CohortTable;
use crate::error::{MegaError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// `nu_ref + Gamma z`; uses covariates only.
    #[default]
    LinearPrediction,
    /// Conditional mean of the latent given indicators and covariates.
    RegressionScore,
}

impl ScoreMode {
    pub fn key(self) -> &'static str {
        match self {
            ScoreMode::LinearPrediction => "linear",
            ScoreMode::RegressionScore => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "linear_prediction" => Ok(ScoreMode::LinearPrediction),
            "regression" | "regression_score" => Ok(ScoreMode::RegressionScore),
            other => Err(MegaError::InvalidArgument(format!("unknown score mode `{other}`"))),
        }
    }
}

/// Scores for `latent`; `None` for rows with a missing input.
pub fn latent_scores(fit: &SemFit, latent: &str, data: &CohortTable, mode: ScoreMode) -> Result<Vec<Option<f64>>> {
    let model = &fit.model;
    let a = model.latent_index(latent)?;
    if mode == ScoreMode::LinearPrediction && !model.is_latent_on_covariates() {
        return Err(MegaError::InvalidArgument(
            "linear prediction needs a model with the latent regressed on covariates".into(),
        ));
    }
    let exo: Vec<&[Option<f64>]> = model
        .exogenous
        .iter()
        .map(|c| data.column(c).map(|c| c.values()))
        .collect::<Result<_>>()?;
    let obs: Vec<&[Option<f64>]> = if mode == ScoreMode::RegressionScore {
        model
            .observed
            .iter()
            .map(|c| data.column(c).map(|c| c.values()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let m = &fit.matrices;
    let nu_ref = fit.intercepts[model.reference_rows[a]];
    let pi = m.pi();
    let weights = if mode == ScoreMode::RegressionScore {
        let sigma_pinv = linalg::pinv_symmetric(&m.sigma(), 1e-12);
        Some((&m.psi * m.lambda.transpose() * sigma_pinv).row(a).transpose())
    } else {
        None
    };
    let mut out = Vec::with_capacity(data.n_rows());
    for i in 0..data.n_rows() {
        let z: Option<Vec<f64>> = exo.iter().map(|c| c[i]).collect();
        let Some(z) = z else {
            out.push(None);
            continue;
        };
        let z = DVector::from_vec(z);
        let mut score = nu_ref + (m.gamma.row(a) * &z)[0];
        if let Some(w) = &weights {
            let v: Option<Vec<f64>> = obs.iter().map(|c| c[i]).collect();
            let Some(v) = v else {
                out.push(None);
                continue;
            };
            let resid = DVector::from_vec(v) - &fit.intercepts - &pi * &z;
            score += w.dot(&resid);
        }
        out.push(Some(score));
    }
    Ok(out)
}
