//! Least squares with classical and HC1 standard errors, age acceleration,
//! the outcome/exposure regression specifications, and the stacked
//! constrained SUR-GLS estimator behind the weighted index.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::aggregation::{sample_covariance, ClockPanel};
use crate::cohort::{CohortTable, ColumnKind};
use crate::error::{MegaError, Result};
use crate::linalg::{self, PivotedQr};
use crate::report::{csv_bytes, stars};

/// Name given to the intercept column.
pub const INTERCEPT: &str = "_cons";

/// Relative rank tolerance for the pivoted QR.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeType {
    #[default]
    Classical,
    Hc1,
}

impl SeType {
    pub fn key(self) -> &'static str {
        match self {
            SeType::Classical => "classical",
            SeType::Hc1 => "hc1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classical" | "ols" => Ok(SeType::Classical),
            "hc1" | "robust" => Ok(SeType::Hc1),
            other => Err(MegaError::InvalidArgument(format!("unknown standard error type `{other}`"))),
        }
    }
}

/// Restricts the estimation sample before listwise deletion.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RowFilter {
    #[default]
    All,
    Equals { column: String, value: f64 },
    InRange { column: String, lo: f64, hi: f64 },
}

impl RowFilter {
    fn keep(&self, data: &CohortTable) -> Result<Vec<bool>> {
        let test = |column: &str, f: &dyn Fn(f64) -> bool| -> Result<Vec<bool>> {
            let col = data.column(column)?;
            Ok(col.values().iter().map(|v| v.is_some_and(f)).collect())
        };
        match self {
            RowFilter::All => Ok(vec![true; data.n_rows()]),
            RowFilter::Equals { column, value } => test(column, &|v| v == *value),
            RowFilter::InRange { column, lo, hi } => test(column, &|v| v >= *lo && v <= *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub intercept: bool,
    pub se_type: SeType,
    pub filter: RowFilter,
}

impl LinearModelSpec {
    pub fn new<S: AsRef<str>>(outcome: &str, regressors: &[S]) -> Result<Self> {
        let regressors: Vec<String> = regressors.iter().map(|s| s.as_ref().to_string()).collect();
        for (i, r) in regressors.iter().enumerate() {
            if regressors[..i].contains(r) || r == outcome {
                return Err(MegaError::InvalidArgument(format!("regressor `{r}` listed twice")));
            }
        }
        Ok(LinearModelSpec {
            outcome: outcome.to_string(),
            regressors,
            intercept: true,
            se_type: SeType::Classical,
            filter: RowFilter::All,
        })
    }

    pub fn with_se(mut self, se_type: SeType) -> Self {
        self.se_type = se_type;
        self
    }

    pub fn without_intercept(mut self) -> Self {
        self.intercept = false;
        self
    }

    pub fn with_filter(mut self, filter: RowFilter) -> Self {
        self.filter = filter;
        self
    }

    pub fn with_regressors<S: AsRef<str>>(&self, extra: &[S]) -> Result<Self> {
        let mut all = self.regressors.clone();
        all.extend(extra.iter().map(|s| s.as_ref().to_string()));
        let mut out = Self::new(&self.outcome, &all)?;
        out.intercept = self.intercept;
        out.se_type = self.se_type;
        out.filter = self.filter.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub outcome: String,
    /// Expanded regressor names, intercept first when present.
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub t_stats: DVector<f64>,
    pub p_values: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub n: usize,
    pub r2: f64,
    pub adj_r2: f64,
    pub residuals: DVector<f64>,
    pub se_type: SeType,
}

impl RegressionFit {
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    pub fn df_resid(&self) -> usize {
        self.n - self.k()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MegaError::UnknownColumn(name.to_string()))
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients[self.index(name)?])
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        Ok(self.std_errors[self.index(name)?])
    }

    pub fn p_value(&self, name: &str) -> Result<f64> {
        Ok(self.p_values[self.index(name)?])
    }

    /// `a' beta` with its standard error from the coefficient covariance.
    pub fn linear_combination(&self, a: &DVector<f64>) -> Result<Estimate> {
        if a.len() != self.k() {
            return Err(MegaError::DimensionMismatch("combination length differs from coefficients".into()));
        }
        let estimate = a.dot(&self.coefficients);
        let se = (a.transpose() * &self.vcov * a)[(0, 0)].max(0.0).sqrt();
        Ok(Estimate::new(estimate, se, self.df_resid()))
    }

    /// Wald test of `R beta = q`, chi-square with `rows(R)` degrees of freedom.
    pub fn wald(&self, r: &DMatrix<f64>, q: &DVector<f64>) -> Result<WaldTest> {
        if r.ncols() != self.k() || r.nrows() != q.len() || r.nrows() == 0 {
            return Err(MegaError::DimensionMismatch("restriction matrix shape".into()));
        }
        let diff = r * &self.coefficients - q;
        let v = r * &self.vcov * r.transpose();
        let vinv = linalg::spd_inverse(&v)?;
        let statistic = (diff.transpose() * vinv * &diff)[(0, 0)];
        let df = r.nrows();
        let p_value = 1.0 - ChiSquared::new(df as f64).expect("positive df").cdf(statistic);
        Ok(WaldTest {
            statistic,
            df,
            p_value,
        })
    }

    /// One row per coefficient: term, estimate, SE, t, p, stars.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = (0..self.k())
            .map(|i| {
                vec![
                    self.names[i].clone(),
                    self.coefficients[i].to_string(),
                    self.std_errors[i].to_string(),
                    self.t_stats[i].to_string(),
                    self.p_values[i].to_string(),
                    stars(self.p_values[i]).to_string(),
                ]
            })
            .collect();
        csv_bytes(&["term", "coef", "se", "t", "p", "stars"], &rows)
    }
}

impl fmt::Display for RegressionFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Outcome: {}  (SE: {})", self.outcome, self.se_type.key())?;
        for i in 0..self.k() {
            writeln!(
                f,
                "{:<28}{:>12.4}{:<3} ({:.4})",
                self.names[i],
                self.coefficients[i],
                stars(self.p_values[i]),
                self.std_errors[i]
            )?;
        }
        writeln!(f, "Observations {}   R2 {:.4}   Adj. R2 {:.4}", self.n, self.r2, self.adj_r2)
    }
}

/// Scalar estimate with a t-reference p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    pub df: usize,
}

impl Estimate {
    pub fn new(estimate: f64, se: f64, df: usize) -> Self {
        let t = estimate / se;
        Estimate {
            estimate,
            se,
            t,
            p_value: two_sided_p(t, df),
            df,
        }
    }

    /// Two-sided confidence interval at `level` (e.g. 0.95).
    pub fn ci(&self, level: f64) -> (f64, f64) {
        let q = t_quantile(1.0 - (1.0 - level) / 2.0, self.df);
        (self.estimate - q * self.se, self.estimate + q * self.se)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

fn t_dist(df: usize) -> StudentsT {
    StudentsT::new(0.0, 1.0, df.max(1) as f64).expect("valid t parameters")
}

pub fn two_sided_p(t: f64, df: usize) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    2.0 * (1.0 - t_dist(df).cdf(t.abs()))
}

pub fn t_quantile(p: f64, df: usize) -> f64 {
    t_dist(df).inverse_cdf(p)
}

/// OLS on an explicit design. `names` labels the columns of `x`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: Vec<String>, se_type: SeType) -> Result<RegressionFit> {
    ols_impl(x, y, names, se_type, None)
}

fn ols_impl(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    names: Vec<String>,
    se_type: SeType,
    outcome: Option<&str>,
) -> Result<RegressionFit> {
    let (n, k) = x.shape();
    if names.len() != k || y.len() != n {
        return Err(MegaError::DimensionMismatch(format!("design {n}x{k}, {} names, {} outcomes", names.len(), y.len())));
    }
    if n <= k {
        return Err(MegaError::InsufficientData(format!("N={n} with {k} regressors")));
    }
    let qr = PivotedQr::new(x, RANK_TOL);
    if let Some(j) = qr.first_deficient_column() {
        return Err(MegaError::RankDeficient(names[j].clone()));
    }
    let beta = qr.solve(y);
    let residuals = y - x * &beta;
    let xtx_inv = qr.xtx_inverse();
    let dof = (n - k) as f64;
    let ssr = residuals.norm_squared();
    let vcov = match se_type {
        SeType::Classical => &xtx_inv * (ssr / dof),
        SeType::Hc1 => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let xi = x.row(i);
                meat += xi.transpose() * xi * residuals[i].powi(2);
            }
            &xtx_inv * meat * &xtx_inv * (n as f64 / dof)
        }
    };
    let has_intercept = names.first().is_some_and(|s| s == INTERCEPT);
    let tss = if has_intercept {
        let mean = y.mean();
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    } else {
        y.norm_squared()
    };
    let r2 = if tss <= f64::EPSILON * y.len() as f64 * y.amax().powi(2) {
        log::warn!("outcome has no variation; R-squared reported as 0");
        0.0
    } else {
        1.0 - ssr / tss
    };
    let base = if has_intercept { n as f64 - 1.0 } else { n as f64 };
    let adj_r2 = 1.0 - (1.0 - r2) * base / dof;
    let std_errors = DVector::from_fn(k, |i, _| vcov[(i, i)].max(0.0).sqrt());
    let t_stats = beta.component_div(&std_errors);
    let p_values = t_stats.map(|t| two_sided_p(t, n - k));
    Ok(RegressionFit {
        outcome: outcome.unwrap_or("y").to_string(),
        names,
        coefficients: beta,
        std_errors,
        t_stats,
        p_values,
        vcov,
        n,
        r2,
        adj_r2,
        residuals,
        se_type,
    })
}

/// Design matrix and outcome for `spec` after filtering and listwise deletion.
pub fn model_frame(spec: &LinearModelSpec, data: &CohortTable) -> Result<(DMatrix<f64>, DVector<f64>, Vec<String>)> {
    let filtered = data.filter_rows(&spec.filter.keep(data)?);
    let mut vars: Vec<&str> = vec![spec.outcome.as_str()];
    vars.extend(spec.regressors.iter().map(String::as_str));
    let (complete, report) = filtered.select_complete(&vars)?;
    if report.retained < report.before {
        log::info!(
            "{}: listwise deletion kept {} of {} rows",
            spec.outcome,
            report.retained,
            report.before
        );
    }
    let regs: Vec<&str> = spec.regressors.iter().map(String::as_str).collect();
    let design = complete.design(&regs)?;
    let y = DVector::from_vec(complete.numeric(&spec.outcome)?);
    let n = complete.n_rows();
    let (x, names) = if spec.intercept {
        let x = design.matrix.clone().insert_column(0, 1.0);
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(design.names);
        (x, names)
    } else {
        (design.matrix, design.names)
    };
    debug_assert_eq!(x.nrows(), n);
    Ok((x, y, names))
}

pub fn ols_fit(spec: &LinearModelSpec, data: &CohortTable) -> Result<RegressionFit> {
    let (x, y, names) = model_frame(spec, data)?;
    ols_impl(&x, &y, names, spec.se_type, Some(&spec.outcome))
}

/// Residuals of `scores` on `age` with an intercept.
pub fn age_acceleration(scores: &[f64], age_years: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != age_years.len() {
        return Err(MegaError::DimensionMismatch("scores and ages differ in length".into()));
    }
    let n = age_years.len();
    if n < 3 {
        return Err(MegaError::InsufficientData(format!("{n} observations")));
    }
    let mean = age_years.iter().sum::<f64>() / n as f64;
    if age_years.iter().all(|a| (a - mean).abs() <= 1e-12 * mean.abs().max(1.0)) {
        return Err(MegaError::ConstantColumn("age".into()));
    }
    let x = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { age_years[r] });
    let fit = ols(
        &x,
        &DVector::from_column_slice(scores),
        vec![INTERCEPT.into(), "age".into()],
        SeType::Classical,
    )?;
    Ok(fit.residuals.iter().copied().collect())
}

/// Cross-equation error covariance used by [`constrained_sur_gls`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurCovariance {
    /// Sample covariance of the clocks themselves.
    #[default]
    Clocks,
    /// Covariance of equation-by-equation OLS residuals, denominator `N - P`.
    Residuals,
}

/// Stacks `C_k = X beta + e_k` over the K clocks with error covariance
/// `M (x) I_N` and a common `beta`, solved by GLS.
///
/// `x` is used as given (include an intercept column if wanted). Standard
/// errors are the GLS ones, `(X_s' Omega^{-1} X_s)^{-1}`.
pub fn constrained_sur_gls(
    panel: &ClockPanel,
    x: &DMatrix<f64>,
    names: Vec<String>,
    covariance: SurCovariance,
) -> Result<RegressionFit> {
    let (n, p) = x.shape();
    let k = panel.k();
    if n != panel.n() || names.len() != p {
        return Err(MegaError::DimensionMismatch(format!(
            "panel has {} rows, design {n}x{p} with {} names",
            panel.n(),
            names.len()
        )));
    }
    if n <= p {
        return Err(MegaError::InsufficientData(format!("N={n} with {p} regressors")));
    }
    let qr = PivotedQr::new(x, RANK_TOL);
    if let Some(j) = qr.first_deficient_column() {
        return Err(MegaError::RankDeficient(names[j].clone()));
    }
    let c = panel.readings();
    let m = match covariance {
        SurCovariance::Clocks => sample_covariance(panel)?.matrix,
        SurCovariance::Residuals => {
            let mut resid = DMatrix::zeros(n, k);
            for j in 0..k {
                let col = c.column(j).into_owned();
                resid.set_column(j, &(&col - x * qr.solve(&col)));
            }
            resid.transpose() * &resid / (n - p) as f64
        }
    };
    let m_inv = linalg::spd_inverse(&m)?;

    // X_s = 1_K (x) X, y_s = vec(C), Omega^{-1} = M^{-1} (x) I_N.
    let xs = DMatrix::from_fn(k * n, p, |r, j| x[(r % n, j)]);
    let ys = DVector::from_iterator(k * n, c.iter().copied());
    let mut xs_t_omega_inv = DMatrix::zeros(p, k * n);
    for a in 0..k {
        for b in 0..k {
            let w = m_inv[(a, b)];
            if w == 0.0 {
                continue;
            }
            let mut block = xs_t_omega_inv.columns_mut(b * n, n);
            block += xs.rows(a * n, n).transpose() * w;
        }
    }
    let a_mat = &xs_t_omega_inv * &xs;
    let b_vec = &xs_t_omega_inv * &ys;
    let chol = a_mat
        .clone()
        .cholesky()
        .ok_or(MegaError::IllConditioned {
            condition: linalg::condition_number(&a_mat),
        })?;
    let beta = chol.solve(&b_vec);
    let vcov = chol.inverse();

    // Fit statistics on the implied index C w / sum(w).
    let w = m_inv.row_sum().transpose();
    let w = &w / w.sum();
    let y_index = c * &w;
    let residuals = &y_index - x * &beta;
    let has_intercept = names.first().is_some_and(|s| s == INTERCEPT);
    let mean = if has_intercept { y_index.mean() } else { 0.0 };
    let tss: f64 = y_index.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - residuals.norm_squared() / tss } else { 0.0 };
    let base = if has_intercept { n as f64 - 1.0 } else { n as f64 };
    let adj_r2 = 1.0 - (1.0 - r2) * base / (n - p) as f64;
    let std_errors = DVector::from_fn(p, |i, _| vcov[(i, i)].max(0.0).sqrt());
    let t_stats = beta.component_div(&std_errors);
    let p_values = t_stats.map(|t| two_sided_p(t, n - p));
    Ok(RegressionFit {
        outcome: "stacked clocks".into(),
        names,
        coefficients: beta,
        std_errors,
        t_stats,
        p_values,
        vcov,
        n,
        r2,
        adj_r2,
        residuals,
        se_type: SeType::Classical,
    })
}

/// Control variables for the outcome and exposure regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub names: Vec<String>,
}

impl ControlSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        ControlSet {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    /// Mother's age at birth, mother's education, father's social class,
    /// gender, birth year, birth order and age at methylation assessment.
    pub fn standard() -> Self {
        Self::new(&[
            "mother_age_at_birth",
            "mother_education",
            "father_social_class",
            "female",
            "birth_year",
            "birth_order",
            "age_at_methylation",
        ])
    }

    pub fn validate(&self, data: &CohortTable) -> Result<()> {
        for name in &self.names {
            if !data.has_column(name) {
                return Err(MegaError::InvalidArgument(format!("missing required control `{name}`")));
            }
        }
        Ok(())
    }
}

/// Adolescent health block of the outcome regression.
pub const HEALTH_COLUMNS: [&str; 3] = ["bmi", "smoker", "drinker"];

/// Adult outcome on MEGA, optional health block and controls.
pub fn build_outcome_model(
    outcome: &str,
    mega: &str,
    health: &[&str],
    controls: &ControlSet,
    data: &CohortTable,
) -> Result<LinearModelSpec> {
    for col in std::iter::once(&outcome).chain(std::iter::once(&mega)).chain(health) {
        data.column(col)?;
    }
    controls.validate(data)?;
    let mut regs: Vec<String> = vec![mega.to_string()];
    regs.extend(health.iter().map(|s| s.to_string()));
    regs.extend(controls.names.iter().cloned());
    LinearModelSpec::new(outcome, &regs)
}

fn require_binary(data: &CohortTable, name: &str) -> Result<()> {
    let col = data.column(name)?;
    if col.kind() != ColumnKind::Binary {
        return Err(MegaError::WrongKind {
            column: name.to_string(),
            expected: ColumnKind::Binary.as_str(),
            found: col.kind().as_str(),
        });
    }
    Ok(())
}

fn build_exposure(mega: &str, exposures: &[&str], controls: &ControlSet, data: &CohortTable) -> Result<LinearModelSpec> {
    data.column(mega)?;
    for (i, a) in exposures.iter().enumerate() {
        require_binary(data, a)?;
        for b in &exposures[..i] {
            if a == b || data.column(a)?.values() == data.column(b)?.values() {
                return Err(MegaError::InvalidArgument(format!(
                    "exposure indicators `{b}` and `{a}` are identical"
                )));
            }
        }
    }
    controls.validate(data)?;
    let mut regs: Vec<String> = exposures.iter().map(|s| s.to_string()).collect();
    regs.extend(controls.names.iter().cloned());
    LinearModelSpec::new(mega, &regs)
}

/// MEGA on early and late abuse indicators plus controls.
pub fn build_abuse_model(
    mega: &str,
    abuse_0_10: &str,
    abuse_11_18: &str,
    controls: &ControlSet,
    data: &CohortTable,
) -> Result<LinearModelSpec> {
    build_exposure(mega, &[abuse_0_10, abuse_11_18], controls, data)
}

/// Cruelty and sexual abuse entered separately for each period.
pub fn build_abuse_disaggregated_model(
    mega: &str,
    indicators: [&str; 4],
    controls: &ControlSet,
    data: &CohortTable,
) -> Result<LinearModelSpec> {
    build_exposure(mega, &indicators, controls, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Column;

    fn design(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), 2, |r, c| if c == 0 { 1.0 } else { xs[r] })
    }

    fn names2() -> Vec<String> {
        vec![INTERCEPT.into(), "x".into()]
    }

    #[test]
    fn perfect_fit() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = DVector::from_iterator(5, xs.iter().map(|x| 2.0 * x));
        let fit = ols(&design(&xs), &y, names2(), SeType::Classical).unwrap();
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn constant_outcome() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let y = DVector::from_element(4, 3.0);
        let fit = ols(&design(&xs), &y, names2(), SeType::Classical).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-12);
        assert_eq!(fit.r2, 0.0);
    }

    #[test]
    fn adjusted_r2_by_hand() {
        // x = 1..5, y = (1, 3, 2, 5, 4): slope 0.8, SSR 3.6, TSS 10.
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        let fit = ols(&design(&xs), &y, names2(), SeType::Classical).unwrap();
        assert!((fit.coefficients[1] - 0.8).abs() < 1e-12);
        assert!((fit.r2 - 0.64).abs() < 1e-12);
        assert!((fit.adj_r2 - (1.0 - 0.36 * 4.0 / 3.0)).abs() < 1e-12);
        assert!(fit.adj_r2 <= fit.r2);
        // SE of slope: sqrt(1.2 / 10).
        assert!((fit.std_errors[1] - 0.12f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_column() {
        let x = DMatrix::from_fn(6, 3, |r, c| match c {
            0 => 1.0,
            1 => r as f64,
            _ => 2.0 * r as f64 + 1.0,
        });
        let y = DVector::from_fn(6, |r, _| r as f64);
        let names = vec![INTERCEPT.into(), "a".into(), "b".into()];
        match ols(&x, &y, names, SeType::Classical) {
            Err(MegaError::RankDeficient(_)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let x = design(&[1.0, 2.0]);
        assert!(matches!(
            ols(&x, &DVector::from_vec(vec![1.0, 2.0]), names2(), SeType::Classical),
            Err(MegaError::InsufficientData(_))
        ));
    }

    #[test]
    fn age_acceleration_identity_and_shift() {
        let age = [15.0, 16.5, 17.2, 18.0, 15.8];
        let r = age_acceleration(&age, &age).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let shifted: Vec<f64> = age.iter().map(|a| a + 1.0).collect();
        let r = age_acceleration(&shifted, &age).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(
            age_acceleration(&age, &[17.0; 5]),
            Err(MegaError::ConstantColumn(_))
        ));
    }

    #[test]
    fn filter_and_listwise_deletion() {
        let t = CohortTable::new(
            (0..6).map(|i| i.to_string()).collect(),
            vec![
                Column::continuous("y", vec![Some(1.0), Some(2.0), None, Some(4.0), Some(5.0), Some(7.0)]),
                Column::from_f64("x", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                Column::from_f64("g", &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            ],
        )
        .unwrap();
        let spec = LinearModelSpec::new("y", &["x"])
            .unwrap()
            .with_filter(RowFilter::Equals {
                column: "g".into(),
                value: 0.0,
            });
        let fit = ols_fit(&spec, &t).unwrap();
        assert_eq!(fit.n, 4);
        assert!((fit.coef("x").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_regressor_rejected() {
        assert!(LinearModelSpec::new("y", &["x", "x"]).is_err());
    }

    #[test]
    fn abuse_model_rejects_identical_periods() {
        let t = CohortTable::new(
            (0..4).map(|i| i.to_string()).collect(),
            vec![
                Column::from_f64("mega", &[1.0, 2.0, 3.0, 4.0]),
                Column::binary("a", vec![Some(true), Some(false), Some(true), Some(false)]),
                Column::binary("b", vec![Some(true), Some(false), Some(true), Some(false)]),
            ],
        )
        .unwrap();
        let controls = ControlSet::new::<&str>(&[]);
        assert!(build_abuse_model("mega", "a", "b", &controls, &t).is_err());
        assert!(build_abuse_model("mega", "a", "a", &controls, &t).is_err());
        assert!(matches!(
            build_outcome_model("mega", "a", &[], &ControlSet::new(&["zz"]), &t),
            Err(MegaError::InvalidArgument(_))
        ));
    }
}
