//! Aggregating several clocks into one index.
//!
//! Two routes share the clock covariance `M`:
//!
//! * weighted index: `w = M^{-1} 1`, score `sum_k w_k C_k / sum_k w_k`;
//! * factor index: `u = M^{-1} L` with `L` the first-factor loadings from an
//!   exploratory factor analysis of the clock correlation matrix.
//!
//! Weights are always applied to clocks in their natural unit (years), so
//! the resulting scores are in years too.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::cohort::CohortTable;
use crate::error::{MegaError, Result};
use crate::linalg::{self, MAX_CONDITION};
use crate::report::csv_bytes;

/// Per-subject clock readings (years) plus chronological age.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockPanel {
    clock_names: Vec<String>,
    readings: DMatrix<f64>,
    age_years: DVector<f64>,
    subject_ids: Vec<String>,
}

impl ClockPanel {
    pub fn new(
        clock_names: Vec<String>,
        readings: DMatrix<f64>,
        age_years: DVector<f64>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, k) = readings.shape();
        if k == 0 || clock_names.len() != k {
            return Err(MegaError::DimensionMismatch(format!(
                "{} clock names for {k} reading columns",
                clock_names.len()
            )));
        }
        if age_years.len() != n || subject_ids.len() != n {
            return Err(MegaError::DimensionMismatch("age/id length differs from readings".into()));
        }
        if n <= k {
            return Err(MegaError::InsufficientData(format!("N={n} must exceed K={k}")));
        }
        if readings.iter().chain(age_years.iter()).any(|v| !v.is_finite()) {
            return Err(MegaError::InvalidArgument("non-finite reading".into()));
        }
        Ok(ClockPanel {
            clock_names,
            readings,
            age_years,
            subject_ids,
        })
    }

    /// Builds a panel from complete cohort columns.
    pub fn from_table(table: &CohortTable, clocks: &[&str], age: &str) -> Result<Self> {
        let n = table.n_rows();
        let cols = clocks.iter().map(|c| table.numeric(c)).collect::<Result<Vec<_>>>()?;
        let readings = DMatrix::from_fn(n, clocks.len(), |r, c| cols[c][r]);
        let age = DVector::from_vec(table.numeric(age)?);
        Self::new(
            clocks.iter().map(|s| s.to_string()).collect(),
            readings,
            age,
            table.ids().to_vec(),
        )
    }

    pub fn k(&self) -> usize {
        self.readings.ncols()
    }

    pub fn n(&self) -> usize {
        self.readings.nrows()
    }

    pub fn clock_names(&self) -> &[String] {
        &self.clock_names
    }

    pub fn readings(&self) -> &DMatrix<f64> {
        &self.readings
    }

    pub fn age_years(&self) -> &DVector<f64> {
        &self.age_years
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    fn position(&self, clock: &str) -> Result<usize> {
        self.clock_names
            .iter()
            .position(|c| c == clock)
            .ok_or_else(|| MegaError::UnknownColumn(clock.to_string()))
    }

    /// Panel with `clock` dropped.
    pub fn without(&self, clock: &str) -> Result<ClockPanel> {
        let pos = self.position(clock)?;
        let mut names = self.clock_names.clone();
        names.remove(pos);
        Self::new(
            names,
            self.readings.clone().remove_column(pos),
            self.age_years.clone(),
            self.subject_ids.clone(),
        )
    }

    /// Same subjects with every reading mapped through `f`.
    pub fn map_readings(&self, f: impl Fn(f64) -> f64) -> Result<ClockPanel> {
        Self::new(
            self.clock_names.clone(),
            self.readings.map(f),
            self.age_years.clone(),
            self.subject_ids.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `N - 1`.
    #[default]
    Unbiased,
    /// `N`.
    MaximumLikelihood,
}

impl Denominator {
    fn ddof(self) -> usize {
        match self {
            Denominator::Unbiased => 1,
            Denominator::MaximumLikelihood => 0,
        }
    }
}

/// Clock covariance in years squared.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub clock_names: Vec<String>,
    pub matrix: DMatrix<f64>,
    pub n: usize,
    pub denominator: Denominator,
    pub condition_number: f64,
    pub min_eigenvalue: f64,
    /// Set when the matrix is not safely invertible.
    pub singular: bool,
}

pub fn sample_covariance(panel: &ClockPanel) -> Result<CovarianceEstimate> {
    sample_covariance_with(panel, Denominator::Unbiased)
}

pub fn sample_covariance_with(panel: &ClockPanel, denominator: Denominator) -> Result<CovarianceEstimate> {
    let matrix = linalg::covariance(panel.readings(), denominator.ddof());
    for (k, name) in panel.clock_names.iter().enumerate() {
        let scale = panel.readings.column(k).amax().max(1.0);
        if matrix[(k, k)] <= (1e-14 * scale).powi(2) {
            return Err(MegaError::ConstantColumn(name.clone()));
        }
    }
    let (values, _) = linalg::eigen_desc(&matrix);
    let min_eigenvalue = *values.last().unwrap();
    let condition_number = linalg::condition_number(&matrix);
    Ok(CovarianceEstimate {
        clock_names: panel.clock_names.clone(),
        matrix,
        n: panel.n(),
        denominator,
        condition_number,
        min_eigenvalue,
        singular: !(condition_number < MAX_CONDITION),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Inverse-covariance weighted index.
    Wgt,
    /// Factor-loading weighted index.
    Fa,
}

impl Method {
    pub fn key(self) -> &'static str {
        match self {
            Method::Wgt => "wgt",
            Method::Fa => "fa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wgt" => Ok(Method::Wgt),
            "fa" => Ok(Method::Fa),
            other => Err(MegaError::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MegaWeights {
    pub method: Method,
    pub clock_names: Vec<String>,
    pub raw_weights: DVector<f64>,
    pub normalized_weights: DVector<f64>,
    pub loadings_used: Option<DVector<f64>>,
    pub excluded_clocks: Vec<String>,
    pub condition_number: f64,
}

impl MegaWeights {
    fn from_raw(
        method: Method,
        clock_names: Vec<String>,
        raw: DVector<f64>,
        loadings_used: Option<DVector<f64>>,
        condition_number: f64,
    ) -> Result<Self> {
        let total = raw.sum();
        let scale = raw.amax().max(f64::MIN_POSITIVE);
        if total.abs() <= 1e-10 * scale.max(1.0) || !total.is_finite() {
            return Err(MegaError::DegenerateNormalization(total));
        }
        Ok(MegaWeights {
            method,
            clock_names,
            normalized_weights: &raw / total,
            raw_weights: raw,
            loadings_used,
            excluded_clocks: Vec::new(),
            condition_number,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows = self
            .clock_names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                vec![
                    self.method.key().to_string(),
                    name.clone(),
                    self.raw_weights[k].to_string(),
                    self.normalized_weights[k].to_string(),
                    self.loadings_used.as_ref().map(|l| l[k].to_string()).unwrap_or_default(),
                ]
            })
            .collect::<Vec<_>>();
        csv_bytes(&["method", "clock", "raw_weight", "normalized_weight", "loading"], &rows)
    }
}

/// `w = M^{-1} 1`, solved through Cholesky.
pub fn weighted_index_weights(cov: &CovarianceEstimate) -> Result<MegaWeights> {
    let k = cov.matrix.nrows();
    let raw = linalg::spd_solve(&cov.matrix, &DVector::from_element(k, 1.0))?;
    MegaWeights::from_raw(Method::Wgt, cov.clock_names.clone(), raw, None, cov.condition_number)
}

/// Per-subject weighted average of the clocks, in years.
pub fn index_scores(panel: &ClockPanel, weights: &MegaWeights) -> Result<Vec<f64>> {
    if weights.clock_names != panel.clock_names {
        return Err(MegaError::DimensionMismatch(format!(
            "weights cover {:?}, panel has {:?}",
            weights.clock_names, panel.clock_names
        )));
    }
    Ok((panel.readings() * &weights.normalized_weights).iter().copied().collect())
}

pub fn mega_wgt(panel: &ClockPanel, weights: &MegaWeights) -> Result<Vec<f64>> {
    if weights.method != Method::Wgt {
        return Err(MegaError::InvalidArgument("mega_wgt needs weighted-index weights".into()));
    }
    index_scores(panel, weights)
}

// ---------------------------------------------------------------------------
// Exploratory factor analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Extraction {
    /// Iterated principal factors, SMC starting communalities.
    #[default]
    PrincipalFactor,
    /// First principal component of the correlation matrix.
    PrincipalComponent,
}

/// Which eigenvalues the Kaiser rule looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KaiserBasis {
    /// Eigenvalues of the correlation matrix.
    #[default]
    Correlation,
    /// Eigenvalues of the correlation matrix with SMCs on the diagonal.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfaOptions {
    pub extraction: Extraction,
    pub kaiser: KaiserBasis,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for EfaOptions {
    fn default() -> Self {
        EfaOptions {
            extraction: Extraction::PrincipalFactor,
            kaiser: KaiserBasis::Correlation,
            tolerance: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSolution {
    pub clock_names: Vec<String>,
    /// Correlation-matrix eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues of the SMC-reduced correlation matrix, descending.
    pub reduced_eigenvalues: Vec<f64>,
    pub n_retained: usize,
    /// First-factor loadings, sign-normalized so they sum to a positive value.
    pub loadings: DVector<f64>,
    pub communalities: DVector<f64>,
    pub uniqueness: DVector<f64>,
    pub iterations: usize,
    /// False when principal factors stopped at the iteration cap while still contracting.
    pub converged: bool,
    pub extraction: Extraction,
    pub kaiser: KaiserBasis,
    /// A communality hit the upper bound of 1 during iteration.
    pub heywood: bool,
}

impl FactorSolution {
    /// Diagnostics table: clock, loading, uniqueness, then the eigenvalues.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut rows = Vec::new();
        for (k, name) in self.clock_names.iter().enumerate() {
            rows.push(vec![
                "loading".to_string(),
                name.clone(),
                self.loadings[k].to_string(),
                self.uniqueness[k].to_string(),
            ]);
        }
        for (i, (e, r)) in self.eigenvalues.iter().zip(&self.reduced_eigenvalues).enumerate() {
            rows.push(vec![
                "eigenvalue".to_string(),
                format!("factor{}", i + 1),
                e.to_string(),
                r.to_string(),
            ]);
        }
        rows.push(vec![
            "retained".to_string(),
            String::new(),
            self.n_retained.to_string(),
            String::new(),
        ]);
        csv_bytes(&["row", "name", "value", "uniqueness_or_reduced"], &rows)
    }
}

impl fmt::Display for FactorSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>10}{:>12}", "", "Loading", "Uniqueness")?;
        for (k, name) in self.clock_names.iter().enumerate() {
            writeln!(f, "{:<24}{:>10.3}{:>12.3}", name, self.loadings[k], self.uniqueness[k])?;
        }
        writeln!(f, "Retained factors (Kaiser): {}", self.n_retained)?;
        writeln!(
            f,
            "Iterations: {}{}",
            self.iterations,
            if self.converged { "" } else { " (stopped at cap)" }
        )?;
        write!(f, "Eigenvalues:")?;
        for e in &self.eigenvalues {
            write!(f, " {e:.3}")?;
        }
        writeln!(f)?;
        write!(f, "Reduced eigenvalues:")?;
        for e in &self.reduced_eigenvalues {
            write!(f, " {e:.3}")?;
        }
        writeln!(f)
    }
}

pub fn correlation_from_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect();
    let mut r = DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    for i in 0..r.nrows() {
        r[(i, i)] = 1.0;
    }
    r
}

/// Squared multiple correlations; falls back to the largest absolute
/// off-diagonal correlation when `r` cannot be inverted.
pub fn squared_multiple_correlations(r: &DMatrix<f64>) -> DVector<f64> {
    let k = r.nrows();
    if let Ok(inv) = linalg::spd_inverse(r) {
        return DVector::from_fn(k, |i, _| (1.0 - 1.0 / inv[(i, i)]).clamp(0.0, 1.0));
    }
    DVector::from_fn(k, |i, _| {
        (0..k)
            .filter(|&j| j != i)
            .map(|j| r[(i, j)].abs())
            .fold(0.0, f64::max)
    })
}

fn with_diagonal(r: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let mut out = r.clone();
    for i in 0..r.nrows() {
        out[(i, i)] = diag[i];
    }
    out
}

fn first_factor(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let (values, vectors) = linalg::eigen_desc(m);
    let mut loadings: DVector<f64> = vectors.column(0) * values[0].max(0.0).sqrt();
    if loadings.sum() < 0.0 {
        loadings = -loadings;
    }
    (values[0], loadings)
}

pub fn efa(panel: &ClockPanel) -> Result<FactorSolution> {
    efa_with(panel, &EfaOptions::default())
}

pub fn efa_with(panel: &ClockPanel, opts: &EfaOptions) -> Result<FactorSolution> {
    if panel.k() < 2 {
        return Err(MegaError::InsufficientData("factor analysis needs at least two clocks".into()));
    }
    let cov = sample_covariance(panel)?;
    efa_correlation(&correlation_from_covariance(&cov.matrix), panel.clock_names.clone(), opts)
}

/// Single-factor extraction from a correlation matrix.
/// Largest final communality change accepted when the iteration cap is hit.
const STILL_MOVING: f64 = 1e-3;

pub fn efa_correlation(r: &DMatrix<f64>, clock_names: Vec<String>, opts: &EfaOptions) -> Result<FactorSolution> {
    let (eigenvalues, _) = linalg::eigen_desc(r);
    let smc = squared_multiple_correlations(r);
    let (reduced_eigenvalues, _) = linalg::eigen_desc(&with_diagonal(r, &smc));
    let basis = match opts.kaiser {
        KaiserBasis::Correlation => &eigenvalues,
        KaiserBasis::Reduced => &reduced_eigenvalues,
    };
    // Exact identity correlations land on 1 +- rounding; do not count those.
    let n_retained = basis.iter().filter(|&&e| e > 1.0 + 1e-9).count();
    if n_retained == 0 {
        return Err(MegaError::NoCommonFactor { largest: basis[0] });
    }

    let (loadings, iterations, converged, heywood) = match opts.extraction {
        Extraction::PrincipalComponent => (first_factor(r).1, 1, true, false),
        Extraction::PrincipalFactor => {
            let mut h = smc;
            let mut trace = Vec::new();
            let mut heywood = false;
            let mut loadings = DVector::zeros(r.nrows());
            let mut converged = false;
            for _ in 0..opts.max_iter {
                let (_, l) = first_factor(&with_diagonal(r, &h));
                let next = l.map(|v| v * v);
                if next.iter().any(|&v| v > 1.0) {
                    heywood = true;
                }
                let next = next.map(|v| v.min(1.0));
                let delta = (&next - &h).amax();
                trace.push(delta);
                h = next;
                loadings = h.map(f64::sqrt).component_mul(&l.map(f64::signum));
                if delta < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            if !converged {
                // The cap is a stopping rule; only a run that is still moving
                // or not contracting counts as a failure.
                let tail: Vec<f64> = trace.iter().rev().take(5).copied().collect();
                let last = tail.first().copied().unwrap_or(f64::NAN);
                let contracting = tail.windows(2).all(|w| w[0] <= w[1]);
                if !(last < STILL_MOVING) || !contracting {
                    let shown: Vec<String> = tail.iter().map(|d| format!("{d:.3e}")).collect();
                    return Err(MegaError::NonConvergence(format!(
                        "principal factors after {} iterations, last communality changes [{}]",
                        opts.max_iter,
                        shown.join(", ")
                    )));
                }
                log::warn!(
                    "principal factors stopped at {} iterations with communality change {last:.2e}",
                    opts.max_iter
                );
            }
            (loadings, trace.len(), converged, heywood)
        }
    };
    let communalities = loadings.map(|l| (l * l).min(1.0));
    let uniqueness = communalities.map(|c| 1.0 - c);
    Ok(FactorSolution {
        clock_names,
        eigenvalues,
        reduced_eigenvalues,
        n_retained,
        loadings,
        communalities,
        uniqueness,
        iterations,
        converged,
        extraction: opts.extraction,
        kaiser: opts.kaiser,
        heywood,
    })
}

/// `u = M^{-1} L`.
pub fn factor_weights(solution: &FactorSolution, cov: &CovarianceEstimate) -> Result<MegaWeights> {
    if solution.n_retained != 1 {
        return Err(MegaError::NotUnifactorial(solution.n_retained));
    }
    if solution.clock_names != cov.clock_names {
        return Err(MegaError::DimensionMismatch("factor solution and covariance cover different clocks".into()));
    }
    let raw = linalg::spd_solve(&cov.matrix, &solution.loadings)?;
    MegaWeights::from_raw(
        Method::Fa,
        cov.clock_names.clone(),
        raw,
        Some(solution.loadings.clone()),
        cov.condition_number,
    )
}

pub fn mega_fa(panel: &ClockPanel, solution: &FactorSolution, cov: &CovarianceEstimate) -> Result<Vec<f64>> {
    index_scores(panel, &factor_weights(solution, cov)?)
}

/// Weights and scores for the full panel under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexResult {
    pub weights: MegaWeights,
    pub scores: Vec<f64>,
    pub solution: Option<FactorSolution>,
    pub covariance: CovarianceEstimate,
}

pub fn build_index(panel: &ClockPanel, method: Method) -> Result<IndexResult> {
    let covariance = sample_covariance(panel)?;
    let (weights, solution) = match method {
        Method::Wgt => (weighted_index_weights(&covariance)?, None),
        Method::Fa => {
            let solution = efa(panel)?;
            (factor_weights(&solution, &covariance)?, Some(solution))
        }
    };
    let scores = index_scores(panel, &weights)?;
    Ok(IndexResult {
        weights,
        scores,
        solution,
        covariance,
    })
}

/// Recomputes the index without `exclude`, re-checking single-factor retention for FA.
pub fn leave_one_out(panel: &ClockPanel, exclude: &str, method: Method) -> Result<IndexResult> {
    if !panel.clock_names.iter().any(|c| c == exclude) {
        return Err(MegaError::UnknownColumn(exclude.to_string()));
    }
    if panel.k() < 3 {
        return Err(MegaError::InsufficientData(format!(
            "leaving out one of {} clocks leaves fewer than two",
            panel.k()
        )));
    }
    let reduced = panel.without(exclude)?;
    let mut result = build_index(&reduced, method)?;
    result.weights.excluded_clocks = vec![exclude.to_string()];
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov_of(m: DMatrix<f64>) -> CovarianceEstimate {
        let k = m.nrows();
        CovarianceEstimate {
            clock_names: (0..k).map(|i| format!("c{i}")).collect(),
            condition_number: linalg::condition_number(&m),
            min_eigenvalue: 0.0,
            matrix: m,
            n: 100,
            denominator: Denominator::Unbiased,
            singular: false,
        }
    }

    fn panel(cols: Vec<Vec<f64>>) -> ClockPanel {
        let n = cols[0].len();
        let k = cols.len();
        ClockPanel::new(
            (0..k).map(|i| format!("c{i}")).collect(),
            DMatrix::from_fn(n, k, |r, c| cols[c][r]),
            DVector::from_fn(n, |r, _| 15.0 + r as f64 * 0.01),
            (0..n).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_gives_equal_weights() {
        let w = weighted_index_weights(&cov_of(DMatrix::identity(2, 2))).unwrap();
        assert!((w.normalized_weights[0] - 0.5).abs() < 1e-15);
        assert!((w.normalized_weights[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diagonal_inversion_by_hand() {
        // diag(1, 4)^{-1} 1 = (1, 0.25); normalized (0.8, 0.2).
        let w = weighted_index_weights(&cov_of(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])))).unwrap();
        assert!((w.raw_weights[0] - 1.0).abs() < 1e-14);
        assert!((w.raw_weights[1] - 0.25).abs() < 1e-14);
        assert!((w.normalized_weights[0] - 0.8).abs() < 1e-14);
        assert!((w.normalized_weights[1] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn exchangeable_covariance_gives_equal_weights() {
        let m = DMatrix::from_fn(4, 4, |i, j| if i == j { 9.0 } else { 4.5 });
        let w = weighted_index_weights(&cov_of(m)).unwrap();
        for k in 0..4 {
            assert!((w.normalized_weights[k] - 0.25).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_covariance_reports_condition() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            weighted_index_weights(&cov_of(m)),
            Err(MegaError::IllConditioned { .. })
        ));
    }

    #[test]
    fn scores_by_hand() {
        let p = panel(vec![vec![20.0, 17.0, 0.0], vec![30.0, 17.0, 1.0]]);
        let w = MegaWeights::from_raw(
            Method::Wgt,
            vec!["c0".into(), "c1".into()],
            DVector::from_vec(vec![0.8, 0.2]),
            None,
            1.0,
        )
        .unwrap();
        let s = mega_wgt(&p, &w).unwrap();
        assert!((s[0] - 22.0).abs() < 1e-12);
        assert!((s[1] - 17.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = panel(vec![vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 1.0, 4.0, 3.0], vec![0.0, 1.0, 0.0, 2.0]]);
        let w = weighted_index_weights(&cov_of(DMatrix::identity(2, 2))).unwrap();
        assert!(matches!(mega_wgt(&p, &w), Err(MegaError::DimensionMismatch(_))));
    }

    #[test]
    fn duplicated_plus_constant_has_covariance_equal_variance() {
        let x = vec![1.0, 3.0, 2.0, 7.0, 5.0];
        let p = panel(vec![x.clone(), x.iter().map(|v| v + 4.0).collect()]);
        let c = sample_covariance(&p).unwrap();
        assert!((c.matrix[(0, 1)] - c.matrix[(0, 0)]).abs() < 1e-12);
        assert!(c.singular);
    }

    #[test]
    fn constant_clock_named_in_error() {
        let p = panel(vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]);
        assert!(matches!(sample_covariance(&p), Err(MegaError::ConstantColumn(c)) if c == "c1"));
    }

    #[test]
    fn factor_weights_by_hand() {
        // M = I, L = (0.9, 0.3): u = L, normalized (0.75, 0.25).
        let sol = FactorSolution {
            clock_names: vec!["c0".into(), "c1".into()],
            eigenvalues: vec![1.27, 0.73],
            reduced_eigenvalues: vec![0.9, 0.0],
            n_retained: 1,
            loadings: DVector::from_vec(vec![0.9, 0.3]),
            communalities: DVector::from_vec(vec![0.81, 0.09]),
            uniqueness: DVector::from_vec(vec![0.19, 0.91]),
            iterations: 1,
            extraction: Extraction::PrincipalFactor,
            kaiser: KaiserBasis::Correlation,
            converged: true,
            heywood: false,
        };
        let w = factor_weights(&sol, &cov_of(DMatrix::identity(2, 2))).unwrap();
        assert!((w.normalized_weights[0] - 0.75).abs() < 1e-14);
        assert!((w.normalized_weights[1] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn degenerate_normalization() {
        let sol = FactorSolution {
            clock_names: vec!["c0".into(), "c1".into()],
            eigenvalues: vec![1.5, 0.5],
            reduced_eigenvalues: vec![1.0, 0.0],
            n_retained: 1,
            loadings: DVector::from_vec(vec![0.5, -0.5]),
            communalities: DVector::from_vec(vec![0.25, 0.25]),
            uniqueness: DVector::from_vec(vec![0.75, 0.75]),
            iterations: 1,
            extraction: Extraction::PrincipalFactor,
            kaiser: KaiserBasis::Correlation,
            converged: true,
            heywood: false,
        };
        assert!(matches!(
            factor_weights(&sol, &cov_of(DMatrix::identity(2, 2))),
            Err(MegaError::DegenerateNormalization(_))
        ));
    }

    #[test]
    fn perfectly_correlated_clocks_load_one() {
        let base = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let p = panel(vec![
            base.to_vec(),
            base.iter().map(|v| v + 10.0).collect(),
            base.iter().map(|v| v - 3.0).collect(),
        ]);
        let sol = efa(&p).unwrap();
        assert_eq!(sol.n_retained, 1);
        for k in 0..3 {
            assert!((sol.loadings[k] - 1.0).abs() < 1e-9);
            assert!(sol.uniqueness[k].abs() < 1e-9);
        }
    }

    #[test]
    fn identity_correlation_has_no_common_factor() {
        // Mutually orthogonal contrasts: sample correlation is exactly I.
        let p = panel(vec![
            vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
            vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
        ]);
        assert!(matches!(efa(&p), Err(MegaError::NoCommonFactor { .. })));
    }

    #[test]
    fn leave_one_out_errors() {
        let p = panel(vec![vec![1.0, 2.0, 4.0, 3.0], vec![2.0, 1.0, 3.0, 5.0]]);
        assert!(matches!(leave_one_out(&p, "zz", Method::Wgt), Err(MegaError::UnknownColumn(_))));
        assert!(matches!(leave_one_out(&p, "c0", Method::Wgt), Err(MegaError::InsufficientData(_))));
    }

    #[test]
    fn iteration_cap_stops_or_fails() {
        // One-factor correlation with loadings 0.4, 0.5, 0.6 (exactly identified, slow).
        let l = [0.4, 0.5, 0.6];
        let r = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { l[i] * l[j] });
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let full = efa_correlation(&r, names.clone(), &EfaOptions { max_iter: 100_000, ..Default::default() });
        let capped = efa_correlation(&r, names.clone(), &EfaOptions { max_iter: 60, ..Default::default() });
        match (full, capped) {
            (Ok(f), Ok(c)) => {
                assert!(f.converged);
                if !c.converged {
                    assert_eq!(c.iterations, 60);
                }
                for k in 0..3 {
                    assert!((c.loadings[k] - f.loadings[k]).abs() < 1e-2);
                }
            }
            other => panic!("{other:?}"),
        }
        let err = efa_correlation(&r, names, &EfaOptions { max_iter: 1, ..Default::default() }).unwrap_err();
        assert!(matches!(err, MegaError::NonConvergence(_)), "{err}");
    }
}
