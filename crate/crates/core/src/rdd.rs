//! Sharp regression discontinuity at the September school-entry cutoff.
//!
//! Month of birth is normalized so September is 0 (treated), October 1,
//! August -1 and so on, wrapping to the range -6..=5. A bandwidth of `b`
//! months keeps `MoB` in `[-b, b-1]`: `b = 4` is May to December.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::cohort::{CohortTable, Column, ColumnKind};
use crate::error::{MegaError, Result};
use crate::inference::{ols, ols_fit, Estimate, LinearModelSpec, RegressionFit, SeType, WaldTest, INTERCEPT};
use crate::report::{coef_cell, csv_bytes, se_cell};

pub const CUTOFF_MONTH: u8 = 9;
pub const TREAT: &str = "treat";
pub const MOB: &str = "mob";
pub const TREAT_X_MOB: &str = "treat_x_mob";

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

/// Month of birth relative to September, in `-6..=5`.
pub fn normalize_running(month: u8) -> Result<i32> {
    if !(1..=12).contains(&month) {
        return Err(MegaError::InvalidArgument(format!("month {month} outside 1-12")));
    }
    Ok((i32::from(month) - i32::from(CUTOFF_MONTH) + 6).rem_euclid(12) - 6)
}

pub fn is_treated(mob: i32) -> bool {
    mob >= 0
}

/// Calendar month (1-12) for a normalized value.
pub fn month_of(mob: i32) -> u8 {
    ((mob + i32::from(CUTOFF_MONTH) - 1).rem_euclid(12) + 1) as u8
}

/// `Panel A: May - December` style title.
pub fn panel_title(index: usize, bandwidth: u8) -> String {
    let b = i32::from(bandwidth);
    format!(
        "Panel {}: {} - {}",
        (b'A' + index as u8) as char,
        MONTHS[month_of(-b) as usize - 1],
        MONTHS[month_of(b - 1) as usize - 1]
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RddSpec {
    pub outcome: String,
    /// Calendar month column, values 1-12.
    pub month_column: String,
    /// Months kept on each side; 6 keeps the whole year.
    pub bandwidth: u8,
    pub controls: Vec<String>,
    pub se_type: SeType,
}

impl RddSpec {
    pub fn new(outcome: &str, bandwidth: u8) -> Result<Self> {
        if !(1..=6).contains(&bandwidth) {
            return Err(MegaError::InvalidArgument(format!("bandwidth {bandwidth} outside 1-6 months")));
        }
        Ok(RddSpec {
            outcome: outcome.to_string(),
            month_column: "birth_month".into(),
            bandwidth,
            controls: Vec::new(),
            se_type: SeType::Hc1,
        })
    }

    pub fn with_controls<S: AsRef<str>>(mut self, controls: &[S]) -> Self {
        self.controls = controls.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_month_column(mut self, name: &str) -> Self {
        self.month_column = name.to_string();
        self
    }

    pub fn with_outcome(&self, outcome: &str) -> Self {
        RddSpec {
            outcome: outcome.to_string(),
            ..self.clone()
        }
    }

    pub fn in_window(&self, mob: i32) -> bool {
        let b = i32::from(self.bandwidth);
        (-b..b).contains(&mob)
    }
}

/// Bandwidth-restricted rows with `treat`, `mob`, `treat_x_mob` attached.
pub fn window(spec: &RddSpec, data: &CohortTable) -> Result<CohortTable> {
    let months = data.column(&spec.month_column)?;
    let mut keep = Vec::with_capacity(data.n_rows());
    for v in months.values() {
        keep.push(match v {
            Some(m) => {
                if m.fract() != 0.0 {
                    return Err(MegaError::InvalidArgument(format!("month value {m} is not an integer")));
                }
                spec.in_window(normalize_running(*m as u8)?)
            }
            None => false,
        });
    }
    let sub = data.filter_rows(&keep);
    let mob: Vec<f64> = sub
        .column(&spec.month_column)?
        .values()
        .iter()
        .map(|m| f64::from(normalize_running(m.unwrap() as u8).unwrap()))
        .collect();
    let treat: Vec<f64> = mob.iter().map(|&m| if m >= 0.0 { 1.0 } else { 0.0 }).collect();
    let inter: Vec<f64> = mob.iter().zip(&treat).map(|(m, t)| m * t).collect();
    sub.with_column(Column::from_f64(TREAT, &treat))?
        .with_column(Column::from_f64(MOB, &mob))?
        .with_column(Column::from_f64(TREAT_X_MOB, &inter))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RddFit {
    pub outcome: String,
    pub bandwidth: u8,
    /// Jump at the cutoff.
    pub theta1: Estimate,
    pub theta2: Estimate,
    pub theta3: Estimate,
    pub n: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub placebo: bool,
    pub regression: RegressionFit,
}

fn side_counts(table: &CohortTable) -> Result<(usize, usize)> {
    let t = table.numeric(TREAT)?;
    let right = t.iter().filter(|&&v| v == 1.0).count();
    Ok((t.len() - right, right))
}

fn estimate_of(fit: &RegressionFit, name: &str) -> Result<Estimate> {
    Ok(Estimate::new(fit.coef(name)?, fit.se(name)?, fit.df_resid()))
}

/// Interacted local-linear specification on the bandwidth sample.
pub fn rdd_fit(spec: &RddSpec, data: &CohortTable) -> Result<RddFit> {
    let win = window(spec, data)?;
    let mut vars: Vec<&str> = vec![spec.outcome.as_str()];
    vars.extend(spec.controls.iter().map(String::as_str));
    let (win, _) = win.select_complete(&vars)?;
    let (n_left, n_right) = side_counts(&win)?;
    if n_left == 0 || n_right == 0 {
        return Err(MegaError::EmptySide(format!(
            "{n_left} rows before and {n_right} after the cutoff within {} months",
            spec.bandwidth
        )));
    }
    let mut regs: Vec<String> = vec![TREAT.into(), MOB.into(), TREAT_X_MOB.into()];
    regs.extend(spec.controls.iter().cloned());
    let lm = LinearModelSpec::new(&spec.outcome, &regs)?.with_se(spec.se_type);
    let regression = ols_fit(&lm, &win)?;
    Ok(RddFit {
        outcome: spec.outcome.clone(),
        bandwidth: spec.bandwidth,
        theta1: estimate_of(&regression, TREAT)?,
        theta2: estimate_of(&regression, MOB)?,
        theta3: estimate_of(&regression, TREAT_X_MOB)?,
        n: regression.n,
        n_left,
        n_right,
        placebo: false,
        regression,
    })
}

/// Same estimator on a pre-treatment outcome; the fit is flagged as a
/// placebo, whose jump is expected to be null.
pub fn placebo_outcome(spec: &RddSpec, placebo_column: &str, data: &CohortTable) -> Result<RddFit> {
    let col = data.column(placebo_column)?;
    if col.n_missing() == col.len() {
        return Err(MegaError::InsufficientData(format!("placebo column `{placebo_column}` is empty")));
    }
    let mut fit = rdd_fit(&spec.with_outcome(placebo_column), data)?;
    fit.placebo = true;
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeterogeneityMode {
    /// One regression with class-dummy triple interactions.
    #[default]
    Pooled,
    /// Separate fits per class.
    SplitSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEffect {
    pub level: String,
    pub n: usize,
    pub theta1: Estimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heterogeneity {
    pub class_column: String,
    pub mode: HeterogeneityMode,
    pub effects: Vec<ClassEffect>,
    /// Equality of the jump across classes (pooled mode only).
    pub equality_test: Option<WaldTest>,
    pub pooled: Option<RegressionFit>,
}

impl Heterogeneity {
    pub fn effect(&self, level: &str) -> Option<&ClassEffect> {
        self.effects.iter().find(|e| e.level == level)
    }

    /// Effect and 95% interval per class, for plotting.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .effects
            .iter()
            .map(|e| {
                let (lo, hi) = e.theta1.ci(0.95);
                vec![
                    e.level.clone(),
                    e.n.to_string(),
                    e.theta1.estimate.to_string(),
                    e.theta1.se.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    e.theta1.p_value.to_string(),
                ]
            })
            .collect();
        csv_bytes(&["class", "n", "effect", "se", "ci_low", "ci_high", "p"], &rows)
    }
}

/// Per-class jumps. Pooled mode recovers each class's jump as a linear
/// combination with delta-method standard errors.
pub fn rdd_heterogeneity(
    spec: &RddSpec,
    class_column: &str,
    data: &CohortTable,
    mode: HeterogeneityMode,
) -> Result<Heterogeneity> {
    let class = data.column(class_column)?;
    if class.kind() != ColumnKind::Categorical {
        return Err(MegaError::WrongKind {
            column: class_column.to_string(),
            expected: ColumnKind::Categorical.as_str(),
            found: class.kind().as_str(),
        });
    }
    let levels = class.levels().to_vec();
    if levels.len() < 2 {
        return Err(MegaError::InvalidArgument(format!("`{class_column}` needs at least two levels")));
    }
    let win = window(spec, data)?;
    let mut vars: Vec<&str> = vec![spec.outcome.as_str(), class_column];
    vars.extend(spec.controls.iter().map(String::as_str));
    let (win, _) = win.select_complete(&vars)?;
    let codes: Vec<usize> = win.column(class_column)?.values().iter().map(|v| v.unwrap() as usize).collect();
    let treat = win.numeric(TREAT)?;
    for (c, level) in levels.iter().enumerate() {
        let left = (0..codes.len()).filter(|&i| codes[i] == c && treat[i] == 0.0).count();
        let right = (0..codes.len()).filter(|&i| codes[i] == c && treat[i] == 1.0).count();
        if left == 0 || right == 0 {
            return Err(MegaError::EmptySide(format!(
                "class `{level}` has {left} rows before and {right} after the cutoff"
            )));
        }
    }

    if mode == HeterogeneityMode::SplitSample {
        let mut effects = Vec::new();
        for (c, level) in levels.iter().enumerate() {
            let keep: Vec<bool> = codes.iter().map(|&k| k == c).collect();
            let sub = win.filter_rows(&keep);
            let fit = rdd_fit(spec, &sub)?;
            effects.push(ClassEffect {
                level: level.clone(),
                n: fit.n,
                theta1: fit.theta1,
            });
        }
        return Ok(Heterogeneity {
            class_column: class_column.to_string(),
            mode,
            effects,
            equality_test: None,
            pooled: None,
        });
    }

    let base = [TREAT, MOB, TREAT_X_MOB];
    let base_cols: Vec<Vec<f64>> = base.iter().map(|b| win.numeric(b)).collect::<Result<_>>()?;
    let controls: Vec<&str> = spec.controls.iter().map(String::as_str).collect();
    let w = win.design(&controls)?;
    let n = win.n_rows();
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(base.iter().map(|s| s.to_string()));
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    cols.extend(base_cols.iter().cloned());
    for (c, level) in levels.iter().enumerate().skip(1) {
        let d: Vec<f64> = codes.iter().map(|&k| if k == c { 1.0 } else { 0.0 }).collect();
        names.push(format!("{class_column}={level}"));
        cols.push(d.clone());
        for (b, bc) in base.iter().zip(&base_cols) {
            names.push(format!("{class_column}={level}#{b}"));
            cols.push(d.iter().zip(bc).map(|(x, y)| x * y).collect());
        }
    }
    names.extend(w.names.iter().cloned());
    for j in 0..w.matrix.ncols() {
        cols.push(w.matrix.column(j).iter().copied().collect());
    }
    let x = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    let y = DVector::from_vec(win.numeric(&spec.outcome)?);
    let mut fit = ols(&x, &y, names, spec.se_type)?;
    fit.outcome = spec.outcome.clone();

    let k = fit.k();
    let treat_idx = fit.index(TREAT)?;
    let mut effects = Vec::new();
    let mut restrictions = Vec::new();
    for (c, level) in levels.iter().enumerate() {
        let mut a = DVector::zeros(k);
        a[treat_idx] = 1.0;
        if c > 0 {
            let j = fit.index(&format!("{class_column}={level}#{TREAT}"))?;
            a[j] = 1.0;
            let mut r = DVector::zeros(k);
            r[j] = 1.0;
            restrictions.push(r);
        }
        effects.push(ClassEffect {
            level: level.clone(),
            n: codes.iter().filter(|&&v| v == c).count(),
            theta1: fit.linear_combination(&a)?,
        });
    }
    let r = DMatrix::from_fn(restrictions.len(), k, |i, j| restrictions[i][j]);
    let equality_test = Some(fit.wald(&r, &DVector::zeros(restrictions.len()))?);
    Ok(Heterogeneity {
        class_column: class_column.to_string(),
        mode,
        effects,
        equality_test,
        pooled: Some(fit),
    })
}

/// Table with one panel per bandwidth and one column per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RddTable {
    pub column_labels: Vec<String>,
    /// Fits per panel, aligned with `column_labels`.
    pub panels: Vec<Vec<RddFit>>,
}

impl RddTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut rows = Vec::new();
        for (p, fits) in self.panels.iter().enumerate() {
            for (label, fit) in self.column_labels.iter().zip(fits) {
                for (term, e) in [(TREAT, fit.theta1), (MOB, fit.theta2), (TREAT_X_MOB, fit.theta3)] {
                    rows.push(vec![
                        panel_title(p, fit.bandwidth),
                        fit.bandwidth.to_string(),
                        label.clone(),
                        term.to_string(),
                        e.estimate.to_string(),
                        e.se.to_string(),
                        e.p_value.to_string(),
                        fit.n.to_string(),
                        fit.regression.adj_r2.to_string(),
                        fit.placebo.to_string(),
                    ]);
                }
            }
        }
        csv_bytes(
            &["panel", "bandwidth", "column", "term", "coef", "se", "p", "n", "adj_r2", "placebo"],
            &rows,
        )
    }
}

impl fmt::Display for RddTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = 16;
        write!(f, "{:<16}", "")?;
        for (i, label) in self.column_labels.iter().enumerate() {
            write!(f, "{:>width$}", format!("({}) {}", i + 1, label))?;
        }
        writeln!(f)?;
        for (p, fits) in self.panels.iter().enumerate() {
            let Some(first) = fits.first() else { continue };
            writeln!(f, "{}", panel_title(p, first.bandwidth))?;
            for (label, pick) in [
                ("Treat", 0usize),
                ("MoB", 1),
                ("Treat x MoB", 2),
            ] {
                write!(f, "{label:<16}")?;
                let est = |fit: &RddFit| [fit.theta1, fit.theta2, fit.theta3][pick];
                for fit in fits {
                    let e = est(fit);
                    write!(f, "{:>width$}", coef_cell(e.estimate, e.p_value))?;
                }
                writeln!(f)?;
                write!(f, "{:<16}", "")?;
                for fit in fits {
                    write!(f, "{:>width$}", se_cell(est(fit).se))?;
                }
                writeln!(f)?;
            }
            write!(f, "{:<16}", "Observations")?;
            for fit in fits {
                write!(f, "{:>width$}", fit.n)?;
            }
            writeln!(f)?;
            write!(f, "{:<16}", "Adj. R-squared")?;
            for fit in fits {
                write!(f, "{:>width$.3}", fit.regression.adj_r2)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "Robust standard errors in parentheses")?;
        writeln!(f, "*** p<0.01, ** p<0.05, * p<0.1")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_running(9).unwrap(), 0);
        assert_eq!(normalize_running(8).unwrap(), -1);
        assert_eq!(normalize_running(10).unwrap(), 1);
        assert_eq!(normalize_running(5).unwrap(), -4);
        assert_eq!(normalize_running(12).unwrap(), 3);
        assert!(is_treated(0) && !is_treated(-1));
        assert!(normalize_running(0).is_err());
        assert!(normalize_running(13).is_err());
        for m in 1..=12 {
            assert_eq!(month_of(normalize_running(m).unwrap()), m);
        }
    }

    #[test]
    fn panel_titles() {
        assert_eq!(panel_title(0, 4), "Panel A: May - December");
        assert_eq!(panel_title(1, 3), "Panel B: June - November");
        assert_eq!(panel_title(2, 2), "Panel C: July - October");
    }

    fn months_table(months: &[u8], y: &[f64]) -> CohortTable {
        CohortTable::new(
            (0..months.len()).map(|i| i.to_string()).collect(),
            vec![
                Column::from_f64("birth_month", &months.iter().map(|&m| f64::from(m)).collect::<Vec<_>>()),
                Column::from_f64("y", y),
            ],
        )
        .unwrap()
    }

    #[test]
    fn window_counts_uniform_calendar() {
        let months: Vec<u8> = (0..120).map(|i| (i % 12) as u8 + 1).collect();
        let y: Vec<f64> = (0..120).map(|i| i as f64 * 0.1).collect();
        let t = months_table(&months, &y);
        for (b, n) in [(4, 80), (3, 60), (2, 40), (6, 120)] {
            assert_eq!(window(&RddSpec::new("y", b).unwrap(), &t).unwrap().n_rows(), n);
        }
    }

    #[test]
    fn empty_side_is_error() {
        let months = [9u8, 10, 11, 12, 9, 10];
        let t = months_table(&months, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(
            rdd_fit(&RddSpec::new("y", 4).unwrap(), &t),
            Err(MegaError::EmptySide(_))
        ));
    }

    #[test]
    fn exact_jump_recovered() {
        let months: Vec<u8> = (0..48).map(|i| (i % 12) as u8 + 1).collect();
        let y: Vec<f64> = months
            .iter()
            .map(|&m| {
                let mob = f64::from(normalize_running(m).unwrap());
                1.0 + 0.7 * f64::from(u8::from(mob >= 0.0)) + 0.05 * mob
            })
            .collect();
        let t = months_table(&months, &y);
        let fit = rdd_fit(&RddSpec::new("y", 4).unwrap(), &t).unwrap();
        assert!((fit.theta1.estimate - 0.7).abs() < 1e-10);
        assert!((fit.theta2.estimate - 0.05).abs() < 1e-10);
        assert!(fit.theta3.estimate.abs() < 1e-10);
        assert_eq!((fit.n_left, fit.n_right), (16, 16));
    }

    #[test]
    fn placebo_equal_to_outcome_gives_same_fit() {
        let months: Vec<u8> = (0..60).map(|i| (i % 12) as u8 + 1).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 7919) % 13) as f64).collect();
        let t = months_table(&months, &y).with_column(Column::from_f64("p", &y)).unwrap();
        let spec = RddSpec::new("y", 3).unwrap();
        let a = rdd_fit(&spec, &t).unwrap();
        let b = placebo_outcome(&spec, "p", &t).unwrap();
        assert!(b.placebo && !a.placebo);
        assert_eq!(a.theta1, b.theta1);
        let t = t.with_column(Column::continuous("empty", vec![None; 60])).unwrap();
        assert!(placebo_outcome(&spec, "empty", &t).is_err());
    }
}
