//! CSV and aligned-text rendering shared by the result types.

use std::fmt;

use crate::error::Result;
use crate::inference::{RegressionFit, SeType};

/// RFC-4180 CSV bytes for a header plus string rows.
pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    w.into_inner()
        .map_err(|e| crate::error::MegaError::Csv(e.to_string()))
}

/// Significance stars: `*` p<0.1, `**` p<0.05, `***` p<0.01.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// `0.539**` style cell.
pub fn coef_cell(coef: f64, p: f64) -> String {
    format!("{coef:.3}{}", stars(p))
}

/// `(0.251)` style cell.
pub fn se_cell(se: f64) -> String {
    format!("({se:.3})")
}

/// Side-by-side regression columns for the terms in `rows`.
#[derive(Debug, Clone)]
pub struct RegressionTable {
    pub column_labels: Vec<String>,
    pub fits: Vec<RegressionFit>,
    /// Terms shown, with display labels; terms absent from a column are left blank.
    pub rows: Vec<(String, String)>,
    pub notes: Vec<String>,
}

impl RegressionTable {
    pub fn new(fits: Vec<RegressionFit>, rows: Vec<(String, String)>) -> Self {
        let column_labels = fits.iter().map(|f| f.outcome.clone()).collect();
        RegressionTable {
            column_labels,
            fits,
            rows,
            notes: Vec::new(),
        }
    }

    /// One CSV row per (column, term) pair.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (i, (label, fit)) in self.column_labels.iter().zip(&self.fits).enumerate() {
            for (term, _) in &self.rows {
                let Ok(j) = fit.index(term) else { continue };
                out.push(vec![
                    (i + 1).to_string(),
                    label.clone(),
                    term.clone(),
                    fit.coefficients[j].to_string(),
                    fit.std_errors[j].to_string(),
                    fit.p_values[j].to_string(),
                    fit.n.to_string(),
                    fit.adj_r2.to_string(),
                    fit.se_type.key().to_string(),
                ]);
            }
        }
        csv_bytes(
            &["column", "label", "term", "estimate", "se", "p", "n", "adj_r2", "se_type"],
            &out,
        )
    }

    /// Point estimate and 95% interval per (column, term), for plotting.
    pub fn plot_data(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (label, fit) in self.column_labels.iter().zip(&self.fits) {
            for (term, display) in &self.rows {
                let Ok(j) = fit.index(term) else { continue };
                let est = crate::inference::Estimate::new(fit.coefficients[j], fit.std_errors[j], fit.df_resid());
                let (lo, hi) = est.ci(0.95);
                out.push(vec![
                    label.clone(),
                    display.clone(),
                    est.estimate.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ]);
            }
        }
        csv_bytes(&["category", "term", "estimate", "ci_low", "ci_high"], &out)
    }
}

impl fmt::Display for RegressionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lw = self.rows.iter().map(|(_, l)| l.len()).chain([14]).max().unwrap_or(14) + 2;
        let width = self
            .column_labels
            .iter()
            .enumerate()
            .map(|(i, l)| format!("({}) {l}", i + 1).len() + 2)
            .chain([12])
            .max()
            .unwrap_or(12);
        write!(f, "{:<lw$}", "")?;
        for (i, label) in self.column_labels.iter().enumerate() {
            write!(f, "{:>width$}", format!("({}) {label}", i + 1))?;
        }
        writeln!(f)?;
        for (term, display) in &self.rows {
            write!(f, "{display:<lw$}")?;
            for fit in &self.fits {
                let cell = fit
                    .index(term)
                    .map(|j| coef_cell(fit.coefficients[j], fit.p_values[j]))
                    .unwrap_or_default();
                write!(f, "{cell:>width$}")?;
            }
            writeln!(f)?;
            write!(f, "{:<lw$}", "")?;
            for fit in &self.fits {
                let cell = fit.index(term).map(|j| se_cell(fit.std_errors[j])).unwrap_or_default();
                write!(f, "{cell:>width$}")?;
            }
            writeln!(f)?;
        }
        write!(f, "{:<lw$}", "Observations")?;
        for fit in &self.fits {
            write!(f, "{:>width$}", fit.n)?;
        }
        writeln!(f)?;
        write!(f, "{:<lw$}", "Adj. R-squared")?;
        for fit in &self.fits {
            write!(f, "{:>width$.3}", fit.adj_r2)?;
        }
        writeln!(f)?;
        let robust = self.fits.iter().all(|f| f.se_type == SeType::Hc1);
        writeln!(
            f,
            "{} standard errors in parentheses",
            if robust { "Robust" } else { "Classical" }
        )?;
        writeln!(f, "*** p<0.01, ** p<0.05, * p<0.1")?;
        for n in &self.notes {
            writeln!(f, "{n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.2), "");
        assert_eq!(stars(0.09), "*");
        assert_eq!(stars(0.04), "**");
        assert_eq!(stars(0.009), "***");
        assert_eq!(coef_cell(0.539, 0.03), "0.539**");
        assert_eq!(se_cell(0.251), "(0.251)");
    }

    #[test]
    fn csv_quotes_commas() {
        let out = csv_bytes(&["a", "b"], &[vec!["x,y", "z"]]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "a,b\n\"x,y\",z\n");
    }

    #[test]
    fn regression_table_layout() {
        use crate::inference::ols;
        use nalgebra::{DMatrix, DVector};
        let x = DMatrix::from_fn(6, 2, |r, c| if c == 0 { 1.0 } else { r as f64 });
        let y = DVector::from_vec(vec![0.1, 1.2, 1.9, 3.2, 3.9, 5.1]);
        let mut fit = ols(&x, &y, vec!["_cons".into(), "mega".into()], SeType::Classical).unwrap();
        fit.outcome = "neet".into();
        let table = RegressionTable::new(vec![fit.clone(), fit], vec![("mega".into(), "MEGA".into())]);
        let text = table.to_string();
        assert!(text.contains("(1) neet"));
        assert!(text.contains("(2) neet"));
        assert!(text.contains("***"));
        assert!(text.contains("Observations"));
        let csv = String::from_utf8(table.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let plot = String::from_utf8(table.plot_data().unwrap()).unwrap();
        assert!(plot.starts_with("category,term,estimate,ci_low,ci_high"));
    }
}
