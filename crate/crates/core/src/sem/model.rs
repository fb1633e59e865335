//! Model description, parameter layout and the model file format.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{MegaError, Result};

/// One latent variable and its indicators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentBlock {
    pub name: String,
    pub indicators: Vec<String>,
    /// Indicator whose loading is fixed at 1.
    pub reference: String,
}

impl LatentBlock {
    pub fn new<S: AsRef<str>>(name: &str, indicators: &[S], reference: &str) -> Self {
        LatentBlock {
            name: name.to_string(),
            indicators: indicators.iter().map(|s| s.as_ref().to_string()).collect(),
            reference: reference.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Structural {
    /// Every latent regressed on the covariates.
    LatentOnCovariates { covariates: Vec<String> },
    /// Outcomes regressed on the latents and controls; latents may covary
    /// freely with the controls.
    OutcomeOnLatent { outcomes: Vec<String>, controls: Vec<String> },
}

/// A free parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Loading of observed row `j` on latent `a`.
    Lambda(usize, usize),
    /// Latent `a` on exogenous column `q`.
    Gamma(usize, usize),
    /// Direct effect of exogenous column `q` on observed row `j` (outcomes only).
    Direct(usize, usize),
    /// Latent (co)variance, `a >= b`.
    Psi(usize, usize),
    /// Residual variance of observed row `j`.
    Theta(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemModel {
    pub blocks: Vec<LatentBlock>,
    pub structural: Structural,
    /// Observed endogenous columns: block indicators in order, then outcomes.
    pub observed: Vec<String>,
    /// Exogenous columns (covariates or controls).
    pub exogenous: Vec<String>,
    /// Latent index of each indicator row; `None` for outcome rows.
    pub row_latent: Vec<Option<usize>>,
    /// Row index of each latent's reference indicator.
    pub reference_rows: Vec<usize>,
    pub df: i64,
}

/// Validates the model and computes its degrees of freedom.
pub fn build_mimic(blocks: Vec<LatentBlock>, structural: Structural) -> Result<SemModel> {
    if blocks.is_empty() {
        return Err(MegaError::UnderIdentified("no latent variables".into()));
    }
    let mut observed = Vec::new();
    let mut row_latent = Vec::new();
    let mut reference_rows = Vec::new();
    let mut seen = HashSet::new();
    let mut latent_names = HashSet::new();
    for (a, block) in blocks.iter().enumerate() {
        if !latent_names.insert(block.name.as_str()) {
            return Err(MegaError::InvalidArgument(format!("latent `{}` defined twice", block.name)));
        }
        if block.indicators.len() < 2 {
            return Err(MegaError::UnderIdentified(format!(
                "latent `{}` has {} indicator(s); at least 2 are needed",
                block.name,
                block.indicators.len()
            )));
        }
        let Some(pos) = block.indicators.iter().position(|i| *i == block.reference) else {
            return Err(MegaError::InvalidArgument(format!(
                "reference `{}` is not an indicator of `{}`",
                block.reference, block.name
            )));
        };
        reference_rows.push(observed.len() + pos);
        for ind in &block.indicators {
            if !seen.insert(ind.clone()) {
                return Err(MegaError::InvalidArgument(format!("indicator `{ind}` assigned twice")));
            }
            observed.push(ind.clone());
            row_latent.push(Some(a));
        }
    }
    let exogenous = match &structural {
        Structural::LatentOnCovariates { covariates } => covariates.clone(),
        Structural::OutcomeOnLatent { outcomes, controls } => {
            if outcomes.is_empty() {
                return Err(MegaError::InvalidArgument("outcome-on-latent model needs an outcome".into()));
            }
            for o in outcomes {
                if !seen.insert(o.clone()) {
                    return Err(MegaError::InvalidArgument(format!("outcome `{o}` is also an indicator")));
                }
                observed.push(o.clone());
                row_latent.push(None);
            }
            controls.clone()
        }
    };
    for x in &exogenous {
        if !seen.insert(x.clone()) {
            return Err(MegaError::InvalidArgument(format!("column `{x}` is both endogenous and exogenous")));
        }
    }
    let mut model = SemModel {
        blocks,
        structural,
        observed,
        exogenous,
        row_latent,
        reference_rows,
        df: 0,
    };
    let j = model.n_observed() as i64;
    let q = model.n_exogenous() as i64;
    let moments = j * (j + 1) / 2 + j * q;
    model.df = moments - model.slots(&[]).len() as i64;
    if model.df < 0 {
        return Err(MegaError::UnderIdentified(format!(
            "{} free parameters for {moments} moments",
            moments - model.df
        )));
    }
    Ok(model)
}

impl SemModel {
    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn n_exogenous(&self) -> usize {
        self.exogenous.len()
    }

    pub fn n_latent(&self) -> usize {
        self.blocks.len()
    }

    pub fn outcomes(&self) -> &[String] {
        match &self.structural {
            Structural::OutcomeOnLatent { outcomes, .. } => outcomes,
            Structural::LatentOnCovariates { .. } => &[],
        }
    }

    pub fn is_latent_on_covariates(&self) -> bool {
        matches!(self.structural, Structural::LatentOnCovariates { .. })
    }

    pub fn latent_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| MegaError::UnknownColumn(name.to_string()))
    }

    pub fn row_of(&self, observed: &str) -> Result<usize> {
        self.observed
            .iter()
            .position(|o| o == observed)
            .ok_or_else(|| MegaError::UnknownColumn(observed.to_string()))
    }

    /// All columns the model reads.
    pub fn columns(&self) -> Vec<&str> {
        self.observed.iter().chain(&self.exogenous).map(String::as_str).collect()
    }

    /// Free parameters, skipping residual variances of `pinned` rows.
    pub fn slots(&self, pinned: &[usize]) -> Vec<Slot> {
        let a_n = self.n_latent();
        let q_n = self.n_exogenous();
        let mut out = Vec::new();
        for (j, lat) in self.row_latent.iter().enumerate() {
            match lat {
                Some(a) if !self.reference_rows.contains(&j) => out.push(Slot::Lambda(j, *a)),
                Some(_) => {}
                None => out.extend((0..a_n).map(|a| Slot::Lambda(j, a))),
            }
        }
        for a in 0..a_n {
            out.extend((0..q_n).map(|q| Slot::Gamma(a, q)));
        }
        for (j, lat) in self.row_latent.iter().enumerate() {
            if lat.is_none() {
                out.extend((0..q_n).map(|q| Slot::Direct(j, q)));
            }
        }
        for a in 0..a_n {
            for b in 0..=a {
                out.push(Slot::Psi(a, b));
            }
        }
        out.extend((0..self.n_observed()).filter(|j| !pinned.contains(j)).map(Slot::Theta));
        out
    }

    pub fn slot_name(&self, slot: Slot) -> String {
        let lat = |a: usize| self.blocks[a].name.as_str();
        match slot {
            Slot::Lambda(j, a) => format!("lambda:{}:{}", lat(a), self.observed[j]),
            Slot::Gamma(a, q) => format!("gamma:{}:{}", lat(a), self.exogenous[q]),
            Slot::Direct(j, q) => format!("beta:{}:{}", self.observed[j], self.exogenous[q]),
            Slot::Psi(a, b) if a == b => format!("psi:{}", lat(a)),
            Slot::Psi(a, b) => format!("psi:{}:{}", lat(b), lat(a)),
            Slot::Theta(j) => format!("theta:{}", self.observed[j]),
        }
    }
}

/// Model matrices in natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrices {
    /// `J x A` loadings, references fixed at 1.
    pub lambda: DMatrix<f64>,
    /// `A x Q` latent-on-exogenous coefficients.
    pub gamma: DMatrix<f64>,
    /// `J x Q` direct effects (outcome rows only).
    pub direct: DMatrix<f64>,
    /// `A x A` latent residual covariance.
    pub psi: DMatrix<f64>,
    /// `J` residual variances.
    pub theta: DVector<f64>,
}

impl Matrices {
    pub fn zeros(model: &SemModel) -> Self {
        let (j, a, q) = (model.n_observed(), model.n_latent(), model.n_exogenous());
        let mut lambda = DMatrix::zeros(j, a);
        for (lat, &row) in model.reference_rows.iter().enumerate() {
            lambda[(row, lat)] = 1.0;
        }
        Matrices {
            lambda,
            gamma: DMatrix::zeros(a, q),
            direct: DMatrix::zeros(j, q),
            psi: DMatrix::zeros(a, a),
            theta: DVector::zeros(j),
        }
    }

    pub fn get(&self, slot: Slot) -> f64 {
        match slot {
            Slot::Lambda(j, a) => self.lambda[(j, a)],
            Slot::Gamma(a, q) => self.gamma[(a, q)],
            Slot::Direct(j, q) => self.direct[(j, q)],
            Slot::Psi(a, b) => self.psi[(a, b)],
            Slot::Theta(j) => self.theta[j],
        }
    }

    pub fn set(&mut self, slot: Slot, v: f64) {
        match slot {
            Slot::Lambda(j, a) => self.lambda[(j, a)] = v,
            Slot::Gamma(a, q) => self.gamma[(a, q)] = v,
            Slot::Direct(j, q) => self.direct[(j, q)] = v,
            Slot::Psi(a, b) => {
                self.psi[(a, b)] = v;
                self.psi[(b, a)] = v;
            }
            Slot::Theta(j) => self.theta[j] = v,
        }
    }

    pub fn pack(&self, slots: &[Slot]) -> DVector<f64> {
        DVector::from_iterator(slots.len(), slots.iter().map(|&s| self.get(s)))
    }

    /// Fills `slots` from `p`; fixed entries keep their current values.
    pub fn unpack(&self, slots: &[Slot], p: &DVector<f64>) -> Matrices {
        let mut m = self.clone();
        for (&s, &v) in slots.iter().zip(p.iter()) {
            m.set(s, v);
        }
        m
    }

    /// Implied reduced-form coefficients `Pi = Lambda Gamma + B`.
    pub fn pi(&self) -> DMatrix<f64> {
        &self.lambda * &self.gamma + &self.direct
    }

    /// Implied residual covariance `Lambda Psi Lambda' + Theta`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let mut s = &self.lambda * &self.psi * self.lambda.transpose();
        for j in 0..self.theta.len() {
            s[(j, j)] += self.theta[j];
        }
        s
    }
}

/// Parses the block model file:
///
/// ```text
/// [latent EA]
/// indicators = clock_a, clock_b, clock_c
/// reference = clock_a
///
/// [structural]
/// covariates = x1, x2
/// ```
///
/// The structural block takes either `covariates` or `outcomes` plus
/// optional `controls`.
pub fn parse_model_spec(text: &str) -> Result<SemModel> {
    enum Section {
        None,
        Latent(usize),
        Structural,
    }
    let list = |v: &str| -> Vec<String> {
        v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    };
    let mut blocks: Vec<LatentBlock> = Vec::new();
    let mut covariates: Option<Vec<String>> = None;
    let mut outcomes: Option<Vec<String>> = None;
    let mut controls: Option<Vec<String>> = None;
    let mut section = Section::None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| MegaError::Config(format!("model line {}: {msg}", lineno + 1));
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let mut parts = header.split_whitespace();
            section = match (parts.next(), parts.next(), parts.next()) {
                (Some("latent"), Some(name), None) => {
                    blocks.push(LatentBlock {
                        name: name.to_string(),
                        indicators: Vec::new(),
                        reference: String::new(),
                    });
                    Section::Latent(blocks.len() - 1)
                }
                (Some("structural"), None, None) => Section::Structural,
                _ => return Err(err(&format!("unknown section `[{header}]`"))),
            };
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        match (&section, key) {
            (Section::Latent(i), "indicators") => blocks[*i].indicators = list(value),
            (Section::Latent(i), "reference") => blocks[*i].reference = value.to_string(),
            (Section::Structural, "covariates") => covariates = Some(list(value)),
            (Section::Structural, "outcomes") => outcomes = Some(list(value)),
            (Section::Structural, "controls") => controls = Some(list(value)),
            (Section::None, _) => return Err(err("key outside a section")),
            _ => return Err(err(&format!("unknown key `{key}`"))),
        }
    }
    for b in &mut blocks {
        if b.reference.is_empty() {
            if let Some(first) = b.indicators.first() {
                b.reference = first.clone();
            }
        }
    }
    let structural = match (covariates, outcomes) {
        (Some(_), Some(_)) => {
            return Err(MegaError::Config("structural section has both covariates and outcomes".into()));
        }
        (Some(covariates), None) => {
            if controls.is_some() {
                return Err(MegaError::Config("controls need outcomes".into()));
            }
            Structural::LatentOnCovariates { covariates }
        }
        (None, Some(outcomes)) => Structural::OutcomeOnLatent {
            outcomes,
            controls: controls.unwrap_or_default(),
        },
        (None, None) => Structural::LatentOnCovariates { covariates: Vec::new() },
    };
    build_mimic(blocks, structural)
}

impl fmt::Display for SemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(f, "[latent {}]", b.name)?;
            writeln!(f, "indicators = {}", b.indicators.join(", "))?;
            writeln!(f, "reference = {}", b.reference)?;
            writeln!(f)?;
        }
        writeln!(f, "[structural]")?;
        match &self.structural {
            Structural::LatentOnCovariates { covariates } => writeln!(f, "covariates = {}", covariates.join(", ")),
            Structural::OutcomeOnLatent { outcomes, controls } => {
                writeln!(f, "outcomes = {}", outcomes.join(", "))?;
                writeln!(f, "controls = {}", controls.join(", "))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn parameter_count_four_clocks_ten_covariates() {
        let m = build_mimic(
            vec![LatentBlock::new("EA", &names("c", 4), "c1")],
            Structural::LatentOnCovariates {
                covariates: names("x", 10),
            },
        )
        .unwrap();
        let slots = m.slots(&[]);
        let count = |f: fn(&Slot) -> bool| slots.iter().filter(|s| f(s)).count();
        assert_eq!(count(|s| matches!(s, Slot::Lambda(..))), 3);
        assert_eq!(count(|s| matches!(s, Slot::Gamma(..))), 10);
        assert_eq!(count(|s| matches!(s, Slot::Psi(..) | Slot::Theta(..))), 5);
        assert_eq!(m.df, 10 + 40 - 18);
    }

    #[test]
    fn single_indicator_is_under_identified() {
        let r = build_mimic(
            vec![LatentBlock::new("EA", &["c1"], "c1")],
            Structural::LatentOnCovariates { covariates: vec![] },
        );
        assert!(matches!(r, Err(MegaError::UnderIdentified(_))));
    }

    #[test]
    fn negative_df_rejected() {
        let r = build_mimic(
            vec![LatentBlock::new("EA", &["c1", "c2"], "c1")],
            Structural::LatentOnCovariates { covariates: vec![] },
        );
        assert!(matches!(r, Err(MegaError::UnderIdentified(_))));
    }

    #[test]
    fn duplicate_indicator_rejected() {
        let r = build_mimic(
            vec![
                LatentBlock::new("A", &["c1", "c2", "c3"], "c1"),
                LatentBlock::new("B", &["c3", "c4", "c5"], "c3"),
            ],
            Structural::LatentOnCovariates { covariates: vec![] },
        );
        assert!(matches!(r, Err(MegaError::InvalidArgument(_))));
    }

    #[test]
    fn three_block_outcome_model_builds() {
        let text = "\
[latent EA]
indicators = c1, c2, c3, c4
reference = c1

[latent COG]
indicators = g1, g2, g3, g4

[latent SOC]
indicators = s1, s2, s3, s4, s5

[structural]
outcomes = neet
controls = bmi, smoker, drinker
";
        let m = parse_model_spec(text).unwrap();
        assert_eq!(m.n_latent(), 3);
        assert_eq!(m.blocks[1].reference, "g1");
        assert_eq!(m.outcomes(), ["neet".to_string()]);
        assert!(m.df > 0);
        assert_eq!(parse_model_spec(&m.to_string()).unwrap(), m);
    }

    #[test]
    fn model_file_errors() {
        assert!(parse_model_spec("indicators = a").is_err());
        assert!(parse_model_spec("[latent A]\nfoo = 1").is_err());
        assert!(parse_model_spec("[measurement]").is_err());
    }
}
