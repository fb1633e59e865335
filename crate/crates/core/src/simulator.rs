//! Synthetic cohorts with known truth: single-factor clock panels, abuse
//! exposure designs with noisy raters, and month-of-birth cutoff designs.
//!
//! Every column draws from its own random substream, keyed by the seed and
//! the column name, so adding a column never perturbs existing ones.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::cohort::{cruelty_item_name, sex_item_name, CohortTable, Column, Period, Rater};
use crate::config::KeyValues;
use crate::error::{MegaError, Result};
use crate::rdd::normalize_running;

/// Generator for one named column.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn normals(seed: u64, name: &str, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, name);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn uniforms(seed: u64, name: &str, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, name);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn bernoullis(seed: u64, name: &str, n: usize, p: f64) -> Vec<bool> {
    let mut rng = substream(seed, name);
    let d = Bernoulli::new(p).expect("probability validated");
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

/// Error SDs that give clock `k` the standardized loading `std_loadings[k]`
/// when `C_k = a_k + lambda_k EA* + e_k` and `Var(EA*) = var_ea`.
pub fn error_sds_for_standardized(lambda: &[f64], std_loadings: &[f64], var_ea: f64) -> Result<Vec<f64>> {
    if lambda.len() != std_loadings.len() {
        return Err(MegaError::DimensionMismatch("loadings lengths differ".into()));
    }
    lambda
        .iter()
        .zip(std_loadings)
        .map(|(&l, &s)| {
            if !(s > 0.0 && s <= 1.0) {
                return Err(MegaError::InvalidArgument(format!("standardized loading {s} outside (0, 1]")));
            }
            Ok(l.abs() * var_ea.sqrt() * (1.0 / (s * s) - 1.0).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n: usize,
    pub clock_names: Vec<String>,
    /// True loadings on the latent.
    pub loadings: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub error_sds: Vec<f64>,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Effects of the standard-normal covariates `x1..xP` on the latent.
    pub gamma: Vec<f64>,
    pub omega_sd: f64,

    pub abuse_prevalence: f64,
    pub late_prevalence: f64,
    /// Probability that the late indicator copies the early one.
    pub persistence: f64,
    pub sex_abuse_prevalence: f64,
    pub abuse_effect_early: f64,
    pub abuse_effect_late: f64,
    /// Per-rater probability of failing to report a true case (mother, partner, child).
    pub miss_prob: [f64; 3],
    /// Per-rater probability of an entirely missing report.
    pub nonresponse: [f64; 3],
    pub n_mediators: usize,
    /// Share of the early effect routed through the mediators.
    pub mediated_share: f64,

    pub tau: f64,
    pub mob_slope: f64,
    pub mob_slope_treated: f64,
    pub outcome_sd: f64,
    pub month_weights: [f64; 12],
    pub class_levels: Vec<String>,
    pub class_probs: Vec<f64>,
    /// Per-class jump overriding `tau`, aligned with `class_levels`.
    pub class_tau: Option<Vec<f64>>,
    pub rdd_clocks: bool,
}

impl SimConfig {
    /// Defaults sized like a birth-cohort study sample; `seed` has no default.
    pub fn new(seed: u64) -> Self {
        SimConfig {
            seed,
            n: 448,
            clock_names: ["clock_horvath", "clock_hannum", "clock_phenoage", "clock_grimage"]
                .map(String::from)
                .to_vec(),
            loadings: vec![1.0, 0.8, 1.2, 0.9],
            intercepts: vec![0.0, 5.0, -3.0, 10.0],
            // Standardized loadings near 0.40, 0.66, 0.65, 0.62 under the default latent variance.
            error_sds: vec![2.99, 1.19, 1.83, 1.49],
            age_mean: 17.0,
            age_sd: 0.6,
            gamma: vec![0.5, -0.3],
            omega_sd: 1.0,
            abuse_prevalence: 0.35,
            late_prevalence: 0.2,
            persistence: 0.45,
            sex_abuse_prevalence: 0.05,
            abuse_effect_early: 0.5,
            abuse_effect_late: 0.0,
            miss_prob: [0.0; 3],
            nonresponse: [0.0; 3],
            n_mediators: 0,
            mediated_share: 0.0,
            tau: 0.5,
            mob_slope: 0.0,
            mob_slope_treated: 0.0,
            outcome_sd: 1.0,
            month_weights: [1.0; 12],
            class_levels: vec!["manual".into(), "non_manual".into()],
            class_probs: vec![0.5, 0.5],
            class_tau: None,
            rdd_clocks: false,
        }
    }

    pub fn k(&self) -> usize {
        self.loadings.len()
    }

    /// Reads a `key=value` config; `seed` is required.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let seed = kv
            .get::<u64>("seed")?
            .ok_or_else(|| MegaError::Config("`seed` is required".into()))?;
        let mut c = SimConfig::new(seed);
        macro_rules! scalar {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($field))? { c.$field = v; }
            )*};
        }
        macro_rules! list {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.get_list(stringify!($field))? { c.$field = v; }
            )*};
        }
        scalar!(
            n, age_mean, age_sd, omega_sd, abuse_prevalence, late_prevalence, persistence,
            sex_abuse_prevalence, abuse_effect_early, abuse_effect_late, n_mediators, mediated_share, tau,
            mob_slope, mob_slope_treated, outcome_sd, rdd_clocks
        );
        list!(clock_names, loadings, intercepts, error_sds, gamma, class_levels, class_probs);
        if let Some(v) = kv.get_list::<f64>("class_tau")? {
            c.class_tau = Some(v);
        }
        for (key, slot) in [("miss_prob", &mut c.miss_prob), ("nonresponse", &mut c.nonresponse)] {
            if let Some(v) = kv.get_list::<f64>(key)? {
                *slot = v
                    .try_into()
                    .map_err(|_| MegaError::Config(format!("`{key}` needs mother,partner,child values")))?;
            }
        }
        if let Some(v) = kv.get_list::<f64>("month_weights")? {
            c.month_weights = v
                .try_into()
                .map_err(|_| MegaError::Config("`month_weights` needs 12 values".into()))?;
        }
        if let Some(std) = kv.get_list::<f64>("standardized_loadings")? {
            if kv.get_str("error_sds").is_some() {
                return Err(MegaError::Config("give either error_sds or standardized_loadings".into()));
            }
            c.error_sds = error_sds_for_standardized(&c.loadings, &std, c.var_ea())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    /// Variance of the latent in the clock-panel design.
    pub fn var_ea(&self) -> f64 {
        self.age_sd.powi(2) + self.gamma.iter().map(|g| g * g).sum::<f64>() + self.omega_sd.powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.clock_names.len() != k || self.intercepts.len() != k || self.error_sds.len() != k {
            return Err(MegaError::Config(format!(
                "clock_names, loadings, intercepts and error_sds must all have {k} entries"
            )));
        }
        let sds = self
            .error_sds
            .iter()
            .chain([&self.age_sd, &self.omega_sd, &self.outcome_sd]);
        if sds.clone().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(MegaError::Config("standard deviations must be finite and >= 0".into()));
        }
        let probs = [
            self.abuse_prevalence,
            self.late_prevalence,
            self.persistence,
            self.sex_abuse_prevalence,
            self.mediated_share,
        ]
        .into_iter()
        .chain(self.miss_prob)
        .chain(self.nonresponse)
        .chain(self.class_probs.iter().copied());
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(MegaError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.class_levels.is_empty() || self.class_levels.len() != self.class_probs.len() {
            return Err(MegaError::Config("class_levels and class_probs differ in length".into()));
        }
        if (self.class_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MegaError::Config("class_probs must sum to 1".into()));
        }
        if let Some(t) = &self.class_tau {
            if t.len() != self.class_levels.len() {
                return Err(MegaError::Config("class_tau needs one value per class".into()));
            }
        }
        if self.month_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MegaError::Config("month weights must be >= 0".into()));
        }
        if self.mediated_share > 0.0 && self.n_mediators == 0 {
            return Err(MegaError::Config("mediated_share > 0 needs n_mediators >= 1".into()));
        }
        Ok(())
    }

    fn check_n(&self) -> Result<()> {
        if self.n <= self.k() {
            return Err(MegaError::InsufficientData(format!("N={} must exceed K={}", self.n, self.k())));
        }
        Ok(())
    }
}

fn ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i:06}")).collect()
}

/// Clock columns `a_k + lambda_k * ea + e_k`.
fn clock_columns(cfg: &SimConfig, ea: &[f64]) -> Vec<Column> {
    (0..cfg.k())
        .map(|k| {
            let name = &cfg.clock_names[k];
            let e = normals(cfg.seed, &format!("error:{name}"), ea.len());
            let vals: Vec<f64> = ea
                .iter()
                .zip(&e)
                .map(|(a, z)| cfg.intercepts[k] + cfg.loadings[k] * a + cfg.error_sds[k] * z)
                .collect();
            Column::from_f64(name.clone(), &vals)
        })
        .collect()
}

fn ages(cfg: &SimConfig) -> Vec<f64> {
    normals(cfg.seed, "age_years", cfg.n)
        .into_iter()
        .map(|z| cfg.age_mean + cfg.age_sd * z)
        .collect()
}

/// `EA* = age + X'gamma + omega`, clocks on top; truth columns hidden.
pub fn simulate_clock_panel(cfg: &SimConfig) -> Result<CohortTable> {
    cfg.validate()?;
    cfg.check_n()?;
    let n = cfg.n;
    let age = ages(cfg);
    let omega: Vec<f64> = normals(cfg.seed, "omega", n).iter().map(|z| cfg.omega_sd * z).collect();
    let xs: Vec<Vec<f64>> = (0..cfg.gamma.len())
        .map(|j| normals(cfg.seed, &format!("x{}", j + 1), n))
        .collect();
    let ea: Vec<f64> = (0..n)
        .map(|i| age[i] + cfg.gamma.iter().zip(&xs).map(|(g, x)| g * x[i]).sum::<f64>() + omega[i])
        .collect();
    let mut cols = vec![Column::from_f64("age_years", &age)];
    for (j, x) in xs.iter().enumerate() {
        cols.push(Column::from_f64(format!("x{}", j + 1), x));
    }
    cols.extend(clock_columns(cfg, &ea));
    cols.push(Column::from_f64("ea_star", &ea).into_hidden());
    cols.push(Column::from_f64("omega", &omega).into_hidden());
    CohortTable::new(ids(n), cols)
}

fn likert_report(truth: &[bool], observed: &[bool], missing: &[bool], seed: u64, name: &str, positive_from: u8) -> Result<Column> {
    let mut rng = substream(seed, &format!("likert:{name}"));
    let vals = truth
        .iter()
        .zip(observed)
        .zip(missing)
        .map(|((&t, &seen), &miss)| {
            let level = if t && seen {
                rng.random_range(positive_from..=5)
            } else {
                rng.random_range(1..positive_from)
            };
            (!miss).then_some(level)
        })
        .collect();
    Column::likert(name, vals)
}

/// Abuse exposure with persistence, rater under-reporting and an effect on
/// the latent, optionally passed through mediator columns.
pub fn simulate_abuse_cohort(cfg: &SimConfig) -> Result<CohortTable> {
    cfg.validate()?;
    cfg.check_n()?;
    let n = cfg.n;
    let seed = cfg.seed;
    let age = ages(cfg);
    let female = bernoullis(seed, "female", n, 0.5);
    let mother_age: Vec<f64> = normals(seed, "mother_age_at_birth", n)
        .iter()
        .map(|z| 29.0 + 4.5 * z)
        .collect();

    let cruelty_early = bernoullis(seed, "truth:cruelty_0_10", n, cfg.abuse_prevalence);
    let copy = bernoullis(seed, "truth:persist", n, cfg.persistence);
    let fresh = bernoullis(seed, "truth:cruelty_11_18_fresh", n, cfg.late_prevalence);
    let cruelty_late: Vec<bool> = (0..n).map(|i| if copy[i] { cruelty_early[i] } else { fresh[i] }).collect();
    let sex_early = bernoullis(seed, "truth:sex_0_10", n, cfg.sex_abuse_prevalence);
    let sex_late = bernoullis(seed, "truth:sex_11_18", n, cfg.sex_abuse_prevalence);
    let any_early: Vec<bool> = (0..n).map(|i| cruelty_early[i] || sex_early[i]).collect();
    let any_late: Vec<bool> = (0..n).map(|i| cruelty_late[i] || sex_late[i]).collect();

    let direct = cfg.abuse_effect_early * (1.0 - cfg.mediated_share);
    let mut mediators = Vec::new();
    for j in 0..cfg.n_mediators {
        // Each mediator carries an equal slice of the indirect effect: m = a*abuse + noise, b = 1.
        let a = cfg.abuse_effect_early * cfg.mediated_share / cfg.n_mediators as f64;
        let z = normals(seed, &format!("mediator_{}", j + 1), n);
        let m: Vec<f64> = (0..n).map(|i| a * f64::from(u8::from(any_early[i])) + 0.5 * z[i]).collect();
        mediators.push(m);
    }
    let omega: Vec<f64> = normals(seed, "omega", n).iter().map(|z| cfg.omega_sd * z).collect();
    let ea: Vec<f64> = (0..n)
        .map(|i| {
            age[i]
                + direct * f64::from(u8::from(any_early[i]))
                + cfg.abuse_effect_late * f64::from(u8::from(any_late[i]))
                + mediators.iter().map(|m| m[i]).sum::<f64>()
                + omega[i]
        })
        .collect();

    let mut cols = vec![
        Column::from_f64("age_years", &age),
        Column::binary("female", female.iter().map(|&b| Some(b)).collect()),
        Column::from_f64("mother_age_at_birth", &mother_age),
    ];
    for (period, truth) in [(Period::Early, &cruelty_early), (Period::Late, &cruelty_late)] {
        for (r, rater) in Rater::ALL.into_iter().enumerate() {
            let name = cruelty_item_name(rater, period);
            let seen: Vec<bool> = bernoullis(seed, &format!("miss:{name}"), n, cfg.miss_prob[r])
                .into_iter()
                .map(|m| !m)
                .collect();
            let missing = bernoullis(seed, &format!("nonresponse:{name}"), n, cfg.nonresponse[r]);
            cols.push(likert_report(truth, &seen, &missing, seed, &name, 3)?);
        }
    }
    for (period, truth) in [(Period::Early, &sex_early), (Period::Late, &sex_late)] {
        let name = sex_item_name(period);
        let seen: Vec<bool> = bernoullis(seed, &format!("miss:{name}"), n, cfg.miss_prob[2])
            .into_iter()
            .map(|m| !m)
            .collect();
        let missing = bernoullis(seed, &format!("nonresponse:{name}"), n, cfg.nonresponse[2]);
        cols.push(likert_report(truth, &seen, &missing, seed, &name, 2)?);
    }
    for (j, m) in mediators.iter().enumerate() {
        cols.push(Column::from_f64(format!("cell_count_{}", j + 1), m));
    }
    cols.extend(clock_columns(cfg, &ea));
    let hidden = |name: &str, v: &[bool]| Column::binary(name, v.iter().map(|&b| Some(b)).collect()).into_hidden();
    cols.push(hidden("true_any_0_10", &any_early));
    cols.push(hidden("true_any_11_18", &any_late));
    cols.push(hidden("true_cruelty_0_10", &cruelty_early));
    cols.push(hidden("true_cruelty_11_18", &cruelty_late));
    cols.push(Column::from_f64("ea_star", &ea).into_hidden());
    cols.push(Column::from_f64("omega", &omega).into_hidden());
    CohortTable::new(ids(n), cols)
}

/// Column names written by [`simulate_rdd_cohort`].
pub const RDD_OUTCOME: &str = "outcome";
pub const RDD_CLASS: &str = "father_social_class";
pub const RDD_PLACEBO: &str = "birth_weight";

/// Birth-month cutoff design: `y = tau_class * Treat + slope * MoB
/// + slope_treated * Treat * MoB + controls + noise`.
pub fn simulate_rdd_cohort(cfg: &SimConfig) -> Result<CohortTable> {
    cfg.validate()?;
    cfg.check_n()?;
    let n = cfg.n;
    let seed = cfg.seed;
    let total: f64 = cfg.month_weights.iter().sum();
    let before = (1..=12).filter(|&m| normalize_running(m).unwrap() < 0).map(|m| cfg.month_weights[m as usize - 1]).sum::<f64>();
    if before <= 0.0 || before >= total {
        return Err(MegaError::EmptySide("month weights leave one side of the cutoff empty".into()));
    }
    let cdf: Vec<f64> = cfg
        .month_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let months: Vec<u8> = uniforms(seed, "birth_month", n)
        .into_iter()
        .map(|u| cdf.iter().position(|&c| u < c).unwrap_or(11) as u8 + 1)
        .collect();
    let class_cdf: Vec<f64> = cfg
        .class_probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let class: Vec<usize> = uniforms(seed, RDD_CLASS, n)
        .into_iter()
        .map(|u| class_cdf.iter().position(|&c| u < c).unwrap_or(cfg.class_levels.len() - 1))
        .collect();
    let female = bernoullis(seed, "female", n, 0.5);
    let birth_year: Vec<f64> = bernoullis(seed, "birth_year", n, 0.5)
        .iter()
        .map(|&b| if b { 1992.0 } else { 1991.0 })
        .collect();
    let age = ages(cfg);
    let noise = normals(seed, "noise:outcome", n);
    let placebo: Vec<f64> = normals(seed, RDD_PLACEBO, n).iter().map(|z| 3.4 + 0.5 * z).collect();

    let mut mob = Vec::with_capacity(n);
    let mut treat = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let m = f64::from(normalize_running(months[i])?);
        let t = if m >= 0.0 { 1.0 } else { 0.0 };
        let tau = cfg.class_tau.as_ref().map_or(cfg.tau, |v| v[class[i]]);
        mob.push(m);
        treat.push(t);
        y.push(
            tau * t
                + cfg.mob_slope * m
                + cfg.mob_slope_treated * t * m
                + 0.1 * f64::from(u8::from(female[i]))
                + cfg.outcome_sd * noise[i],
        );
    }
    let mut cols = vec![
        Column::from_f64("birth_month", &months.iter().map(|&m| f64::from(m)).collect::<Vec<_>>()),
        Column::categorical(RDD_CLASS, class.iter().map(|&c| Some(cfg.class_levels[c].clone())).collect()),
        Column::binary("female", female.iter().map(|&b| Some(b)).collect()),
        Column::from_f64("age_years", &age),
        Column::categorical("birth_year", birth_year.iter().map(|b| Some(format!("{b}"))).collect()),
        Column::from_f64(RDD_PLACEBO, &placebo),
    ];
    if cfg.rdd_clocks {
        let ea: Vec<f64> = (0..n).map(|i| age[i] + y[i]).collect();
        cols.extend(clock_columns(cfg, &ea));
        cols.push(Column::from_f64("ea_star", &ea).into_hidden());
    } else {
        cols.push(Column::from_f64(RDD_OUTCOME, &y));
    }
    cols.push(Column::from_f64("true_mob", &mob).into_hidden());
    cols.push(Column::from_f64("true_treat", &treat).into_hidden());
    CohortTable::new(ids(n), cols)
}

/// Hidden truth columns with subject ids, as CSV.
pub fn truth_sidecar(table: &CohortTable) -> Result<Vec<u8>> {
    let hidden: Vec<Column> = table.columns().iter().filter(|c| c.is_hidden()).cloned().collect();
    let visible: Vec<Column> = hidden
        .into_iter()
        .map(|c| {
            let name = c.name().to_string();
            Column::continuous(name, c.values().to_vec())
        })
        .collect();
    CohortTable::new(table.ids().to_vec(), visible)?.to_csv(false)
}

/// Expected mean and SD of a generated column.
#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub moment: Moment,
    pub sample_mean: f64,
    pub sample_sd: f64,
    pub passed: bool,
}

/// Population moments of the clock-panel columns implied by `cfg`.
pub fn clock_panel_moments(cfg: &SimConfig) -> Vec<Moment> {
    let var_ea = cfg.var_ea();
    let mut out = vec![Moment {
        column: "age_years".into(),
        mean: cfg.age_mean,
        sd: cfg.age_sd,
    }];
    for j in 0..cfg.gamma.len() {
        out.push(Moment {
            column: format!("x{}", j + 1),
            mean: 0.0,
            sd: 1.0,
        });
    }
    for k in 0..cfg.k() {
        out.push(Moment {
            column: cfg.clock_names[k].clone(),
            mean: cfg.intercepts[k] + cfg.loadings[k] * cfg.age_mean,
            sd: (cfg.loadings[k].powi(2) * var_ea + cfg.error_sds[k].powi(2)).sqrt(),
        });
    }
    out
}

/// Means within `4 sd / sqrt(N)` and SDs within `4 sd / sqrt(2N)` of target.
pub fn check_moments(table: &CohortTable, moments: &[Moment]) -> Result<Vec<MomentCheck>> {
    moments
        .iter()
        .map(|m| {
            let v = DVector::from_vec(table.numeric(&m.column)?);
            let n = v.len() as f64;
            let mean = v.mean();
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let passed = (mean - m.mean).abs() <= 4.0 * m.sd / n.sqrt() + 1e-12
                && (sd - m.sd).abs() <= 4.0 * m.sd / (2.0 * n).sqrt() + 1e-12;
            Ok(MomentCheck {
                moment: m.clone(),
                sample_mean: mean,
                sample_sd: sd,
                passed,
            })
        })
        .collect()
}
