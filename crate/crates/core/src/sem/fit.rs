//! Gaussian maximum likelihood for the MIMIC model, conditional on the
//! exogenous columns, with intercepts profiled out through centered moments.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{Matrices, SemModel, Slot};
use super::optim::{fd_hessian, minimize, OptimOptions};
use crate::aggregation::{efa_correlation, correlation_from_covariance, EfaOptions};
use crate::cohort::{CohortTable, ColumnKind};
use crate::error::{MegaError, Result};
use crate::linalg::{self, PivotedQr};
use crate::report::csv_bytes;

/// Centered sample moments (denominator N).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub v_mean: DVector<f64>,
    pub z_mean: DVector<f64>,
    pub svv: DMatrix<f64>,
    pub svz: DMatrix<f64>,
    pub szz: DMatrix<f64>,
    /// Centered observations, kept for per-observation scores.
    pub v: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl Moments {
    pub fn from_data(model: &SemModel, data: &CohortTable) -> Result<Self> {
        let (complete, report) = data.select_complete(&model.columns())?;
        if report.retained < report.before {
            log::info!("SEM listwise deletion kept {} of {} rows", report.retained, report.before);
        }
        for name in model.columns() {
            if complete.column(name)?.kind() == ColumnKind::Categorical {
                return Err(MegaError::InvalidArgument(format!(
                    "categorical column `{name}` in a SEM; expand it to dummies first"
                )));
            }
        }
        let obs: Vec<&str> = model.observed.iter().map(String::as_str).collect();
        let exo: Vec<&str> = model.exogenous.iter().map(String::as_str).collect();
        let v = complete.design(&obs)?;
        let z = complete.design(&exo)?;
        Self::from_matrices(v.matrix, z.matrix, &model.exogenous)
    }

    pub fn from_matrices(v: DMatrix<f64>, z: DMatrix<f64>, exo_names: &[String]) -> Result<Self> {
        let n = v.nrows();
        if z.nrows() != n {
            return Err(MegaError::DimensionMismatch("indicator and covariate rows differ".into()));
        }
        if n < 3 {
            return Err(MegaError::InsufficientData(format!("{n} complete rows")));
        }
        let center = |m: &DMatrix<f64>| -> (DVector<f64>, DMatrix<f64>) {
            let mean = DVector::from_fn(m.ncols(), |j, _| m.column(j).mean());
            let c = DMatrix::from_fn(m.nrows(), m.ncols(), |r, j| m[(r, j)] - mean[j]);
            (mean, c)
        };
        let (v_mean, vc) = center(&v);
        let (z_mean, zc) = center(&z);
        if zc.ncols() > 0 {
            let qr = PivotedQr::new(&zc, 1e-10);
            if let Some(j) = qr.first_deficient_column() {
                return Err(MegaError::RankDeficient(exo_names[j].clone()));
            }
        }
        let nf = n as f64;
        let mut svv = vc.transpose() * &vc / nf;
        linalg::symmetrize(&mut svv);
        let svz = vc.transpose() * &zc / nf;
        let mut szz = zc.transpose() * &zc / nf;
        linalg::symmetrize(&mut szz);
        Ok(Moments {
            n,
            v_mean,
            z_mean,
            svv,
            svz,
            szz,
            v: vc,
            z: zc,
        })
    }

    /// OLS reduced form `Svz Szz^{-1}`.
    pub fn ols_pi(&self) -> Result<DMatrix<f64>> {
        if self.szz.ncols() == 0 {
            return Ok(DMatrix::zeros(self.svv.nrows(), 0));
        }
        let inv = linalg::spd_inverse(&self.szz)?;
        Ok(&self.svz * inv)
    }

    /// Residual covariance after partialling out the exogenous columns.
    pub fn residual_cov(&self) -> Result<DMatrix<f64>> {
        let pi = self.ols_pi()?;
        let mut s = &self.svv - &pi * self.svz.transpose();
        linalg::symmetrize(&mut s);
        Ok(s)
    }
}

/// Gradient of the mean log-likelihood in matrix form.
#[derive(Debug, Clone)]
pub struct MatrixGradient {
    pub lambda: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub direct: DMatrix<f64>,
    /// `P = Lambda' G Lambda / 2`; the derivative w.r.t. `Psi` as a symmetric matrix.
    pub p: DMatrix<f64>,
    pub theta: DVector<f64>,
}

impl MatrixGradient {
    /// Gradient for free parameters in natural units.
    pub fn natural(&self, slots: &[Slot]) -> DVector<f64> {
        DVector::from_iterator(
            slots.len(),
            slots.iter().map(|&s| match s {
                Slot::Lambda(j, a) => self.lambda[(j, a)],
                Slot::Gamma(a, q) => self.gamma[(a, q)],
                Slot::Direct(j, q) => self.direct[(j, q)],
                Slot::Psi(a, b) if a == b => self.p[(a, a)],
                Slot::Psi(a, b) => 2.0 * self.p[(a, b)],
                Slot::Theta(j) => self.theta[j],
            }),
        )
    }
}

fn gradient_parts(m: &Matrices, sigma_inv: &DMatrix<f64>, s: &DMatrix<f64>, h: DMatrix<f64>) -> MatrixGradient {
    let g = sigma_inv * s * sigma_inv - sigma_inv;
    let lambda = &g * &m.lambda * &m.psi + &h * m.gamma.transpose();
    let gamma = m.lambda.transpose() * &h;
    let p = m.lambda.transpose() * &g * &m.lambda * 0.5;
    let theta = DVector::from_fn(g.nrows(), |j, _| 0.5 * g[(j, j)]);
    MatrixGradient {
        lambda,
        gamma,
        direct: h,
        p,
        theta,
    }
}

/// Mean log-likelihood per observation and its gradient; `None` when the
/// implied covariance is not positive definite.
pub fn evaluate(m: &Matrices, mom: &Moments) -> Option<(f64, MatrixGradient)> {
    let sigma = m.sigma();
    let (logdet, sigma_inv) = linalg::logdet_inverse(&sigma)?;
    let pi = m.pi();
    let svz_pi = &mom.svz * pi.transpose();
    let mut s = &mom.svv - &svz_pi - svz_pi.transpose() + &pi * &mom.szz * pi.transpose();
    linalg::symmetrize(&mut s);
    let j = sigma.nrows() as f64;
    let f = -0.5 * (j * (2.0 * PI).ln() + logdet + (&sigma_inv * &s).trace());
    let h = &sigma_inv * (&mom.svz - &pi * &mom.szz);
    Some((f, gradient_parts(m, &sigma_inv, &s, h)))
}

/// Maps natural parameters to the unconstrained optimizer scale:
/// `theta = exp(phi)` and `Psi = L L'` with `diag(L) = exp(.)`.
struct Reparam<'a> {
    base: &'a Matrices,
    slots: &'a [Slot],
    n_latent: usize,
}

impl Reparam<'_> {
    fn to_opt(&self, m: &Matrices) -> Option<DVector<f64>> {
        let l = m.psi.clone().cholesky()?.l();
        Some(DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|&s| match s {
                Slot::Psi(a, b) if a == b => l[(a, a)].ln(),
                Slot::Psi(a, b) => l[(a, b)],
                Slot::Theta(j) => m.theta[j].ln(),
                other => m.get(other),
            }),
        ))
    }

    fn chol(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n_latent, self.n_latent);
        for (&s, &v) in self.slots.iter().zip(x.iter()) {
            if let Slot::Psi(a, b) = s {
                l[(a, b)] = if a == b { v.exp() } else { v };
            }
        }
        l
    }

    fn matrices_at(&self, x: &DVector<f64>) -> Matrices {
        let mut m = self.base.clone();
        for (&s, &v) in self.slots.iter().zip(x.iter()) {
            match s {
                Slot::Psi(..) => {}
                Slot::Theta(j) => m.theta[j] = v.exp(),
                other => m.set(other, v),
            }
        }
        let l = self.chol(x);
        m.psi = &l * l.transpose();
        m
    }

    /// Negative mean log-likelihood and its gradient on the optimizer scale.
    fn objective(&self, mom: &Moments, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let m = self.matrices_at(x);
        let (f, g) = evaluate(&m, mom)?;
        let l = self.chol(x);
        let dl = &g.p * &l * 2.0;
        let grad = DVector::from_iterator(
            self.slots.len(),
            self.slots.iter().map(|&s| match s {
                Slot::Psi(a, b) if a == b => dl[(a, a)] * l[(a, a)],
                Slot::Psi(a, b) => dl[(a, b)],
                Slot::Theta(j) => g.theta[j] * m.theta[j],
                Slot::Lambda(j, a) => g.lambda[(j, a)],
                Slot::Gamma(a, q) => g.gamma[(a, q)],
                Slot::Direct(j, q) => g.direct[(j, q)],
            }),
        );
        Some((-f, -grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SemSe {
    /// Inverse observed information.
    #[default]
    Observed,
    /// Sandwich from per-observation scores.
    Robust,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemOptions {
    pub seed: u64,
    pub random_starts: usize,
    pub se: SemSe,
    pub optim: OptimOptions,
    /// Residual variances below this share of the indicator variance are pinned at 0.
    pub heywood_tol: f64,
}

impl SemOptions {
    pub fn new(seed: u64) -> Self {
        SemOptions {
            seed,
            random_starts: 3,
            se: SemSe::Observed,
            optim: OptimOptions::default(),
            heywood_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemParam {
    pub name: String,
    pub slot: Slot,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    /// Infinity norm of the natural-scale gradient of the mean log-likelihood.
    pub gradient_norm: f64,
    pub last_step: f64,
    pub starts_tried: usize,
    pub starts_converged: usize,
    /// Total log-likelihood reached from each start (`NaN` when it failed).
    pub start_logliks: Vec<f64>,
    /// Total log-likelihood after every accepted step of the winning start.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemFit {
    pub model: SemModel,
    pub matrices: Matrices,
    /// Indicator intercepts `nu = mean(v) - Pi mean(z)`.
    pub intercepts: DVector<f64>,
    pub params: Vec<SemParam>,
    /// Covariance of the free parameters, in `params` order.
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub n: usize,
    pub df: i64,
    pub convergence: Convergence,
    /// Indicators whose residual variance was pinned at 0.
    pub heywood: Vec<String>,
    /// Zero-noise data reproduced exactly; likelihood unbounded.
    pub exact_fit: bool,
    pub se_type: SemSe,
    pub(crate) moments: Moments,
}

impl SemFit {
    pub fn param(&self, name: &str) -> Result<&SemParam> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| MegaError::UnknownColumn(name.to_string()))
    }

    fn latent_of(&self, indicator: &str) -> Result<usize> {
        let row = self.model.row_of(indicator)?;
        self.model.row_latent[row].ok_or_else(|| MegaError::InvalidArgument(format!("`{indicator}` is an outcome")))
    }

    /// Loading of an indicator on its latent.
    pub fn loading(&self, indicator: &str) -> Result<f64> {
        let row = self.model.row_of(indicator)?;
        Ok(self.matrices.lambda[(row, self.latent_of(indicator)?)])
    }

    pub fn loadings(&self, latent: &str) -> Result<Vec<f64>> {
        let a = self.model.latent_index(latent)?;
        self.model.blocks[a].indicators.iter().map(|i| self.loading(i)).collect()
    }

    pub fn gamma(&self, latent: &str, covariate: &str) -> Result<f64> {
        let a = self.model.latent_index(latent)?;
        let q = self
            .model
            .exogenous
            .iter()
            .position(|x| x == covariate)
            .ok_or_else(|| MegaError::UnknownColumn(covariate.to_string()))?;
        Ok(self.matrices.gamma[(a, q)])
    }

    pub fn psi(&self, latent: &str) -> Result<f64> {
        let a = self.model.latent_index(latent)?;
        Ok(self.matrices.psi[(a, a)])
    }

    pub fn theta(&self, observed: &str) -> Result<f64> {
        Ok(self.matrices.theta[self.model.row_of(observed)?])
    }

    /// Effect of a latent on an outcome.
    pub fn delta(&self, outcome: &str, latent: &str) -> Result<f64> {
        let row = self.model.row_of(outcome)?;
        if self.model.row_latent[row].is_some() {
            return Err(MegaError::InvalidArgument(format!("`{outcome}` is not an outcome")));
        }
        Ok(self.matrices.lambda[(row, self.model.latent_index(latent)?)])
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.params.iter().map(|p| p.slot).collect()
    }

    /// Largest discrepancy between the analytic gradient and central finite
    /// differences of the log-likelihood, relative to `max(1, |fd|)`.
    pub fn gradient_check(&self) -> f64 {
        if self.exact_fit {
            return 0.0;
        }
        let slots = self.slots();
        let p0 = self.matrices.pack(&slots);
        let f_at = |p: &DVector<f64>| evaluate(&self.matrices.unpack(&slots, p), &self.moments).map(|(f, _)| f);
        let Some((_, g)) = evaluate(&self.matrices, &self.moments) else {
            return f64::INFINITY;
        };
        let analytic = g.natural(&slots);
        let mut worst: f64 = 0.0;
        for i in 0..slots.len() {
            let h = 1e-6 * p0[i].abs().max(1.0);
            let mut pp = p0.clone();
            pp[i] += h;
            let mut pm = p0.clone();
            pm[i] -= h;
            let (Some(fp), Some(fm)) = (f_at(&pp), f_at(&pm)) else {
                return f64::INFINITY;
            };
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
        }
        worst
    }

    /// Implied regression coefficients of the observed columns on the exogenous ones.
    pub fn reduced_form(&self) -> DMatrix<f64> {
        self.matrices.pi()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .params
            .iter()
            .map(|p| vec![p.name.clone(), p.value.to_string(), p.se.to_string()])
            .collect();
        csv_bytes(&["parameter", "estimate", "se"], &rows)
    }

    /// Plain-text convergence log.
    pub fn convergence_log(&self) -> String {
        let c = &self.convergence;
        let mut out = format!(
            "converged={}\niterations={}\ngradient_norm={:e}\nlast_step={:e}\nstarts_tried={}\nstarts_converged={}\nloglik={}\nn={}\ndf={}\nexact_fit={}\n",
            c.converged, c.iterations, c.gradient_norm, c.last_step, c.starts_tried, c.starts_converged,
            self.loglik, self.n, self.df, self.exact_fit
        );
        out.push_str(&format!(
            "start_logliks={}\n",
            c.start_logliks.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        ));
        if !self.heywood.is_empty() {
            out.push_str(&format!("heywood={}\n", self.heywood.join(",")));
        }
        for (i, l) in c.trace.iter().enumerate() {
            out.push_str(&format!("trace[{i}]={l}\n"));
        }
        out
    }
}

impl fmt::Display for SemFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(f, "{:<40}{:>12.4} ({:.4})", p.name, p.value, p.se)?;
        }
        writeln!(f, "Log likelihood {:.4}   N {}   df {}", self.loglik, self.n, self.df)
    }
}

/// Starting values: one-factor principal factors on each block's residual
/// covariance, latent paths from the reduced form.
fn efa_start(model: &SemModel, mom: &Moments, s_res: &DMatrix<f64>, pi_ols: &DMatrix<f64>) -> Matrices {
    let mut m = Matrices::zeros(model);
    for (a, block) in model.blocks.iter().enumerate() {
        let rows: Vec<usize> = block.indicators.iter().map(|i| model.row_of(i).unwrap()).collect();
        let sub = DMatrix::from_fn(rows.len(), rows.len(), |i, j| s_res[(rows[i], rows[j])]);
        let sd: Vec<f64> = (0..rows.len()).map(|i| sub[(i, i)].max(1e-300).sqrt()).collect();
        let raw_loadings: Vec<f64> =
            match efa_correlation(&correlation_from_covariance(&sub), block.indicators.clone(), &EfaOptions::default()) {
                Ok(sol) => (0..rows.len()).map(|i| sol.loadings[i].max(0.1) * sd[i]).collect(),
                Err(_) => sd.iter().map(|s| 0.5 * s).collect(),
            };
        let ref_pos = rows.iter().position(|&r| r == model.reference_rows[a]).unwrap();
        let scale = raw_loadings[ref_pos];
        for (i, &row) in rows.iter().enumerate() {
            m.lambda[(row, a)] = raw_loadings[i] / scale;
        }
        m.psi[(a, a)] = (scale * scale).max(1e-8 * sub[(ref_pos, ref_pos)].max(1e-300));
        let lam: Vec<f64> = rows.iter().map(|&r| m.lambda[(r, a)]).collect();
        let ll: f64 = lam.iter().map(|l| l * l).sum();
        for q in 0..model.n_exogenous() {
            m.gamma[(a, q)] = rows.iter().zip(&lam).map(|(&r, l)| l * pi_ols[(r, q)]).sum::<f64>() / ll;
        }
        for (i, &row) in rows.iter().enumerate() {
            let resid = sub[(i, i)] - lam[i] * lam[i] * m.psi[(a, a)];
            m.theta[row] = resid.max(0.1 * sub[(i, i)]).max(1e-8);
        }
    }
    for a in 0..model.n_latent() {
        for b in 0..a {
            let r = s_res[(model.reference_rows[a], model.reference_rows[b])];
            m.psi[(a, b)] = r;
            m.psi[(b, a)] = r;
        }
    }
    if m.psi.clone().cholesky().is_none() {
        m.psi = DMatrix::from_diagonal(&m.psi.diagonal());
    }
    for (j, lat) in model.row_latent.iter().enumerate() {
        if lat.is_none() {
            for q in 0..model.n_exogenous() {
                m.direct[(j, q)] = pi_ols[(j, q)];
            }
            m.theta[j] = s_res[(j, j)].max(1e-8);
        }
    }
    let _ = mom;
    m
}

fn perturbed(start: &Matrices, model: &SemModel, rng: &mut ChaCha8Rng) -> Matrices {
    let mut m = start.clone();
    for slot in model.slots(&[]) {
        let z: f64 = rng.sample(StandardNormal);
        let v = start.get(slot);
        match slot {
            Slot::Lambda(..) | Slot::Gamma(..) | Slot::Direct(..) => m.set(slot, v + 0.25 * z * (v.abs() + 0.1)),
            Slot::Psi(a, b) if a == b => m.set(slot, v * (0.3 * z).exp()),
            Slot::Psi(..) => m.set(slot, 0.5 * v),
            Slot::Theta(_) => m.set(slot, v * (0.3 * z).exp()),
        }
    }
    if m.psi.clone().cholesky().is_none() {
        m.psi = DMatrix::from_diagonal(&m.psi.diagonal());
    }
    m
}

struct Run {
    matrices: Matrices,
    f: f64,
    iterations: usize,
    trace: Vec<f64>,
    last_step: f64,
    grad_norm: f64,
    converged: bool,
}

fn run_start(model: &SemModel, mom: &Moments, start: &Matrices, pinned: &[usize], opts: &OptimOptions) -> Option<Run> {
    let slots = model.slots(pinned);
    let mut base = start.clone();
    for &j in pinned {
        base.theta[j] = 0.0;
    }
    let rp = Reparam {
        base: &base,
        slots: &slots,
        n_latent: model.n_latent(),
    };
    let x0 = rp.to_opt(&base)?;
    let obj = |x: &DVector<f64>| rp.objective(mom, x);
    let res = minimize(&obj, x0, opts)?;
    let matrices = rp.matrices_at(&res.x);
    let (f, g) = evaluate(&matrices, mom)?;
    let grad_norm = g.natural(&slots).amax();
    let converged = res.last_step < opts.step_tol && grad_norm < opts.grad_tol;
    let nf = mom.n as f64;
    Some(Run {
        matrices,
        f,
        iterations: res.iterations,
        trace: res.trace.iter().map(|v| -v * nf).collect(),
        last_step: res.last_step,
        grad_norm,
        converged,
    })
}

/// Covariance of natural parameters: inverse observed information, or the
/// sandwich built from per-observation scores.
fn parameter_vcov(m: &Matrices, mom: &Moments, slots: &[Slot], se: SemSe) -> DMatrix<f64> {
    let k = slots.len();
    let nan = DMatrix::from_element(k, k, f64::NAN);
    let p0 = m.pack(slots);
    let obj = |p: &DVector<f64>| {
        let mm = m.unpack(slots, p);
        evaluate(&mm, mom).map(|(f, g)| (-f, -g.natural(slots)))
    };
    let Some(h) = fd_hessian(&obj, &p0) else {
        return nan;
    };
    let info = h * mom.n as f64;
    let Ok(bread) = linalg::spd_inverse(&info) else {
        log::warn!("observed information is singular; standard errors unavailable");
        return nan;
    };
    match se {
        SemSe::Observed => bread,
        SemSe::Robust => {
            let sigma = m.sigma();
            let Some((_, sigma_inv)) = linalg::logdet_inverse(&sigma) else {
                return nan;
            };
            let pi = m.pi();
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..mom.n {
                let v = mom.v.row(i).transpose();
                let z = mom.z.row(i).transpose();
                let r = &v - &pi * &z;
                let s_i = &r * r.transpose();
                let h_i = &sigma_inv * &r * z.transpose();
                let g = gradient_parts(m, &sigma_inv, &s_i, h_i).natural(slots);
                meat += &g * g.transpose();
            }
            &bread * meat * &bread
        }
    }
}

fn exact_fit(model: &SemModel, mom: &Moments, s_res: &DMatrix<f64>, pi_ols: &DMatrix<f64>) -> Result<Matrices> {
    let a_ref = model.reference_rows[0];
    let q = model.n_exogenous();
    let v = |k: usize| -> DVector<f64> {
        DVector::from_iterator(q + 1, pi_ols.row(k).iter().copied().chain(std::iter::once(s_res[(k, a_ref)])))
    };
    let vr = v(a_ref);
    let denom = vr.norm_squared();
    if denom <= 0.0 {
        return Err(MegaError::RankDeficientCovariance("reference indicator is constant".into()));
    }
    let mut m = Matrices::zeros(model);
    for j in 0..model.n_observed() {
        m.lambda[(j, 0)] = v(j).dot(&vr) / denom;
    }
    for c in 0..q {
        m.gamma[(0, c)] = pi_ols[(a_ref, c)];
    }
    m.psi[(0, 0)] = s_res[(a_ref, a_ref)];
    let _ = mom;
    Ok(m)
}

/// Fits `model` to `data` by maximum likelihood.
pub fn fit_sem(model: &SemModel, data: &CohortTable, opts: &SemOptions) -> Result<SemFit> {
    let mom = Moments::from_data(model, data)?;
    fit_moments(model, mom, opts)
}

pub fn fit_moments(model: &SemModel, mom: Moments, opts: &SemOptions) -> Result<SemFit> {
    let free = model.slots(&[]).len();
    if mom.n <= free {
        return Err(MegaError::InsufficientData(format!("N={} with {free} free parameters", mom.n)));
    }
    let pi_ols = mom.ols_pi()?;
    let s_res = mom.residual_cov()?;
    let (eig, _) = linalg::eigen_desc(&s_res);
    let scale = s_res.trace() / s_res.nrows() as f64;
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let rank = eig.iter().filter(|&&e| e > tol).count();
    if rank < s_res.nrows() {
        if rank <= 1 && model.n_latent() == 1 && model.is_latent_on_covariates() {
            log::warn!("residual covariance has rank {rank}: zero-noise data, returning the exact fit");
            let matrices = exact_fit(model, &mom, &s_res, &pi_ols)?;
            return Ok(assemble(model, matrices, mom, f64::INFINITY, exact_convergence(), Vec::new(), true, opts.se));
        }
        return Err(MegaError::RankDeficientCovariance(format!(
            "residual covariance has rank {rank} of {}",
            s_res.nrows()
        )));
    }

    let start = efa_start(model, &mom, &s_res, &pi_ols);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![start.clone()];
    for _ in 0..opts.random_starts {
        starts.push(perturbed(&start, model, &mut rng));
    }
    let nf = mom.n as f64;
    let mut best: Option<Run> = None;
    let mut best_any: Option<Run> = None;
    let mut start_logliks = Vec::new();
    let mut n_conv = 0;
    let mut traces = Vec::new();
    for s in &starts {
        match run_start(model, &mom, s, &[], &opts.optim) {
            Some(run) => {
                start_logliks.push(run.f * nf);
                traces.push(format!(
                    "loglik {:.6} grad {:.2e} step {:.2e}",
                    run.f * nf,
                    run.grad_norm,
                    run.last_step
                ));
                if run.converged {
                    n_conv += 1;
                    if best.as_ref().is_none_or(|b| run.f > b.f) {
                        best = Some(run);
                    }
                } else if best_any.as_ref().is_none_or(|b| run.f > b.f) {
                    best_any = Some(run);
                }
            }
            None => {
                start_logliks.push(f64::NAN);
                traces.push("start outside the parameter space".into());
            }
        }
    }
    let heywood_rows = |m: &Matrices| -> Vec<usize> {
        (0..model.n_observed())
            .filter(|&j| m.theta[j] < opts.heywood_tol * mom.svv[(j, j)])
            .collect()
    };
    // A residual variance heading to the boundary never satisfies the step
    // criterion on the log scale, so such runs are accepted for pinning.
    let mut best = match best {
        Some(b) => b,
        None => match best_any {
            Some(b) if !heywood_rows(&b.matrices).is_empty() => b,
            _ => {
                return Err(MegaError::NonConvergence(format!(
                    "no start converged: [{}]",
                    traces.join("; ")
                )))
            }
        },
    };

    // Boundary solutions: pin vanishing residual variances and refit.
    let pinned = heywood_rows(&best.matrices);
    if !pinned.is_empty() {
        let names: Vec<String> = pinned.iter().map(|&j| model.observed[j].clone()).collect();
        log::warn!(
            "HEYWOOD CASE: residual variance of {} pinned at 0",
            names.join(", ")
        );
        let mut start = best.matrices.clone();
        for &j in &pinned {
            start.theta[j] = 0.0;
        }
        best = run_start(model, &mom, &start, &pinned, &opts.optim)
            .filter(|r| r.converged)
            .ok_or_else(|| MegaError::NonConvergence("refit with pinned residual variances failed".into()))?;
        let slots = model.slots(&pinned);
        let convergence = Convergence {
            converged: true,
            iterations: best.iterations,
            gradient_norm: best.grad_norm,
            last_step: best.last_step,
            starts_tried: starts.len(),
            starts_converged: n_conv,
            start_logliks,
            trace: best.trace,
        };
        let vcov = parameter_vcov(&best.matrices, &mom, &slots, opts.se);
        return Ok(finish(model, best.matrices, mom, best.f * nf, convergence, names, false, opts.se, &slots, vcov));
    }

    let convergence = Convergence {
        converged: true,
        iterations: best.iterations,
        gradient_norm: best.grad_norm,
        last_step: best.last_step,
        starts_tried: starts.len(),
        starts_converged: n_conv,
        start_logliks,
        trace: best.trace,
    };
    Ok(assemble(model, best.matrices, mom, best.f * nf, convergence, Vec::new(), false, opts.se))
}

fn exact_convergence() -> Convergence {
    Convergence {
        converged: true,
        iterations: 0,
        gradient_norm: 0.0,
        last_step: 0.0,
        starts_tried: 0,
        starts_converged: 0,
        start_logliks: Vec::new(),
        trace: Vec::new(),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    model: &SemModel,
    matrices: Matrices,
    mom: Moments,
    loglik: f64,
    convergence: Convergence,
    heywood: Vec<String>,
    exact: bool,
    se: SemSe,
) -> SemFit {
    let slots = model.slots(&[]);
    let vcov = if exact {
        DMatrix::from_element(slots.len(), slots.len(), f64::NAN)
    } else {
        parameter_vcov(&matrices, &mom, &slots, se)
    };
    finish(model, matrices, mom, loglik, convergence, heywood, exact, se, &slots, vcov)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &SemModel,
    matrices: Matrices,
    mom: Moments,
    loglik: f64,
    convergence: Convergence,
    heywood: Vec<String>,
    exact: bool,
    se: SemSe,
    slots: &[Slot],
    vcov: DMatrix<f64>,
) -> SemFit {
    let params = slots
        .iter()
        .enumerate()
        .map(|(i, &slot)| SemParam {
            name: model.slot_name(slot),
            slot,
            value: matrices.get(slot),
            se: vcov[(i, i)].max(0.0).sqrt(),
        })
        .map(|mut p| {
            if vcov[(0, 0)].is_nan() {
                p.se = f64::NAN;
            }
            p
        })
        .collect();
    let intercepts = &mom.v_mean - matrices.pi() * &mom.z_mean;
    SemFit {
        model: model.clone(),
        matrices,
        intercepts,
        params,
        vcov,
        loglik,
        n: mom.n,
        df: model.df,
        convergence,
        heywood,
        exact_fit: exact,
        se_type: se,
        moments: mom,
    }
}

/// Reparameterizes so `new_reference` has loading 1 on its latent. The
/// likelihood is unchanged; standard errors follow by the delta method.
pub fn rescale_reference(fit: &SemFit, new_reference: &str) -> Result<SemFit> {
    let row = fit.model.row_of(new_reference)?;
    let a = fit.model.row_latent[row]
        .ok_or_else(|| MegaError::InvalidArgument(format!("`{new_reference}` is an outcome, not an indicator")))?;
    let c = fit.matrices.lambda[(row, a)];
    if c.abs() < 1e-12 {
        return Err(MegaError::InvalidArgument(format!("loading of `{new_reference}` is zero")));
    }
    let mut blocks = fit.model.blocks.clone();
    blocks[a].reference = new_reference.to_string();
    let new_model = super::model::build_mimic(blocks, fit.model.structural.clone())?;

    let pinned: Vec<usize> = fit.heywood.iter().map(|h| fit.model.row_of(h).unwrap()).collect();
    let old_slots = fit.slots();
    let new_slots = new_model.slots(&pinned);
    let rescale = |m: &Matrices| -> Matrices {
        let c = m.lambda[(row, a)];
        let mut out = m.clone();
        for j in 0..out.lambda.nrows() {
            out.lambda[(j, a)] /= c;
        }
        for q in 0..out.gamma.ncols() {
            out.gamma[(a, q)] *= c;
        }
        for b in 0..out.psi.nrows() {
            let f = if b == a { c * c } else { c };
            out.psi[(a, b)] = m.psi[(a, b)] * f;
            out.psi[(b, a)] = out.psi[(a, b)];
        }
        out
    };
    let matrices = rescale(&fit.matrices);

    let p0 = fit.matrices.pack(&old_slots);
    let map = |p: &DVector<f64>| rescale(&fit.matrices.unpack(&old_slots, p)).pack(&new_slots);
    let mut jac = DMatrix::zeros(new_slots.len(), old_slots.len());
    for i in 0..old_slots.len() {
        let h = 1e-6 * p0[i].abs().max(1.0);
        let mut pp = p0.clone();
        pp[i] += h;
        let mut pm = p0.clone();
        pm[i] -= h;
        jac.set_column(i, &((map(&pp) - map(&pm)) / (2.0 * h)));
    }
    let vcov = &jac * &fit.vcov * jac.transpose();
    let mut out = finish(
        &new_model,
        matrices,
        fit.moments.clone(),
        fit.loglik,
        fit.convergence.clone(),
        fit.heywood.clone(),
        fit.exact_fit,
        fit.se_type,
        &new_slots,
        vcov,
    );
    if !fit.exact_fit {
        if let Some((f, _)) = evaluate(&out.matrices, &out.moments) {
            out.loglik = f * out.n as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::model::{build_mimic, LatentBlock, Structural};

    fn toy_moments(seed: u64, n: usize) -> (SemModel, Moments) {
        let model = build_mimic(
            vec![LatentBlock::new("EA", &["c1", "c2", "c3"], "c1")],
            Structural::LatentOnCovariates {
                covariates: vec!["x1".into()],
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = [1.0, 0.8, 1.3];
        let mut v = DMatrix::zeros(n, 3);
        let mut z = DMatrix::zeros(n, 1);
        for i in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let w: f64 = rng.sample(StandardNormal);
            let ea = 0.6 * x + w;
            z[(i, 0)] = x;
            for k in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                v[(i, k)] = 2.0 + lam[k] * ea + 0.7 * e;
            }
        }
        let mom = Moments::from_matrices(v, z, &model.exogenous).unwrap();
        (model, mom)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_off_optimum() {
        let (model, mom) = toy_moments(1, 500);
        let slots = model.slots(&[]);
        let mut m = Matrices::zeros(&model);
        m.lambda[(1, 0)] = 0.7;
        m.lambda[(2, 0)] = 1.1;
        m.gamma[(0, 0)] = 0.3;
        m.psi[(0, 0)] = 1.4;
        m.theta = DVector::from_vec(vec![0.6, 0.5, 0.9]);
        let (_, g) = evaluate(&m, &mom).unwrap();
        let analytic = g.natural(&slots);
        let p0 = m.pack(&slots);
        for i in 0..slots.len() {
            let h = 1e-6;
            let mut pp = p0.clone();
            pp[i] += h;
            let mut pm = p0.clone();
            pm[i] -= h;
            let fp = evaluate(&m.unpack(&slots, &pp), &mom).unwrap().0;
            let fm = evaluate(&m.unpack(&slots, &pm), &mom).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{:?}: {fd} vs {}", slots[i], analytic[i]);
        }
    }

    #[test]
    fn fit_converges_and_rescales() {
        let (model, mom) = toy_moments(2, 2000);
        let fit = fit_moments(&model, mom, &SemOptions::new(9)).unwrap();
        assert!(fit.convergence.converged);
        assert!(fit.gradient_check() < 1e-5);
        assert!(fit.convergence.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let r = rescale_reference(&fit, "c3").unwrap();
        assert!((r.loglik - fit.loglik).abs() < 1e-8 * fit.loglik.abs());
        assert!((r.loading("c3").unwrap() - 1.0).abs() < 1e-15);
        let c = fit.loading("c3").unwrap();
        assert!((r.gamma("EA", "x1").unwrap() - fit.gamma("EA", "x1").unwrap() * c).abs() < 1e-12);
        assert!((r.psi("EA").unwrap() - fit.psi("EA").unwrap() * c * c).abs() < 1e-12);
        let same = rescale_reference(&fit, "c1").unwrap();
        assert_eq!(same.matrices, fit.matrices);
        assert!((same.param("gamma:EA:x1").unwrap().se - fit.param("gamma:EA:x1").unwrap().se).abs() < 1e-9);
    }
}
