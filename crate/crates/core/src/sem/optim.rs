//! Minimizer used by the SEM fit: BFGS with Armijo backtracking, then
//! Newton steps on a finite-difference Hessian of the analytic gradient.

use nalgebra::{DMatrix, DVector};

/// Objective to minimize: value and gradient, or `None` outside the domain.
pub trait Objective {
    fn eval(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    fn eval(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_bfgs_iter: usize,
    pub max_newton_iter: usize,
    /// Infinity norm of the gradient.
    pub grad_tol: f64,
    /// Largest absolute parameter change of the final step.
    pub step_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_bfgs_iter: 1000,
            max_newton_iter: 50,
            grad_tol: 1e-6,
            step_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    /// Objective after every accepted step, starting point first.
    pub trace: Vec<f64>,
    pub last_step: f64,
}

const ARMIJO_C1: f64 = 1e-4;

/// Backtracking line search along `dir`; returns the accepted point.
fn line_search<O: Objective>(
    obj: &O,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    dir: &DVector<f64>,
) -> Option<(DVector<f64>, f64, DVector<f64>)> {
    let slope = g.dot(dir);
    if !(slope < 0.0) {
        return None;
    }
    let mut t = 1.0;
    for _ in 0..60 {
        let cand = x + dir * t;
        if let Some((fc, gc)) = obj.eval(&cand) {
            if fc.is_finite() && fc <= f + ARMIJO_C1 * t * slope {
                return Some((cand, fc, gc));
            }
        }
        t *= 0.5;
    }
    None
}

/// Central-difference Jacobian of the gradient, symmetrized.
pub fn fd_hessian<O: Objective>(obj: &O, x: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += step;
        let mut xm = x.clone();
        xm[j] -= step;
        let (_, gp) = obj.eval(&xp)?;
        let (_, gm) = obj.eval(&xm)?;
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    Some((&h + h.transpose()) * 0.5)
}

/// Minimizes `obj` from `x0`. Returns `None` if the start is outside the domain.
pub fn minimize<O: Objective>(obj: &O, x0: DVector<f64>, opts: &OptimOptions) -> Option<OptimResult> {
    let n = x0.len();
    let (mut f, mut g) = obj.eval(&x0)?;
    let mut x = x0;
    let mut trace = vec![f];
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    for _ in 0..opts.max_bfgs_iter {
        if g.amax() < opts.grad_tol * 1e-2 {
            break;
        }
        let mut dir = -(&hinv * &g);
        if g.dot(&dir) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let Some((xn, fn_, gn)) = line_search(obj, &x, f, &g, &dir) else {
            break;
        };
        iterations += 1;
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        last_step = s.amax();
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        if last_step < opts.step_tol * 1e-2 && g.amax() < opts.grad_tol {
            break;
        }
    }

    // Newton polish.
    for _ in 0..opts.max_newton_iter {
        let Some(h) = fd_hessian(obj, &x) else { break };
        let dir = match h.clone().cholesky() {
            Some(chol) => -chol.solve(&g),
            None => -(&hinv * &g),
        };
        match line_search(obj, &x, f, &g, &dir) {
            Some((xn, fn_, gn)) => {
                iterations += 1;
                last_step = (&xn - &x).amax();
                x = xn;
                f = fn_;
                g = gn;
                trace.push(f);
                if last_step < opts.step_tol && g.amax() < opts.grad_tol {
                    break;
                }
            }
            None => {
                // No descent possible at working precision.
                last_step = 0.0;
                break;
            }
        }
    }

    Some(OptimResult {
        x,
        value: f,
        gradient: g,
        iterations,
        trace,
        last_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let obj = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Some((f, g))
        };
        let r = minimize(&obj, DVector::from_vec(vec![-1.2, 1.0]), &OptimOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_domain() {
        // f = x - ln x on x > 0, minimum at 1.
        let obj = |x: &DVector<f64>| (x[0] > 0.0).then(|| (x[0] - x[0].ln(), DVector::from_element(1, 1.0 - 1.0 / x[0])));
        let r = minimize(&obj, DVector::from_element(1, 5.0), &OptimOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-9);
    }
}
