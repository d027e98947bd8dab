//! Small dense Levenberg–Marquardt solver.
//!
//! Used for both the 4×4 coefficient inversion and the PSD line-shape fits.
//! Problems are tiny, so the normal equations are solved directly with a
//! Cholesky factorisation and Marquardt's diagonal scaling.

use nalgebra::{DMatrix, DVector};

/// A least-squares problem `min ½‖r(p)‖²`.
pub trait Problem {
    /// Residual vector, or `None` if `p` is outside the model's domain.
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>>;

    /// Jacobian `∂r_i/∂p_j`. Defaults to central differences.
    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let r0 = self.residuals(p)?;
        let mut jac = DMatrix::zeros(r0.len(), p.len());
        for j in 0..p.len() {
            let h = 1e-7 * p[j].abs().max(1e-7);
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += h;
            lo[j] -= h;
            let d = (self.residuals(&hi)? - self.residuals(&lo)?) / (2.0 * h);
            jac.set_column(j, &d);
        }
        Some(jac)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub max_iter: usize,
    /// Stop when `‖Jᵀr‖∞` drops below this.
    pub gtol: f64,
    /// Stop when the relative step drops below this.
    pub xtol: f64,
    /// Stop when the residual norm drops below this.
    pub ftol_abs: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-15,
            xtol: 1e-14,
            ftol_abs: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub params: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `JᵀJ` at the returned parameters.
    pub normal_matrix: DMatrix<f64>,
    pub n_residuals: usize,
}

impl Report {
    /// Parameter covariance `(JᵀJ)⁻¹`, if the normal matrix is invertible.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.normal_matrix.clone().try_inverse()
    }
}

pub fn minimize<P: Problem + ?Sized>(problem: &P, x0: DVector<f64>, opts: Options) -> Option<Report> {
    let mut x = x0;
    let mut r = problem.residuals(&x)?;
    let mut jac = problem.jacobian(&x)?;
    let mut cost = r.norm_squared();
    let mut jtj = jac.transpose() * &jac;
    let mut jtr = jac.transpose() * &r;

    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        if r.norm() <= opts.ftol_abs || jtr.amax() <= opts.gtol {
            converged = true;
            break;
        }

        let mut a = jtj.clone();
        for i in 0..a.nrows() {
            let d = jtj[(i, i)].max(1e-300);
            a[(i, i)] += lambda * d;
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&jtr)),
            None => {
                lambda *= nu;
                nu *= 2.0;
                continue;
            }
        };

        let trial = &x + &step;
        let accepted = match problem.residuals(&trial) {
            Some(r_new) if r_new.iter().all(|v| v.is_finite()) => {
                let new_cost = r_new.norm_squared();
                // predicted reduction of the quadratic model
                let predicted = -(2.0 * step.dot(&jtr) + step.dot(&(&jtj * &step)));
                let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { -1.0 };
                if new_cost <= cost && (rho > 0.0 || new_cost < cost) {
                    let small = step.norm() <= opts.xtol * (x.norm() + opts.xtol);
                    x = trial;
                    r = r_new;
                    cost = new_cost;
                    match problem.jacobian(&x) {
                        Some(j) => jac = j,
                        None => break,
                    }
                    jtj = jac.transpose() * &jac;
                    jtr = jac.transpose() * &r;
                    let rho = rho.clamp(0.0, 1.0);
                    lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                    if small {
                        converged = true;
                        break;
                    }
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        if !accepted {
            if step.norm() <= opts.xtol * (x.norm() + opts.xtol) {
                converged = true;
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() {
                break;
            }
        }
    }

    Some(Report {
        residual_norm: cost.sqrt(),
        n_residuals: r.len(),
        params: x,
        iterations,
        converged,
        normal_matrix: jtj,
    })
}
