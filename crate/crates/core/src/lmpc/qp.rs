//! Box-constrained convex QP solver.
//!
//! Minimizes `0.5 x'Hx + f'x` subject to `lb <= x <= ub` with a monotone
//! accelerated projected-gradient method: Jacobi-scaled variables, Nesterov
//! momentum with gradient-based restart, and a fall-back to a plain projected
//! step whenever the momentum step would raise the objective. Every accepted
//! iterate therefore has an objective no larger than the previous one.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP dimensions inconsistent: {0}")]
    DimensionMismatch(String),
    #[error("QP bounds infeasible at index {0} (lb > ub)")]
    InfeasibleBounds(usize),
    #[error("negative curvature detected; Hessian is not positive semidefinite")]
    NonConvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.f
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lb[i], self.ub[i]);
        }
    }

    /// `max_i |x_i - clamp(x_i - grad_i)|`; zero exactly at a KKT point.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let g = self.gradient(x);
        (0..x.len())
            .map(|i| (x[i] - (x[i] - g[i]).clamp(self.lb[i], self.ub[i])).abs())
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.f.len();
        if self.h.nrows() != n || self.h.ncols() != n || self.lb.len() != n || self.ub.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "h {}x{}, f {}, lb {}, ub {}",
                self.h.nrows(),
                self.h.ncols(),
                n,
                self.lb.len(),
                self.ub.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| self.lb[i] > self.ub[i]) {
            return Err(QpError::InfeasibleBounds(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    /// Iteration cap hit; the returned point is the best (last) iterate.
    MaxIterReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

fn power_iteration(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = h * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda.abs()
}

pub fn solve_qp(qp: &QpProblem, settings: QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(qp, None, settings)
}

/// Solve from an optional warm start (projected onto the box first).
pub fn solve_qp_warm(
    qp: &QpProblem,
    warm: Option<&DVector<f64>>,
    settings: QpSettings,
) -> Result<QpSolution, QpError> {
    solve_qp_traced(qp, warm, settings, |_| {})
}

/// [`solve_qp_warm`] reporting the objective of every accepted iterate,
/// starting with the projected initial point.
pub fn solve_qp_traced(
    qp: &QpProblem,
    warm: Option<&DVector<f64>>,
    settings: QpSettings,
    mut on_iterate: impl FnMut(f64),
) -> Result<QpSolution, QpError> {
    qp.check()?;
    let n = qp.dim();
    if n == 0 {
        return Ok(QpSolution {
            x: DVector::zeros(0),
            objective: 0.0,
            residual: 0.0,
            iterations: 0,
            status: QpStatus::Converged,
        });
    }
    if (0..n).any(|i| qp.h[(i, i)] < 0.0) {
        return Err(QpError::NonConvex);
    }
    // x = D z with D = diag(1/sqrt(H_ii)) gives the scaled Hessian a unit diagonal.
    let d = DVector::from_fn(n, |i, _| {
        let hii = qp.h[(i, i)];
        if hii > 0.0 {
            1.0 / hii.sqrt()
        } else {
            1.0
        }
    });
    let hs = DMatrix::from_fn(n, n, |i, j| d[i] * qp.h[(i, j)] * d[j]);
    let fs = qp.f.component_mul(&d);
    let lbs = qp.lb.component_div(&d);
    let ubs = qp.ub.component_div(&d);
    let project = |z: &mut DVector<f64>| {
        for i in 0..n {
            z[i] = z[i].clamp(lbs[i], ubs[i]);
        }
    };
    let objective = |z: &DVector<f64>, hz: &DVector<f64>| 0.5 * z.dot(hz) + fs.dot(z);
    let residual_scaled = |z: &DVector<f64>, hz: &DVector<f64>| {
        // residual measured in the original coordinates
        (0..n)
            .map(|i| {
                let x = d[i] * z[i];
                let g = (hz[i] + fs[i]) / d[i];
                (x - (x - g).clamp(qp.lb[i], qp.ub[i])).abs()
            })
            .fold(0.0, f64::max)
    };

    let mut lip = power_iteration(&hs).max(f64::MIN_POSITIVE) * 1.05;
    let mut z = match warm {
        Some(w) if w.len() == n => w.component_div(&d),
        _ => DVector::zeros(n),
    };
    project(&mut z);
    let mut hz = &hs * &z;
    let mut obj = objective(&z, &hz);
    on_iterate(obj);
    let mut res = residual_scaled(&z, &hz);
    let mut y = z.clone();
    let mut hy = hz.clone();
    let mut t = 1.0_f64;
    let mut momentum = false;
    let mut iterations = 0;

    while res > settings.tol && iterations < settings.max_iter {
        iterations += 1;
        let mut z_new = &y - (&hy + &fs) / lip;
        project(&mut z_new);
        let hz_new = &hs * &z_new;
        let step = &z_new - &y;
        let curvature = step.dot(&(&hz_new - &hy));
        // hy is carried along with the momentum and picks up rounding error
        let slack = 1e-9 * lip * step.norm_squared()
            + 1e-12 * step.norm() * (hz_new.norm() + hy.norm());
        if curvature < -slack {
            return Err(QpError::NonConvex);
        }
        let obj_new = objective(&z_new, &hz_new);
        if obj_new > obj + 4.0 * f64::EPSILON * (1.0 + obj.abs()) {
            if momentum {
                // drop momentum and retry from the current iterate
                y.copy_from(&z);
                hy.copy_from(&hz);
                t = 1.0;
                momentum = false;
            } else {
                lip *= 2.0;
            }
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let restart = (&y - &z_new).dot(&(&z_new - &z)) > 0.0;
        let beta = if restart { 0.0 } else { (t - 1.0) / t_new };
        let dz = &z_new - &z;
        y = &z_new + &dz * beta;
        hy = &hz_new + (&hz_new - &hz) * beta;
        t = if restart { 1.0 } else { t_new };
        momentum = beta > 0.0;
        z = z_new;
        hz = hz_new;
        obj = obj_new;
        on_iterate(obj);
        res = residual_scaled(&z, &hz);
    }

    let x = z.component_mul(&d);
    let status = if res <= settings.tol {
        QpStatus::Converged
    } else {
        QpStatus::MaxIterReached
    };
    Ok(QpSolution {
        objective: qp.objective(&x),
        residual: res,
        x,
        iterations,
        status,
    })
}
