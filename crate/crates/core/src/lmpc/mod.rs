//! Setpoint-tracking linear MPC.
//!
//! The controller works in deviation coordinates of a [`LinearModel`].
//! Decision variables are the stacked input deviations over the horizon,
//! each divided by its `input_scale`; tracking errors are divided by
//! `output_scale` before weighting. The QP is condensed (inputs only) with
//! box bounds from the MV limits, so it is always feasible.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sysid::LinearModel;
pub use qp::{solve_qp, solve_qp_warm, QpError, QpProblem, QpSettings, QpSolution, QpStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid MPC config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Output tracking weights.
    pub q: Vec<f64>,
    /// Input-move weights.
    pub r: Vec<f64>,
    pub bias_gain: f64,
    /// Weight on every planned input's distance from the last applied input.
    /// Vanishes at steady state, so tracking stays offset-free; it bounds the
    /// QP condition number when inputs are redundant.
    pub input_reg: f64,
    /// Output normalization applied before `q`.
    pub output_scale: Vec<f64>,
    /// Input normalization of the decision variables; usually the MV ranges.
    pub input_scale: Vec<f64>,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            q: vec![10.0, 1.0, 1.0, 0.1],
            r: vec![0.1; 4],
            bias_gain: 1.0,
            input_reg: 0.1,
            output_scale: vec![1.0, 100.0, 0.25, 1.0],
            input_scale: vec![20.0, 0.1, 0.03, 2.0],
            qp_tol: 1e-6,
            qp_max_iter: 2000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, model: &LinearModel) -> Result<(), MpcError> {
        let (m, p) = (model.n_inputs(), model.n_outputs());
        if self.horizon == 0 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.q.len() != p || self.output_scale.len() != p {
            return Err(MpcError::DimensionMismatch(format!(
                "q/output_scale need {p} entries"
            )));
        }
        if self.r.len() != m || self.input_scale.len() != m {
            return Err(MpcError::DimensionMismatch(format!(
                "r/input_scale need {m} entries"
            )));
        }
        if self.q.iter().any(|v| !(*v >= 0.0)) {
            return Err(MpcError::InvalidConfig("q must be non-negative".into()));
        }
        if self.r.iter().any(|v| !(*v > 0.0)) {
            return Err(MpcError::InvalidConfig("r must be strictly positive".into()));
        }
        if self.output_scale.iter().chain(&self.input_scale).any(|v| !(*v > 0.0)) {
            return Err(MpcError::InvalidConfig("scales must be positive".into()));
        }
        if !(self.input_reg >= 0.0) {
            return Err(MpcError::InvalidConfig("input_reg must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_gain) {
            return Err(MpcError::InvalidConfig("bias_gain must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Condensed QP with the bookkeeping needed to map its solution back.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcQp {
    pub qp: QpProblem,
    pub horizon: usize,
    pub n_inputs: usize,
}

impl MpcQp {
    /// First move of a solution, as a physical input deviation.
    pub fn first_move(&self, sol: &DVector<f64>, cfg: &MpcConfig) -> DVector<f64> {
        DVector::from_fn(self.n_inputs, |j, _| sol[j] * cfg.input_scale[j])
    }
}

/// Build the condensed tracking QP.
///
/// * `x_hat` model state deviation, `d_hat` output bias, `y_sp` setpoint
///   deviations, `u_prev` previously applied input deviation (physical).
/// * `u_lower`/`u_upper` are absolute input bounds.
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    model: &LinearModel,
    x_hat: &DVector<f64>,
    y_sp: &DVector<f64>,
    d_hat: &DVector<f64>,
    u_prev: &DVector<f64>,
    u_lower: &[f64],
    u_upper: &[f64],
    cfg: &MpcConfig,
) -> Result<MpcQp, MpcError> {
    let (n, m, p) = (model.n_states(), model.n_inputs(), model.n_outputs());
    let big_n = cfg.horizon;
    if x_hat.len() != n
        || y_sp.len() != p
        || d_hat.len() != p
        || u_prev.len() != m
        || u_lower.len() != m
        || u_upper.len() != m
        || cfg.q.len() != p
        || cfg.r.len() != m
        || cfg.output_scale.len() != p
        || cfg.input_scale.len() != m
    {
        return Err(MpcError::DimensionMismatch(format!(
            "model n={n} m={m} p={p}; x_hat {}, y_sp {}, d_hat {}, u_prev {}, bounds {}/{}",
            x_hat.len(),
            y_sp.len(),
            d_hat.len(),
            u_prev.len(),
            u_lower.len(),
            u_upper.len()
        )));
    }
    let s_u = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.input_scale));
    let b_scaled = &model.b * &s_u;

    // markov[k] = C A^k B S_u ; free[k] = C A^(k+1) x_hat
    let mut markov = Vec::with_capacity(big_n);
    let mut a_pow_b = b_scaled.clone();
    let mut free = Vec::with_capacity(big_n);
    let mut a_pow_x = &model.a * x_hat;
    for _ in 0..big_n {
        markov.push(&model.c * &a_pow_b);
        a_pow_b = &model.a * a_pow_b;
        free.push(&model.c * &a_pow_x);
        a_pow_x = &model.a * a_pow_x;
    }

    let nv = big_n * m;
    let ny = big_n * p;
    let mut gamma = DMatrix::zeros(ny, nv);
    for k in 0..big_n {
        for j in 0..=k {
            gamma.view_mut((k * p, j * m), (p, m)).copy_from(&markov[k - j]);
        }
    }
    // weights on scaled errors
    let w = DVector::from_fn(ny, |i, _| {
        let o = i % p;
        cfg.q[o] / (cfg.output_scale[o] * cfg.output_scale[o])
    });
    let offset = DVector::from_fn(ny, |i, _| free[i / p][i % p] + d_hat[i % p] - y_sp[i % p]);

    // move differences: D v - e v_prev
    let mut dmat = DMatrix::zeros(nv, nv);
    for i in 0..nv {
        dmat[(i, i)] = 1.0;
        if i >= m {
            dmat[(i, i - m)] = -1.0;
        }
    }
    let rw = DVector::from_fn(nv, |i, _| cfg.r[i % m]);
    let v_prev = DVector::from_fn(m, |j, _| u_prev[j] / cfg.input_scale[j]);
    let mut e_prev = DVector::zeros(nv);
    e_prev.rows_mut(0, m).copy_from(&v_prev);
    let v_prev_all = DVector::from_fn(nv, |i, _| v_prev[i % m]);

    let gtw = gamma.transpose() * DMatrix::from_diagonal(&w);
    let dtr = dmat.transpose() * DMatrix::from_diagonal(&rw);
    let mut h = (&gtw * &gamma + &dtr * &dmat) * 2.0;
    for i in 0..nv {
        h[(i, i)] += 2.0 * cfg.input_reg;
    }
    // exact symmetry
    for i in 0..nv {
        for j in 0..i {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
    let f = (&gtw * &offset - &dtr * &e_prev - &v_prev_all * cfg.input_reg) * 2.0;

    let lb = DVector::from_fn(nv, |i, _| {
        let j = i % m;
        (u_lower[j] - model.u_ss[j]) / cfg.input_scale[j]
    });
    let ub = DVector::from_fn(nv, |i, _| {
        let j = i % m;
        (u_upper[j] - model.u_ss[j]) / cfg.input_scale[j]
    });
    Ok(MpcQp {
        qp: QpProblem { h, f, lb, ub },
        horizon: big_n,
        n_inputs: m,
    })
}

/// Outcome of one controller step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    /// Absolute input to apply, clamped to the bounds.
    pub u: DVector<f64>,
    pub qp_iterations: usize,
    pub qp_residual: f64,
    pub qp_status: QpStatus,
}

/// Receding-horizon controller with output-bias (offset-free) correction.
#[derive(Debug, Clone)]
pub struct LmpcController {
    model: LinearModel,
    cfg: MpcConfig,
    u_lower: Vec<f64>,
    u_upper: Vec<f64>,
    x_hat: DVector<f64>,
    d_hat: DVector<f64>,
    u_prev: DVector<f64>,
    warm: Option<DVector<f64>>,
}

impl LmpcController {
    pub fn new(
        model: LinearModel,
        cfg: MpcConfig,
        u_lower: Vec<f64>,
        u_upper: Vec<f64>,
    ) -> Result<Self, MpcError> {
        model
            .check_dims()
            .map_err(|e| MpcError::DimensionMismatch(e.to_string()))?;
        cfg.validate(&model)?;
        if u_lower.len() != model.n_inputs() || u_upper.len() != model.n_inputs() {
            return Err(MpcError::DimensionMismatch("input bounds".into()));
        }
        let (n, m, p) = (model.n_states(), model.n_inputs(), model.n_outputs());
        Ok(Self {
            model,
            cfg,
            u_lower,
            u_upper,
            x_hat: DVector::zeros(n),
            d_hat: DVector::zeros(p),
            u_prev: DVector::zeros(m),
            warm: None,
        })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.d_hat
    }

    /// Back to the operating point with no bias.
    pub fn reset(&mut self) {
        self.x_hat.fill(0.0);
        self.d_hat.fill(0.0);
        self.u_prev.fill(0.0);
        self.warm = None;
    }

    /// One control step from absolute measured outputs and absolute setpoints.
    pub fn step(&mut self, y_meas: &[f64], y_sp: &[f64]) -> Result<MpcStep, MpcError> {
        let p = self.model.n_outputs();
        if y_meas.len() != p || y_sp.len() != p {
            return Err(MpcError::DimensionMismatch(format!(
                "expected {p} outputs and setpoints"
            )));
        }
        let y_dev = DVector::from_fn(p, |i, _| y_meas[i] - self.model.y_ss[i]);
        let sp_dev = DVector::from_fn(p, |i, _| y_sp[i] - self.model.y_ss[i]);
        let predicted = &self.model.c * &self.x_hat + &self.d_hat;
        self.d_hat += (y_dev - predicted) * self.cfg.bias_gain;

        let mpc = build_qp(
            &self.model,
            &self.x_hat,
            &sp_dev,
            &self.d_hat,
            &self.u_prev,
            &self.u_lower,
            &self.u_upper,
            &self.cfg,
        )?;
        let settings = QpSettings {
            tol: self.cfg.qp_tol,
            max_iter: self.cfg.qp_max_iter,
        };
        let sol = solve_qp_warm(&mpc.qp, self.warm.as_ref(), settings)?;

        let m = self.model.n_inputs();
        let du = mpc.first_move(&sol.x, &self.cfg);
        let u = DVector::from_fn(m, |j, _| {
            (self.model.u_ss[j] + du[j]).clamp(self.u_lower[j], self.u_upper[j])
        });
        let applied = &u - &self.model.u_ss;
        self.x_hat = &self.model.a * &self.x_hat + &self.model.b * &applied;
        self.u_prev = applied;

        // shift the plan one step for the next warm start
        let nv = sol.x.len();
        let mut warm = DVector::zeros(nv);
        warm.rows_mut(0, nv - m).copy_from(&sol.x.rows(m, nv - m));
        warm.rows_mut(nv - m, m).copy_from(&sol.x.rows(nv - m, m));
        self.warm = Some(warm);

        Ok(MpcStep {
            u,
            qp_iterations: sol.iterations,
            qp_residual: sol.residual,
            qp_status: sol.status,
        })
    }
}
