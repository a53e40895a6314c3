//! Economic reward and constraint penalties.
//!
//! Penalty weights are unsigned; every penalty enters the reward negated,
//! so all penalty terms are `<= 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::PowerBreakdown;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("invalid penalty config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Weight per normalized path constraint.
    pub lambda_path: f64,
    /// Weight of the relaxed terminal constraint.
    #[serde(rename = "lambda_terminal")]
    pub lambda_term: f64,
    /// Hour of day after which the terminal penalty is active.
    #[serde(rename = "t_activate_h")]
    pub t_activate: f64,
    /// Charged once when the tank runs empty.
    pub fault_penalty: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_path: 10.0,
            lambda_term: 1000.0,
            t_activate: 21.0,
            fault_penalty: 50.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let weights = [self.lambda_path, self.lambda_term, self.fault_penalty];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::InvalidConfig(
                "penalty weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..24.0).contains(&self.t_activate) {
            return Err(RewardError::InvalidConfig(format!(
                "t_activate_h must lie in [0, 24), got {}",
                self.t_activate
            )));
        }
        Ok(())
    }

    /// Same config with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_path: self.lambda_path * c,
            lambda_term: self.lambda_term * c,
            fault_penalty: self.fault_penalty * c,
            t_activate: self.t_activate,
        }
    }
}

/// Negative electricity cost of one step, $: `-price * (P_comp + P_liq - P_tur) * dt_h`.
pub fn elec_reward(price: f64, pw: &PowerBreakdown, dt_h: f64) -> f64 {
    -(price * (pw.p_comp + pw.p_liq - pw.p_tur) * dt_h)
}

pub fn path_penalty(g: f64, lambda: f64) -> f64 {
    if g > 0.0 {
        -lambda * g
    } else {
        0.0
    }
}

/// Relaxed terminal equality: quadratic in the deviation, active only after
/// `t_activate`. Squaring covers both one-sided copies of the equality.
pub fn terminal_penalty(h_val: f64, t_h: f64, cfg: &PenaltyConfig) -> f64 {
    if t_h > cfg.t_activate {
        -cfg.lambda_term * h_val * h_val
    } else {
        0.0
    }
}

/// Components of one step's reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardParts {
    pub elec: f64,
    pub path: f64,
    pub terminal: f64,
    pub fault: f64,
}

impl RewardParts {
    pub fn total(&self) -> f64 {
        self.elec + self.path + self.terminal + self.fault
    }
}

#[allow(clippy::too_many_arguments)]
pub fn reward_parts(
    price: f64,
    pw: &PowerBreakdown,
    dt_h: f64,
    g_vec: &[f64],
    h_val: f64,
    t_h: f64,
    cfg: &PenaltyConfig,
    fault: bool,
) -> RewardParts {
    RewardParts {
        elec: elec_reward(price, pw, dt_h),
        path: g_vec.iter().map(|&g| path_penalty(g, cfg.lambda_path)).sum(),
        terminal: terminal_penalty(h_val, t_h, cfg),
        fault: if fault { -cfg.fault_penalty } else { 0.0 },
    }
}

/// `r_t = r_elec + sum(r_path) + r_terminal`, less the fault penalty.
#[allow(clippy::too_many_arguments)]
pub fn total_reward(
    price: f64,
    pw: &PowerBreakdown,
    dt_h: f64,
    g_vec: &[f64],
    h_val: f64,
    t_h: f64,
    cfg: &PenaltyConfig,
    fault: bool,
) -> f64 {
    reward_parts(price, pw, dt_h, g_vec, h_val, t_h, cfg, fault).total()
}
