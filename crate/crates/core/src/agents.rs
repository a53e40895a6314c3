//! Episodic environments for the two control architectures.
//!
//! * direct: the policy commands `(n_mac, xi_tur, xi_top, f_drain)`;
//! * hierarchical: the policy commands a product-rate setpoint and an
//!   [`LmpcController`] turns it into MVs.
//!
//! `xi_liq` is never commanded; the plant computes it from production and
//! demand. Both architectures go through [`step_reward`].

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmpc::{LmpcController, MpcConfig, MpcError, QpStatus};
use crate::plant::{
    liq_split, observe, ConstraintSpec, ManipulatedVars, MvBounds, ObsNormalization, Observation,
    Plant, PlantError, PlantState, PowerBreakdown, StateOverrides,
};
use crate::pricing::{PriceProfile, PricingError};
use crate::reward::{reward_parts, PenaltyConfig, RewardParts};
use crate::sysid::{plant_outputs, LinearModel};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already finished; call reset")]
    EpisodeFinished,
    #[error("action has {found} components, expected {expected}")]
    ActionDim { found: usize, expected: usize },
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("{0} step called on a {1} environment")]
    WrongArch(&'static str, Arch),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Direct,
    #[serde(alias = "hier")]
    Hierarchical,
}

impl Arch {
    pub fn action_dim(self) -> usize {
        match self {
            Arch::Direct => 4,
            Arch::Hierarchical => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Direct => "direct",
            Arch::Hierarchical => "hierarchical",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Arch::Direct),
            "hier" | "hierarchical" => Ok(Arch::Hierarchical),
            other => Err(format!("unknown architecture {other:?} (direct | hier)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub steps_per_episode: usize,
    /// Plant step, s.
    pub dt: f64,
    /// Customer demand, mol/s.
    pub demand: f64,
    /// Hierarchical setpoint interval, mol/s.
    pub setpoint_range: (f64, f64),
    pub initial: StateOverrides,
    pub penalty: PenaltyConfig,
    pub constraints: ConstraintSpec,
    pub obs_norm: ObsNormalization,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            steps_per_episode: 96,
            dt: 900.0,
            demand: 20.0,
            setpoint_range: (15.0, 30.0),
            initial: StateOverrides::default(),
            penalty: PenaltyConfig::default(),
            constraints: ConstraintSpec::default(),
            obs_norm: ObsNormalization::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.steps_per_episode == 0 || !(self.dt > 0.0) {
            return bad("steps_per_episode and dt must be positive".into());
        }
        let day = self.steps_per_episode as f64 * self.dt;
        if (day - SECONDS_PER_DAY).abs() > 1e-6 {
            return bad(format!("steps_per_episode * dt = {day} s, must be one day"));
        }
        if !(self.demand > 0.0) {
            return bad("demand must be positive".into());
        }
        let (lo, hi) = self.setpoint_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("setpoint_range ({lo}, {hi}) must be increasing"));
        }
        self.penalty
            .validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt / 3600.0
    }
}

/// Affine map between normalized actions in `[-1, 1]` and physical ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ActionSpec {
    pub fn direct() -> Self {
        Self {
            lower: MvBounds::TABLE.lower.to_vec(),
            upper: MvBounds::TABLE.upper.to_vec(),
        }
    }

    pub fn hierarchical(range: (f64, f64)) -> Self {
        Self {
            lower: vec![range.0],
            upper: vec![range.1],
        }
    }

    pub fn for_arch(arch: Arch, cfg: &EpisodeConfig) -> Self {
        match arch {
            Arch::Direct => Self::direct(),
            Arch::Hierarchical => Self::hierarchical(cfg.setpoint_range),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Normalized action to physical values; inputs are clipped to `[-1, 1]`.
    pub fn to_physical(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| {
                let v = v.clamp(-1.0, 1.0);
                let (lo, hi) = (self.lower[i], self.upper[i]);
                0.5 * (lo + hi) + 0.5 * (hi - lo) * v
            })
            .collect()
    }

    pub fn to_normalized(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = (self.lower[i], self.upper[i]);
                (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// Reward of one realized step; identical for both architectures.
#[allow(clippy::too_many_arguments)]
pub fn step_reward(
    plant: &Plant,
    cfg: &EpisodeConfig,
    price: f64,
    state: &PlantState,
    mv: &ManipulatedVars,
    fault: bool,
) -> (RewardParts, PowerBreakdown, Vec<f64>, f64) {
    let power = plant.power(state, mv);
    let g = cfg.constraints.path_values(state);
    let h = cfg.constraints.terminal_value(state);
    let t_h = state.t_sim / 3600.0;
    let parts = reward_parts(price, &power, cfg.dt_hours(), &g, h, t_h, &cfg.penalty, fault);
    (parts, power, g, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverFlag {
    Converged,
    MaxIterReached,
    /// The QP could not be solved; the previous MVs were held.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpInfo {
    pub iterations: usize,
    pub residual: f64,
    pub flag: SolverFlag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// 1-based index of the step just taken.
    pub step: usize,
    /// Hour of the step start; the price applies from here.
    pub t_start_h: f64,
    pub price: f64,
    pub setpoint: Option<f64>,
    pub mv: ManipulatedVars,
    pub xi_liq: f64,
    /// State at the end of the step.
    pub state: PlantState,
    pub power: PowerBreakdown,
    pub constraint_values: Vec<f64>,
    pub terminal_value: f64,
    pub reward_parts: RewardParts,
    pub fault: bool,
    pub qp: Option<QpInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One episode at a time over a fixed price profile.
#[derive(Debug, Clone)]
pub struct Env {
    arch: Arch,
    cfg: EpisodeConfig,
    plant: Plant,
    prices: PriceProfile,
    spec: ActionSpec,
    controller: Option<LmpcController>,
    state: PlantState,
    mv: ManipulatedVars,
    steps: usize,
    done: bool,
    episode_return: f64,
}

impl Env {
    pub fn direct(cfg: EpisodeConfig, plant: Plant, prices: PriceProfile) -> Result<Self, EnvError> {
        Self::build(Arch::Direct, cfg, plant, prices, None)
    }

    pub fn hierarchical(
        cfg: EpisodeConfig,
        plant: Plant,
        prices: PriceProfile,
        model: LinearModel,
        mpc: MpcConfig,
    ) -> Result<Self, EnvError> {
        let b = MvBounds::TABLE;
        let ctrl = LmpcController::new(model, mpc, b.lower.to_vec(), b.upper.to_vec())?;
        Self::build(Arch::Hierarchical, cfg, plant, prices, Some(ctrl))
    }

    fn build(
        arch: Arch,
        cfg: EpisodeConfig,
        mut plant: Plant,
        prices: PriceProfile,
        controller: Option<LmpcController>,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        let spec = ActionSpec::for_arch(arch, &cfg);
        if spec.dim() != arch.action_dim() {
            return Err(EnvError::InvalidConfig(format!(
                "{arch} action spec has dimension {}",
                spec.dim()
            )));
        }
        let needed_h = (cfg.steps_per_episode as f64 * cfg.dt / 3600.0).ceil() as usize + crate::plant::FORECAST_LEN;
        if prices.horizon_hours() < needed_h {
            return Err(EnvError::InvalidConfig(format!(
                "price profile covers {} h, episode needs {needed_h} h",
                prices.horizon_hours()
            )));
        }
        plant.params.n_demand = cfg.demand;
        let state = plant.nominal_state();
        Ok(Self {
            arch,
            cfg,
            plant,
            prices,
            spec,
            controller,
            state,
            mv: ManipulatedVars::NOMINAL,
            steps: 0,
            done: true,
            episode_return: 0.0,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn prices(&self) -> &PriceProfile {
        &self.prices
    }

    pub fn action_spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn action_dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn set_prices(&mut self, prices: PriceProfile) -> Result<(), EnvError> {
        if prices.horizon_hours() < self.prices.horizon_hours().min(crate::pricing::MIN_PROFILE_HOURS) {
            return Err(EnvError::InvalidConfig("price profile too short".into()));
        }
        self.prices = prices;
        self.done = true;
        Ok(())
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.state = self.plant.reset(seed, Some(&self.cfg.initial))?;
        self.mv = ManipulatedVars::NOMINAL;
        if let Some(c) = self.controller.as_mut() {
            c.reset();
        }
        self.steps = 0;
        self.done = false;
        self.episode_return = 0.0;
        self.observation()
    }

    pub fn observation(&self) -> Result<Observation, EnvError> {
        let t = self.state.t_sim;
        let forecast = self.prices.forecast(t)?;
        Ok(observe(&self.state, &forecast, (t / 3600.0).rem_euclid(24.0), &self.cfg.obs_norm)?)
    }

    /// Dispatches to [`Env::direct_step`] or [`Env::hier_step`].
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        match self.arch {
            Arch::Direct => self.direct_step(action),
            Arch::Hierarchical => self.hier_step(action),
        }
    }

    fn check_action(&self, action: &[f64]) -> Result<(), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        if action.len() != self.spec.dim() {
            return Err(EnvError::ActionDim { found: action.len(), expected: self.spec.dim() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        Ok(())
    }

    pub fn direct_step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.arch != Arch::Direct {
            return Err(EnvError::WrongArch("direct", self.arch));
        }
        self.check_action(action)?;
        let x = self.spec.to_physical(action);
        let mv = ManipulatedVars::from_array([x[0], x[1], x[2], x[3]]);
        self.advance(mv, None, None)
    }

    pub fn hier_step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.arch != Arch::Hierarchical {
            return Err(EnvError::WrongArch("hierarchical", self.arch));
        }
        self.check_action(action)?;
        let sp = self.spec.to_physical(action)[0];
        let y_sp = self.output_setpoints(sp);
        let y_meas = plant_outputs(&self.state);
        let ctrl = self.controller.as_mut().expect("hierarchical env has a controller");
        let (mv, qp) = match ctrl.step(&y_meas, &y_sp) {
            Ok(s) => {
                let flag = match s.qp_status {
                    QpStatus::Converged => SolverFlag::Converged,
                    QpStatus::MaxIterReached => SolverFlag::MaxIterReached,
                };
                let mv = ManipulatedVars::from_array([s.u[0], s.u[1], s.u[2], s.u[3]]);
                (mv, QpInfo { iterations: s.qp_iterations, residual: s.qp_residual, flag })
            }
            Err(MpcError::Qp(_)) => (
                self.mv,
                QpInfo { iterations: 0, residual: f64::NAN, flag: SolverFlag::Failed },
            ),
            Err(e) => return Err(e.into()),
        };
        self.advance(MvBounds::TABLE.clamp(mv), Some(sp), Some(qp))
    }

    /// Output targets for the LMPC: production at `sp`, impurity and IRC
    /// temperature at nominal, tank inflow consistent with the surplus.
    pub fn output_setpoints(&self, sp: f64) -> [f64; 4] {
        let p = &self.plant.params;
        [sp, p.impurity_nominal, p.dt_irc_nominal, (sp - self.cfg.demand).max(0.0)]
    }

    fn advance(
        &mut self,
        mv: ManipulatedVars,
        setpoint: Option<f64>,
        qp: Option<QpInfo>,
    ) -> Result<StepOutcome, EnvError> {
        let t_start = self.state.t_sim;
        let price = self.prices.price_at(t_start)?;
        let (next, fault) = match self.plant.step(&self.state, &mv, self.cfg.demand, self.cfg.dt) {
            Ok(s) => (s, false),
            Err(PlantError::TankEmpty { .. }) => {
                let mut s = self.state;
                s.n_tank = 0.0;
                s.t_sim = t_start + self.cfg.dt;
                (s, true)
            }
            Err(e) => return Err(e.into()),
        };
        self.state = next;
        self.mv = mv;
        self.steps += 1;
        let (parts, power, g, h) = step_reward(&self.plant, &self.cfg, price, &next, &mv, fault);
        let reward = parts.total();
        self.episode_return += reward;
        self.done = fault || self.steps >= self.cfg.steps_per_episode;
        let info = StepInfo {
            step: self.steps,
            t_start_h: t_start / 3600.0,
            price,
            setpoint,
            mv,
            xi_liq: liq_split(next.n_product, self.cfg.demand),
            state: next,
            power,
            constraint_values: g,
            terminal_value: h,
            reward_parts: parts,
            fault,
            qp,
        };
        Ok(StepOutcome { obs: self.observation()?, reward, done: self.done, info })
    }
}

/// One row of the per-episode trajectory export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t_h: f64,
    pub price: f64,
    pub setpoint: Option<f64>,
    pub n_mac: f64,
    pub xi_tur: f64,
    pub xi_top: f64,
    pub f_drain: f64,
    pub xi_liq: f64,
    pub n_product: f64,
    pub i_product: f64,
    pub dt_irc: f64,
    pub n_tank: f64,
    pub f_tank: f64,
    pub p_comp: f64,
    pub p_liq: f64,
    pub p_tur: f64,
    pub reward: f64,
}

impl TrajectoryRow {
    pub fn from_outcome(out: &StepOutcome) -> Self {
        let i = &out.info;
        Self {
            step: i.step,
            t_h: i.t_start_h,
            price: i.price,
            setpoint: i.setpoint,
            n_mac: i.mv.n_mac,
            xi_tur: i.mv.xi_tur,
            xi_top: i.mv.xi_top,
            f_drain: i.mv.f_drain,
            xi_liq: i.xi_liq,
            n_product: i.state.n_product,
            i_product: i.state.i_product,
            dt_irc: i.state.dt_irc,
            n_tank: i.state.n_tank,
            f_tank: i.state.f_tank,
            p_comp: i.power.p_comp,
            p_liq: i.power.p_liq,
            p_tur: i.power.p_tur,
            reward: out.reward,
        }
    }

    pub fn p_net(&self) -> f64 {
        self.p_comp + self.p_liq - self.p_tur
    }
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], w: W) -> Result<(), EnvError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Vec<TrajectoryRow>, EnvError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<_>, _>>()?)
}

pub fn save_trajectory(rows: &[TrajectoryRow], path: impl AsRef<Path>) -> Result<(), EnvError> {
    write_trajectory(rows, std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{N_TANK_MID, OBS_DIM};
    use crate::pricing::synth_profile;
    use crate::sysid::{identify, SysidConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn model() -> &'static LinearModel {
        static MODEL: OnceLock<LinearModel> = OnceLock::new();
        MODEL.get_or_init(|| identify(&Plant::default(), 900.0, &SysidConfig::default(), 1).unwrap().0)
    }

    fn direct_env() -> Env {
        Env::direct(EpisodeConfig::default(), Plant::default(), synth_profile(0, 50.0, 40.0)).unwrap()
    }

    fn hier_env() -> Env {
        Env::hierarchical(
            EpisodeConfig::default(),
            Plant::default(),
            synth_profile(0, 50.0, 40.0),
            model().clone(),
            MpcConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_action_is_box_midpoint() {
        let mut env = direct_env();
        env.reset(0).unwrap();
        let out = env.direct_step(&[0.0; 4]).unwrap();
        assert_eq!(out.info.mv, ManipulatedVars::NOMINAL);
    }

    #[test]
    fn unit_action_is_upper_bound() {
        let x = ActionSpec::direct().to_physical(&[1.0; 4]);
        assert_eq!(x, MvBounds::TABLE.upper.to_vec());
        let x = ActionSpec::direct().to_physical(&[-1.0; 4]);
        assert_eq!(x, MvBounds::TABLE.lower.to_vec());
    }

    #[test]
    fn hierarchical_midpoint_setpoint() {
        assert_eq!(ActionSpec::hierarchical((15.0, 30.0)).to_physical(&[0.0]), vec![22.5]);
        let mut env = hier_env();
        env.reset(0).unwrap();
        let out = env.hier_step(&[0.0]).unwrap();
        assert_eq!(out.info.setpoint, Some(22.5));
        assert!(out.info.qp.is_some());
    }

    #[test]
    fn episode_ends_exactly_at_96() {
        let mut env = direct_env();
        env.reset(0).unwrap();
        for k in 1..=96 {
            let out = env.direct_step(&[0.0; 4]).unwrap();
            assert_eq!(out.done, k == 96, "step {k}");
        }
        assert!(matches!(env.direct_step(&[0.0; 4]), Err(EnvError::EpisodeFinished)));
    }

    #[test]
    fn reset_is_deterministic_and_centered() {
        let mut env = direct_env();
        let a = env.reset(7).unwrap();
        let b = env.reset(7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_slice().len(), OBS_DIM);
        assert_eq!(env.state().n_tank, N_TANK_MID);
        assert_eq!(a.0[2], 0.0);
    }

    #[test]
    fn wrong_arch_and_dims_are_rejected() {
        let mut env = direct_env();
        env.reset(0).unwrap();
        assert!(matches!(env.hier_step(&[0.0]), Err(EnvError::WrongArch(..))));
        assert!(matches!(env.direct_step(&[0.0; 3]), Err(EnvError::ActionDim { found: 3, expected: 4 })));
        assert!(matches!(env.direct_step(&[f64::NAN; 4]), Err(EnvError::NonFiniteAction)));
        let mut h = hier_env();
        h.reset(0).unwrap();
        assert!(matches!(h.hier_step(&[0.0; 4]), Err(EnvError::ActionDim { found: 4, expected: 1 })));
    }

    #[test]
    fn stepping_before_reset_fails() {
        let mut env = direct_env();
        assert!(matches!(env.direct_step(&[0.0; 4]), Err(EnvError::EpisodeFinished)));
    }

    #[test]
    fn config_must_span_one_day() {
        let cfg = EpisodeConfig { steps_per_episode: 48, ..Default::default() };
        assert!(matches!(
            Env::direct(cfg, Plant::default(), synth_profile(0, 50.0, 40.0)),
            Err(EnvError::InvalidConfig(_))
        ));
    }

    #[test]
    fn nominal_setpoint_keeps_path_constraints() {
        let mut env = hier_env();
        env.reset(0).unwrap();
        let nominal = env.plant().steady_production(&ManipulatedVars::NOMINAL);
        let a = env.action_spec().to_normalized(&[nominal]);
        loop {
            let out = env.hier_step(&a).unwrap();
            for (k, g) in out.info.constraint_values.iter().enumerate() {
                assert!(*g <= 0.0, "constraint {k} = {g} at step {}", out.info.step);
            }
            if out.done {
                break;
            }
        }
    }

    #[test]
    fn hierarchical_reward_uses_shared_path() {
        let mut env = hier_env();
        env.reset(0).unwrap();
        for a in [0.3, -0.6, 0.9] {
            let out = env.hier_step(&[a]).unwrap();
            let (parts, ..) = step_reward(env.plant(), env.config(), out.info.price, &out.info.state, &out.info.mv, false);
            assert_eq!(parts.total().to_bits(), out.reward.to_bits());
        }
    }

    #[test]
    fn direct_replay_matches_hierarchical_reward() {
        let mut h = hier_env();
        let mut d = direct_env();
        h.reset(0).unwrap();
        d.reset(0).unwrap();
        for a in [0.5, 0.5, -0.2] {
            let oh = h.hier_step(&[a]).unwrap();
            let od = d.direct_step(&ActionSpec::direct().to_normalized(&oh.info.mv.to_array())).unwrap();
            assert_relative_eq!(od.reward, oh.reward, max_relative = 1e-9);
        }
    }

    #[test]
    fn episode_return_is_sum_of_rewards() {
        let mut env = direct_env();
        env.reset(0).unwrap();
        let mut sum = 0.0;
        for k in 0..96 {
            let a = (k as f64 / 10.0).sin();
            sum += env.direct_step(&[a, -a, 0.5 * a, 0.0]).unwrap().reward;
        }
        assert_relative_eq!(env.episode_return(), sum, max_relative = 1e-12);
    }

    #[test]
    fn tank_empty_ends_episode_with_fault() {
        let cfg = EpisodeConfig {
            initial: StateOverrides { n_tank: Some(1000.0), n_product: Some(12.0), ..Default::default() },
            ..Default::default()
        };
        let mut env = Env::direct(cfg, Plant::default(), synth_profile(0, 50.0, 40.0)).unwrap();
        env.reset(0).unwrap();
        let out = env.direct_step(&[-1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(out.done && out.info.fault);
        assert!(out.info.reward_parts.fault < 0.0);
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let mut env = hier_env();
        env.reset(0).unwrap();
        let rows: Vec<TrajectoryRow> = (0..3).map(|_| TrajectoryRow::from_outcome(&env.hier_step(&[0.2]).unwrap())).collect();
        let mut buf = Vec::new();
        write_trajectory(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "step,t_h,price,setpoint,n_mac,xi_tur,xi_top,f_drain,xi_liq,n_product,i_product,dt_irc,n_tank,f_tank,p_comp,p_liq,p_tur,reward\n"
        ));
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), rows);

        let mut d = direct_env();
        d.reset(0).unwrap();
        let row = TrajectoryRow::from_outcome(&d.direct_step(&[0.0; 4]).unwrap());
        let mut buf = Vec::new();
        write_trajectory(&[row], &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap().lines().nth(1).unwrap().to_string();
        assert!(line.starts_with("1,0.0,50"), "{line}");
        assert_eq!(line.split(',').nth(3), Some(""));
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("hier".parse::<Arch>().unwrap(), Arch::Hierarchical);
        assert_eq!("direct".parse::<Arch>().unwrap(), Arch::Direct);
        assert!("mpc".parse::<Arch>().is_err());
        assert_eq!(serde_json::from_str::<Arch>("\"hier\"").unwrap(), Arch::Hierarchical);
    }

    proptest! {
        #[test]
        fn action_map_roundtrips_and_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, dim in 0usize..4) {
            let spec = ActionSpec::direct();
            let mut va = vec![0.0; 4];
            let mut vb = vec![0.0; 4];
            va[dim] = a;
            vb[dim] = b;
            let (xa, xb) = (spec.to_physical(&va), spec.to_physical(&vb));
            prop_assert!((spec.to_normalized(&xa)[dim] - a).abs() < 1e-12);
            if a < b {
                prop_assert!(xa[dim] < xb[dim]);
            }
            prop_assert!(MvBounds::TABLE.contains(&ManipulatedVars::from_array([xa[0], xa[1], xa[2], xa[3]])));
        }
    }
}
