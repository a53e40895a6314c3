//! Reduced-order surrogate of a single-column nitrogen ASU with a liquid
//! product tank.
//!
//! The plant is a set of first-order lags driven by the four manipulated
//! variables, integrated with fixed-step RK4:
//!
//! ```text
//! d(lag_prod)/dt   = (n_mac * yield(xi_top, xi_tur) - lag_prod) / tau_prod
//! d(lag_purity)/dt = (I_target(lag_prod, xi_top) - lag_purity) / tau_purity
//! d(lag_irc)/dt    = (dT_target(lag_prod, f_drain, xi_tur) - lag_irc) / tau_irc
//! d(n_tank)/dt     = xi_liq * n_product - evap
//! ```
//!
//! `xi_liq` is never commanded. It follows the liquefier split logic
//! ([`liq_split`]), so the customer always receives exactly `n_demand`
//! while the tank holds product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nominal (terminal target and initial) tank holdup, mol.
pub const N_TANK_MID: f64 = 1_728_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("product tank ran empty at t = {t_sim:.1} s")]
    TankEmpty { t_sim: f64 },
    #[error("non-finite plant state at t = {t_sim:.1} s")]
    NonFinite { t_sim: f64 },
    #[error("invalid initial-state override: {0}")]
    InvalidOverride(String),
    #[error("price forecast has {0} entries, expected 12")]
    DimensionMismatch(usize),
}

/// Commanded inputs. Bounds per field are in [`MvBounds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManipulatedVars {
    /// Main air compressor flow, mol/s.
    pub n_mac: f64,
    /// Turbine split fraction.
    pub xi_tur: f64,
    /// Top-column split fraction.
    pub xi_top: f64,
    /// Reboiler drain flow, mol/s.
    pub f_drain: f64,
}

impl ManipulatedVars {
    pub const NOMINAL: ManipulatedVars = ManipulatedVars {
        n_mac: 40.0,
        xi_tur: 0.05,
        xi_top: 0.525,
        f_drain: 1.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.n_mac, self.xi_tur, self.xi_top, self.f_drain]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            n_mac: a[0],
            xi_tur: a[1],
            xi_top: a[2],
            f_drain: a[3],
        }
    }
}

/// Box bounds on the manipulated variables, in `ManipulatedVars` field order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvBounds {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl MvBounds {
    pub const TABLE: MvBounds = MvBounds {
        lower: [30.0, 0.0, 0.51, 0.0],
        upper: [50.0, 0.1, 0.54, 2.0],
    };

    pub fn range(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] + self.lower[i])
    }

    pub fn contains(&self, mv: &ManipulatedVars) -> bool {
        mv.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    pub fn clamp(&self, mv: ManipulatedVars) -> ManipulatedVars {
        let mut a = mv.to_array();
        for (i, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
        ManipulatedVars::from_array(a)
    }
}

/// Bounds on the liquefied fraction; computed, never commanded.
pub const XI_LIQ_BOUNDS: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Product impurity, ppm.
    pub i_product: f64,
    /// IRC temperature difference, K.
    pub dt_irc: f64,
    /// Tank holdup, mol.
    pub n_tank: f64,
    /// Liquefied flow into the tank, mol/s.
    pub f_tank: f64,
    /// Column production rate, mol/s.
    pub n_product: f64,
    pub lag_prod: f64,
    pub lag_purity: f64,
    pub lag_irc: f64,
    /// Elapsed simulated time, s.
    pub t_sim: f64,
}

impl PlantState {
    pub fn is_finite(&self) -> bool {
        [
            self.i_product,
            self.dt_irc,
            self.n_tank,
            self.f_tank,
            self.n_product,
            self.lag_prod,
            self.lag_purity,
            self.lag_irc,
            self.t_sim,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Partial initial state used by [`Plant::reset`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StateOverrides {
    pub i_product: Option<f64>,
    pub dt_irc: Option<f64>,
    pub n_tank: Option<f64>,
    pub n_product: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBreakdown {
    /// Main air compressor, MW.
    pub p_comp: f64,
    /// Liquefier, MW.
    pub p_liq: f64,
    /// Turbine generation, MW.
    pub p_tur: f64,
}

impl PowerBreakdown {
    /// Net consumption `p_comp + p_liq - p_tur`, MW.
    pub fn net(&self) -> f64 {
        self.p_comp + self.p_liq - self.p_tur
    }
}

/// Calibration constants of the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Compressor power per unit air flow, MW/(mol/s).
    pub k_comp: f64,
    /// Liquefier power per unit liquefied flow, MW/(mol/s).
    pub k_liq: f64,
    /// Turbine generation per unit turbine flow, MW/(mol/s).
    pub k_tur: f64,
    pub tau_prod: f64,
    pub tau_purity: f64,
    pub tau_irc: f64,
    /// Product yield `n_product / n_mac` at the nominal splits.
    pub yield_nominal: f64,
    pub yield_per_xi_top: f64,
    pub yield_per_xi_tur: f64,
    /// Steady impurity at nominal production, ppm.
    pub impurity_nominal: f64,
    /// Log-sensitivity of impurity to production, 1/(mol/s).
    pub impurity_per_product: f64,
    /// Log-sensitivity of impurity to the top split.
    pub impurity_per_xi_top: f64,
    pub dt_irc_nominal: f64,
    pub dt_irc_per_drain: f64,
    pub dt_irc_per_xi_tur: f64,
    pub dt_irc_per_product: f64,
    /// Customer demand, mol/s.
    pub n_demand: f64,
    /// Largest RK4 substep, s.
    pub max_substep: f64,
    /// Half-width of the seeded uniform perturbation applied to each lag at
    /// reset, as a fraction of its nominal value. Zero gives the exact
    /// steady state.
    pub reset_noise: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            k_comp: 0.0075,
            k_liq: 0.002,
            k_tur: 0.01,
            tau_prod: 1200.0,
            tau_purity: 1800.0,
            tau_irc: 900.0,
            yield_nominal: 0.6,
            yield_per_xi_top: -4.0,
            yield_per_xi_tur: -1.0,
            impurity_nominal: 600.0,
            impurity_per_product: 0.08,
            impurity_per_xi_top: 40.0,
            dt_irc_nominal: 3.5,
            dt_irc_per_drain: 1.5,
            dt_irc_per_xi_tur: -20.0,
            dt_irc_per_product: -0.1,
            n_demand: 20.0,
            max_substep: 60.0,
            reset_noise: 0.0,
        }
    }
}

/// Fraction of production sent to the liquefier so that exactly `n_demand`
/// reaches the customer.
pub fn liq_split(n_product: f64, n_demand: f64) -> f64 {
    if n_product > n_demand {
        (1.0 - n_demand / n_product).clamp(XI_LIQ_BOUNDS.0, XI_LIQ_BOUNDS.1)
    } else {
        0.0
    }
}

/// Flow bookkeeping of one RK4 substep. Flows are the RK4-weighted averages
/// over the substep, so `dn_tank == (f_tank - evap) * dt` holds exactly up
/// to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepFlows {
    pub dt: f64,
    pub f_tank: f64,
    pub evap: f64,
    pub delivered: f64,
    pub dn_tank: f64,
}

#[derive(Debug, Clone, Copy)]
struct Flows {
    f_tank: f64,
    evap: f64,
    delivered: f64,
}

fn tank_flows(n_product: f64, n_demand: f64) -> Flows {
    let xi = liq_split(n_product, n_demand);
    let f_tank = xi * n_product;
    let evap = (n_demand - (1.0 - xi) * n_product).max(0.0);
    Flows {
        f_tank,
        evap,
        delivered: (1.0 - xi) * n_product + evap,
    }
}

/// The surrogate plant. Holds calibration only; all state is passed by value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plant {
    pub params: PlantParams,
}

impl Plant {
    pub fn new(params: PlantParams) -> Self {
        Self { params }
    }

    pub fn n_demand(&self) -> f64 {
        self.params.n_demand
    }

    pub fn production_yield(&self, mv: &ManipulatedVars) -> f64 {
        let p = &self.params;
        p.yield_nominal
            + p.yield_per_xi_top * (mv.xi_top - ManipulatedVars::NOMINAL.xi_top)
            + p.yield_per_xi_tur * (mv.xi_tur - ManipulatedVars::NOMINAL.xi_tur)
    }

    /// Production the column settles to under constant `mv`.
    pub fn steady_production(&self, mv: &ManipulatedVars) -> f64 {
        (mv.n_mac * self.production_yield(mv)).max(0.0)
    }

    fn nominal_production(&self) -> f64 {
        self.steady_production(&ManipulatedVars::NOMINAL)
    }

    pub fn impurity_target(&self, n_product: f64, mv: &ManipulatedVars) -> f64 {
        let p = &self.params;
        p.impurity_nominal
            * (p.impurity_per_product * (n_product - self.nominal_production())
                - p.impurity_per_xi_top * (mv.xi_top - ManipulatedVars::NOMINAL.xi_top))
                .exp()
    }

    pub fn dt_irc_target(&self, n_product: f64, mv: &ManipulatedVars) -> f64 {
        let p = &self.params;
        p.dt_irc_nominal
            + p.dt_irc_per_drain * (mv.f_drain - ManipulatedVars::NOMINAL.f_drain)
            + p.dt_irc_per_xi_tur * (mv.xi_tur - ManipulatedVars::NOMINAL.xi_tur)
            + p.dt_irc_per_product * (n_product - self.nominal_production())
    }

    /// Nominal steady state with the tank at mid-level.
    pub fn nominal_state(&self) -> PlantState {
        let mv = ManipulatedVars::NOMINAL;
        let n_product = self.nominal_production();
        let i_product = self.impurity_target(n_product, &mv);
        let dt_irc = self.dt_irc_target(n_product, &mv);
        PlantState {
            i_product,
            dt_irc,
            n_tank: N_TANK_MID,
            f_tank: tank_flows(n_product, self.params.n_demand).f_tank,
            n_product,
            lag_prod: n_product,
            lag_purity: i_product,
            lag_irc: dt_irc,
            t_sim: 0.0,
        }
    }

    /// Initial state: the nominal steady state, optionally perturbed by
    /// `reset_noise` (seeded), then overridden field by field.
    pub fn reset(
        &self,
        seed: u64,
        overrides: Option<&StateOverrides>,
    ) -> Result<PlantState, PlantError> {
        let mut s = self.nominal_state();
        if self.params.reset_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut jitter = |v: f64| {
                let u: f64 = rng.gen_range(-1.0..1.0);
                v * (1.0 + self.params.reset_noise * u)
            };
            s.lag_prod = jitter(s.lag_prod);
            s.lag_purity = jitter(s.lag_purity);
            s.lag_irc = jitter(s.lag_irc);
        }
        if let Some(o) = overrides {
            let check = |name: &str, v: f64| -> Result<f64, PlantError> {
                if !v.is_finite() || v < 0.0 {
                    Err(PlantError::InvalidOverride(format!(
                        "{name} must be finite and non-negative, got {v}"
                    )))
                } else {
                    Ok(v)
                }
            };
            if let Some(v) = o.i_product {
                s.lag_purity = check("i_product", v)?;
            }
            if let Some(v) = o.dt_irc {
                s.lag_irc = check("dt_irc", v)?;
            }
            if let Some(v) = o.n_tank {
                s.n_tank = check("n_tank", v)?;
            }
            if let Some(v) = o.n_product {
                s.lag_prod = check("n_product", v)?;
            }
        }
        self.sync_outputs(&mut s);
        Ok(s)
    }

    fn sync_outputs(&self, s: &mut PlantState) {
        s.n_product = s.lag_prod.max(0.0);
        s.i_product = s.lag_purity.max(0.0);
        s.dt_irc = s.lag_irc;
        s.f_tank = tank_flows(s.n_product, self.params.n_demand).f_tank;
    }

    fn rhs(&self, y: &[f64; 4], mv: &ManipulatedVars, n_demand: f64) -> ([f64; 4], Flows) {
        let p = &self.params;
        let prod = y[0].max(0.0);
        let flows = tank_flows(prod, n_demand);
        let d = [
            (self.steady_production(mv) - y[0]) / p.tau_prod,
            (self.impurity_target(prod, mv) - y[1]) / p.tau_purity,
            (self.dt_irc_target(prod, mv) - y[2]) / p.tau_irc,
            flows.f_tank - flows.evap,
        ];
        (d, flows)
    }

    /// Advance the plant by `dt` seconds under constant `mv`.
    pub fn step(
        &self,
        state: &PlantState,
        mv: &ManipulatedVars,
        n_demand: f64,
        dt: f64,
    ) -> Result<PlantState, PlantError> {
        self.step_traced(state, mv, n_demand, dt, |_| {})
    }

    /// Number of equal RK4 substeps used for an interval of `dt` seconds.
    pub fn substeps(&self, dt: f64) -> usize {
        ((dt / self.params.max_substep).ceil() as usize).max(1)
    }

    /// [`Plant::step`] that reports the flows of every substep to `observe`.
    pub fn step_traced(
        &self,
        state: &PlantState,
        mv: &ManipulatedVars,
        n_demand: f64,
        dt: f64,
        mut observe: impl FnMut(SubstepFlows),
    ) -> Result<PlantState, PlantError> {
        let n_sub = self.substeps(dt);
        let h = dt / n_sub as f64;
        let mut y = [state.lag_prod, state.lag_purity, state.lag_irc, state.n_tank];
        let mut t = state.t_sim;
        for _ in 0..n_sub {
            let (k1, f1) = self.rhs(&y, mv, n_demand);
            let (k2, f2) = self.rhs(&axpy(&y, 0.5 * h, &k1), mv, n_demand);
            let (k3, f3) = self.rhs(&axpy(&y, 0.5 * h, &k2), mv, n_demand);
            let (k4, f4) = self.rhs(&axpy(&y, h, &k3), mv, n_demand);
            let weighted = |a: f64, b: f64, c: f64, d: f64| (a + 2.0 * b + 2.0 * c + d) / 6.0;
            let f_tank = weighted(f1.f_tank, f2.f_tank, f3.f_tank, f4.f_tank);
            let evap = weighted(f1.evap, f2.evap, f3.evap, f4.evap);
            let delivered = weighted(f1.delivered, f2.delivered, f3.delivered, f4.delivered);
            let dn_tank = (f_tank - evap) * h;
            for i in 0..3 {
                y[i] += h * weighted(k1[i], k2[i], k3[i], k4[i]);
            }
            y[3] += dn_tank;
            t += h;
            observe(SubstepFlows {
                dt: h,
                f_tank,
                evap,
                delivered,
                dn_tank,
            });
            if y.iter().any(|v| !v.is_finite()) {
                return Err(PlantError::NonFinite { t_sim: t });
            }
            if y[3] < 0.0 {
                return Err(PlantError::TankEmpty { t_sim: t });
            }
        }
        let mut next = PlantState {
            lag_prod: y[0],
            lag_purity: y[1],
            lag_irc: y[2],
            n_tank: y[3],
            t_sim: state.t_sim + dt,
            ..*state
        };
        self.sync_outputs(&mut next);
        Ok(next)
    }

    pub fn power(&self, state: &PlantState, mv: &ManipulatedVars) -> PowerBreakdown {
        let p = &self.params;
        let xi_liq = liq_split(state.n_product, p.n_demand);
        PowerBreakdown {
            p_comp: p.k_comp * mv.n_mac,
            p_liq: p.k_liq * xi_liq * state.n_product,
            p_tur: p.k_tur * mv.xi_tur * mv.n_mac,
        }
    }
}

fn axpy(y: &[f64; 4], h: f64, k: &[f64; 4]) -> [f64; 4] {
    [y[0] + h * k[0], y[1] + h * k[1], y[2] + h * k[2], y[3] + h * k[3]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Path,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEntry {
    pub name: String,
    pub kind: ConstraintKind,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub scale: f64,
}

/// Operational constraints of the ASU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub entries: Vec<ConstraintEntry>,
}

/// Names of the entries of [`ConstraintSpec::path_values`], in order.
pub const PATH_CONSTRAINT_NAMES: [&str; 7] = [
    "i_product_max",
    "i_product_min",
    "dt_irc_max",
    "dt_irc_min",
    "n_tank_max",
    "n_tank_min",
    "f_tank_min",
];

impl Default for ConstraintSpec {
    fn default() -> Self {
        let entry = |name: &str, kind, lower, upper, scale| ConstraintEntry {
            name: name.to_string(),
            kind,
            lower,
            upper,
            scale,
        };
        Self {
            entries: vec![
                entry("i_product", ConstraintKind::Path, Some(0.0), Some(1500.0), 1500.0),
                entry("dt_irc", ConstraintKind::Path, Some(2.0), Some(5.0), 3.0),
                entry(
                    "n_tank",
                    ConstraintKind::Path,
                    Some(864_000.0),
                    Some(3_456_000.0),
                    2_592_000.0,
                ),
                entry("f_tank", ConstraintKind::Path, Some(0.0), None, 20.0),
                entry(
                    "n_tank",
                    ConstraintKind::Terminal,
                    Some(N_TANK_MID),
                    Some(N_TANK_MID),
                    N_TANK_MID,
                ),
            ],
        }
    }
}

impl ConstraintSpec {
    fn value(name: &str, s: &PlantState) -> f64 {
        match name {
            "i_product" => s.i_product,
            "dt_irc" => s.dt_irc,
            "n_tank" => s.n_tank,
            "f_tank" => s.f_tank,
            other => panic!("unknown constrained quantity {other}"),
        }
    }

    /// Normalized path-constraint values `g <= 0`. Each bounded side of each
    /// path entry contributes `(x - upper) / scale` or `(lower - x) / scale`,
    /// upper side first; with the default spec the order is
    /// [`PATH_CONSTRAINT_NAMES`].
    pub fn path_values(&self, s: &PlantState) -> Vec<f64> {
        let mut g = Vec::with_capacity(7);
        for e in self.entries.iter().filter(|e| e.kind == ConstraintKind::Path) {
            let x = Self::value(&e.name, s);
            if let Some(u) = e.upper {
                g.push((x - u) / e.scale);
            }
            if let Some(l) = e.lower {
                g.push((l - x) / e.scale);
            }
        }
        g
    }

    /// Signed normalized deviation from the terminal equality target.
    pub fn terminal_value(&self, s: &PlantState) -> f64 {
        self.entries
            .iter()
            .find(|e| e.kind == ConstraintKind::Terminal)
            .map(|e| {
                let target = e.upper.or(e.lower).unwrap_or(0.0);
                (Self::value(&e.name, s) - target) / e.scale
            })
            .unwrap_or(0.0)
    }
}

/// Shorthand for the default constraint set.
pub fn constraint_values(state: &PlantState) -> Vec<f64> {
    ConstraintSpec::default().path_values(state)
}

/// Fixed affine normalization `(x - offset) / scale` of the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsNormalization {
    pub i_product: (f64, f64),
    pub dt_irc: (f64, f64),
    pub n_tank: (f64, f64),
    pub f_tank: (f64, f64),
    pub price: (f64, f64),
    pub t_day: (f64, f64),
}

impl Default for ObsNormalization {
    fn default() -> Self {
        Self {
            i_product: (600.0, 600.0),
            dt_irc: (3.5, 1.5),
            n_tank: (N_TANK_MID, 172_800.0),
            f_tank: (4.0, 10.0),
            price: (50.0, 50.0),
            t_day: (12.0, 12.0),
        }
    }
}

pub const OBS_DIM: usize = 17;
pub const FORECAST_LEN: usize = 12;

/// RL state: `[I_product, dT_IRC, N_tank, F_tank, p_t .. p_t+11, t_d]`, normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn observe(
    state: &PlantState,
    price_forecast: &[f64],
    t_day: f64,
    norm: &ObsNormalization,
) -> Result<Observation, PlantError> {
    if price_forecast.len() != FORECAST_LEN {
        return Err(PlantError::DimensionMismatch(price_forecast.len()));
    }
    let n = |v: f64, (off, scale): (f64, f64)| (v - off) / scale;
    let mut o = [0.0; OBS_DIM];
    o[0] = n(state.i_product, norm.i_product);
    o[1] = n(state.dt_irc, norm.dt_irc);
    o[2] = n(state.n_tank, norm.n_tank);
    o[3] = n(state.f_tank, norm.f_tank);
    for (k, p) in price_forecast.iter().enumerate() {
        o[4 + k] = n(*p, norm.price);
    }
    o[16] = n(t_day, norm.t_day);
    Ok(Observation(o))
}
