//! Step-response identification of a discrete linear model of the plant.
//!
//! Each input/output channel gets its own low-order ARX fit on deviation
//! data; the channels are then stacked into a block-diagonal state-space
//! realization `x+ = A x + B u`, `y = C x` sampled at the plant step.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{ManipulatedVars, MvBounds, Plant, PlantError, PlantState};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Controlled outputs, in model row order.
pub const OUTPUT_NAMES: [&str; 4] = ["n_product", "i_product", "dt_irc", "f_tank"];
pub const INPUT_NAMES: [&str; 4] = ["n_mac", "xi_tur", "xi_top", "f_drain"];

#[derive(Debug, Error)]
pub enum SysidError {
    #[error("manipulated-variable index {0} out of range 0..4")]
    MvIndexOutOfRange(usize),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("no step record for input {0}")]
    MissingInput(usize),
    #[error("regression for channel {input}->{output} is rank deficient")]
    RankDeficient { input: usize, output: usize },
    #[error("fitted pole {pole:.4} of channel {input}->{output} is not strictly inside the unit circle")]
    Unstable { input: usize, output: usize, pole: f64 },
    #[error("model dimensions inconsistent: {0}")]
    DimensionMismatch(String),
    #[error("plant fault during experiment: {0}")]
    Plant(#[from] PlantError),
    #[error("model file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model schema version {found} is not supported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("model validation failed: n_product NRMSE {0:.3} exceeds the gate")]
    ValidationFailed(f64),
}

/// Discrete-time linear model in deviation coordinates around
/// `(x_ss, u_ss, y_ss)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x_ss: DVector<f64>,
    pub u_ss: DVector<f64>,
    pub y_ss: DVector<f64>,
    /// Sample time, s.
    pub dt: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub amplitude: f64,
    pub order: usize,
}

impl LinearModel {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn check_dims(&self) -> Result<(), SysidError> {
        let (n, m, p) = (self.a.nrows(), self.b.ncols(), self.c.nrows());
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.x_ss.len() == n
            && self.u_ss.len() == m
            && self.y_ss.len() == p;
        if ok {
            Ok(())
        } else {
            Err(SysidError::DimensionMismatch(format!(
                "a {}x{}, b {}x{}, c {}x{}, x_ss {}, u_ss {}, y_ss {}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols(),
                self.c.nrows(),
                self.c.ncols(),
                self.x_ss.len(),
                self.u_ss.len(),
                self.y_ss.len()
            )))
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.a.nrows() == 0 {
            return 0.0;
        }
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Steady-state gain `C (I - A)^-1 B`.
    pub fn dc_gain(&self) -> Option<DMatrix<f64>> {
        let n = self.n_states();
        if n == 0 {
            return Some(DMatrix::zeros(self.n_outputs(), self.n_inputs()));
        }
        let lu = (DMatrix::identity(n, n) - &self.a).lu();
        lu.solve(&self.b).map(|x| &self.c * x)
    }

    /// Output deviations `y_0 .. y_len` for input deviations `u_0 .. u_len-1`,
    /// starting from `x = 0`.
    pub fn simulate(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut x = DVector::zeros(self.n_states());
        let mut ys = Vec::with_capacity(inputs.len() + 1);
        ys.push((&self.c * &x).iter().copied().collect());
        for u in inputs {
            let u = DVector::from_column_slice(u);
            x = &self.a * &x + &self.b * u;
            ys.push((&self.c * &x).iter().copied().collect());
        }
        ys
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument::from(self)).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SysidError> {
        let raw: serde_json::Value =
            serde_json::from_str(s).map_err(|e| SysidError::Corrupt(e.to_string()))?;
        let found = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SysidError::Corrupt("missing schema_version".into()))?;
        if found != MODEL_SCHEMA_VERSION as u64 {
            return Err(SysidError::SchemaMismatch {
                found: found as u32,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let doc: ModelDocument =
            serde_json::from_value(raw).map_err(|e| SysidError::Corrupt(e.to_string()))?;
        doc.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SysidError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SysidError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dims {
    states: usize,
    inputs: usize,
    outputs: usize,
}

/// On-disk form: row-major matrices, shortest round-trip float literals.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    dims: Dims,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    x_ss: Vec<f64>,
    u_ss: Vec<f64>,
    y_ss: Vec<f64>,
    dt: f64,
    provenance: Provenance,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(name: &str, r: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, SysidError> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(SysidError::DimensionMismatch(format!(
            "matrix {name} does not match declared {nrows}x{ncols}"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

impl From<&LinearModel> for ModelDocument {
    fn from(m: &LinearModel) -> Self {
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            dims: Dims {
                states: m.n_states(),
                inputs: m.n_inputs(),
                outputs: m.n_outputs(),
            },
            a: rows(&m.a),
            b: rows(&m.b),
            c: rows(&m.c),
            x_ss: m.x_ss.iter().copied().collect(),
            u_ss: m.u_ss.iter().copied().collect(),
            y_ss: m.y_ss.iter().copied().collect(),
            dt: m.dt,
            provenance: m.provenance.clone(),
        }
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<LinearModel, SysidError> {
        let Dims { states: n, inputs: m, outputs: p } = self.dims;
        let model = LinearModel {
            a: from_rows("a", &self.a, n, n)?,
            b: from_rows("b", &self.b, n, m)?,
            c: from_rows("c", &self.c, p, n)?,
            x_ss: DVector::from_vec(self.x_ss),
            u_ss: DVector::from_vec(self.u_ss),
            y_ss: DVector::from_vec(self.y_ss),
            dt: self.dt,
            provenance: self.provenance,
        };
        model.check_dims()?;
        Ok(model)
    }
}

/// Anything that maps a sampled input-deviation sequence to output deviations
/// `y_0 ..= y_len`, starting at its operating point.
pub trait SampledPlant {
    fn simulate(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SysidError>;
}

impl SampledPlant for LinearModel {
    fn simulate(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SysidError> {
        Ok(LinearModel::simulate(self, inputs))
    }
}

pub fn plant_outputs(s: &PlantState) -> [f64; 4] {
    [s.n_product, s.i_product, s.dt_irc, s.f_tank]
}

/// The surrogate plant run from its nominal steady state, sampled every `dt`.
/// Commanded MVs are clamped to the box.
#[derive(Debug, Clone)]
pub struct SurrogateResponse {
    pub plant: Plant,
    pub dt: f64,
    /// Std-dev of additive Gaussian measurement noise on each output.
    pub noise_std: [f64; 4],
    pub seed: u64,
}

impl SurrogateResponse {
    pub fn new(plant: Plant, dt: f64) -> Self {
        Self {
            plant,
            dt,
            noise_std: [0.0; 4],
            seed: 0,
        }
    }

    pub fn operating_point(&self) -> ([f64; 4], [f64; 4]) {
        (
            ManipulatedVars::NOMINAL.to_array(),
            plant_outputs(&self.plant.nominal_state()),
        )
    }
}

impl SampledPlant for SurrogateResponse {
    fn simulate(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SysidError> {
        let (u_ss, y_ss) = self.operating_point();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut measure = |s: &PlantState| -> Vec<f64> {
            let y = plant_outputs(s);
            (0..4)
                .map(|i| {
                    let noise = if self.noise_std[i] > 0.0 {
                        Normal::new(0.0, self.noise_std[i]).expect("finite std").sample(&mut rng)
                    } else {
                        0.0
                    };
                    y[i] - y_ss[i] + noise
                })
                .collect()
        };
        let mut state = self.plant.nominal_state();
        let mut ys = vec![measure(&state)];
        for u in inputs {
            if u.len() != 4 {
                return Err(SysidError::DimensionMismatch(format!("input of length {}", u.len())));
            }
            let mv = ManipulatedVars::from_array([u_ss[0] + u[0], u_ss[1] + u[1], u_ss[2] + u[2], u_ss[3] + u[3]]);
            let mv = MvBounds::TABLE.clamp(mv);
            state = self.plant.step(&state, &mv, self.plant.n_demand(), self.dt)?;
            ys.push(measure(&state));
        }
        Ok(ys)
    }
}

/// Input/output deviation trajectories of one step test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub mv_index: usize,
    pub amplitude: f64,
    pub dt: f64,
    pub seed: u64,
    /// `u[k]` is held over `[t_k, t_k+1)`.
    pub u: Vec<Vec<f64>>,
    /// `y[k]` is sampled at `t_k`; one more sample than `u`.
    pub y: Vec<Vec<f64>>,
    pub u_ss: Vec<f64>,
    pub y_ss: Vec<f64>,
}

impl ResponseRecord {
    pub fn times(&self) -> Vec<f64> {
        (0..self.y.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Step of `amplitude` times the MV range on input `mv_index`, held for
/// `duration` seconds, starting from the nominal steady state.
pub fn step_experiment(
    rig: &SurrogateResponse,
    mv_index: usize,
    amplitude: f64,
    duration: f64,
    seed: u64,
) -> Result<ResponseRecord, SysidError> {
    if mv_index >= 4 {
        return Err(SysidError::MvIndexOutOfRange(mv_index));
    }
    if !(amplitude > 0.0 && amplitude <= 0.5) {
        return Err(SysidError::InvalidExperiment(format!(
            "amplitude {amplitude} outside (0, 0.5]"
        )));
    }
    let samples = (duration / rig.dt).round() as usize;
    if samples < 2 {
        return Err(SysidError::InvalidExperiment(format!(
            "duration {duration} s gives fewer than two samples"
        )));
    }
    let mut step = vec![0.0; 4];
    step[mv_index] = amplitude * MvBounds::TABLE.range(mv_index);
    let u = vec![step; samples];
    let seeded = SurrogateResponse {
        seed,
        ..rig.clone()
    };
    let y = seeded.simulate(&u)?;
    let (u_ss, y_ss) = rig.operating_point();
    Ok(ResponseRecord {
        mv_index,
        amplitude,
        dt: rig.dt,
        seed,
        u,
        y,
        u_ss: u_ss.to_vec(),
        y_ss: y_ss.to_vec(),
    })
}

/// One identified single-input single-output channel:
/// `y[k+1] = sum a_i y[k-i] + sum b_i u[k-i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFit {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ChannelFit {
    pub fn order(&self) -> usize {
        self.a.len()
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().all(|&v| v == 0.0)
    }

    pub fn poles(&self) -> Vec<f64> {
        match self.a.as_slice() {
            [] => vec![],
            [a] => vec![a.abs()],
            [a1, a2] => {
                // roots of z^2 - a1 z - a2
                let disc = a1 * a1 + 4.0 * a2;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    vec![((a1 + s) / 2.0).abs(), ((a1 - s) / 2.0).abs()]
                } else {
                    let m = (-a2).sqrt();
                    vec![m, m]
                }
            }
            _ => unreachable!("orders above two are not fitted"),
        }
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 - self.a.iter().sum::<f64>())
    }
}

/// Magnitude below which a response channel is treated as identically zero.
const ZERO_CHANNEL_TOL: f64 = 1e-9;
/// Relative singular-value cutoff for the regression.
const RANK_TOL: f64 = 1e-9;

fn regress(
    records: &[&ResponseRecord],
    output: usize,
    order: usize,
) -> Option<ChannelFit> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for r in records {
        let j = r.mv_index;
        // deviations are zero before the experiment starts
        let y = |k: isize| if k < 0 { 0.0 } else { r.y[k as usize][output] };
        let u = |k: isize| if k < 0 { 0.0 } else { r.u[k as usize][j] };
        for k in 0..r.u.len() as isize {
            let mut row = Vec::with_capacity(2 * order);
            for i in 0..order as isize {
                row.push(y(k - i));
            }
            for i in 0..order as isize {
                row.push(u(k - i));
            }
            rows.push(row);
            rhs.push(y(k + 1));
        }
    }
    let cols = 2 * order;
    let phi = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    let target = DVector::from_vec(rhs);
    let svd = phi.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if rows.len() < cols || smax == 0.0 || smin <= RANK_TOL * smax {
        return None;
    }
    let theta = svd.solve(&target, 0.0).ok()?;
    Some(ChannelFit {
        a: theta.rows(0, order).iter().copied().collect(),
        b: theta.rows(order, order).iter().copied().collect(),
    })
}

/// Least-squares fit of one channel. Order 2 falls back to order 1 when the
/// second-order regression is rank deficient (a first-order response).
pub fn fit_channel(
    records: &[&ResponseRecord],
    input: usize,
    output: usize,
    order: usize,
) -> Result<ChannelFit, SysidError> {
    let peak = records
        .iter()
        .flat_map(|r| r.y.iter().map(|y| y[output].abs()))
        .fold(0.0, f64::max);
    if peak < ZERO_CHANNEL_TOL {
        return Ok(ChannelFit {
            a: vec![0.0],
            b: vec![0.0],
        });
    }
    let fit = (1..=order)
        .rev()
        .find_map(|o| regress(records, output, o))
        .ok_or(SysidError::RankDeficient { input, output })?;
    if let Some(&pole) = fit.poles().iter().find(|p| **p >= 1.0) {
        return Err(SysidError::Unstable { input, output, pole });
    }
    Ok(fit)
}

/// Fit every channel and assemble the block-diagonal realization.
pub fn fit_linear_model(records: &[ResponseRecord], order_per_channel: usize) -> Result<LinearModel, SysidError> {
    if !(1..=2).contains(&order_per_channel) {
        return Err(SysidError::InvalidExperiment(format!(
            "order_per_channel must be 1 or 2, got {order_per_channel}"
        )));
    }
    let first = records.first().ok_or(SysidError::MissingInput(0))?;
    let m = first.u_ss.len();
    let p = first.y_ss.len();
    let dt = first.dt;
    let mut channels = Vec::new();
    for j in 0..m {
        let recs: Vec<&ResponseRecord> = records.iter().filter(|r| r.mv_index == j).collect();
        if recs.is_empty() {
            return Err(SysidError::MissingInput(j));
        }
        for i in 0..p {
            channels.push((i, j, fit_channel(&recs, j, i, order_per_channel)?));
        }
    }
    let n: usize = channels.iter().filter(|c| !c.2.is_zero()).map(|c| c.2.order()).sum();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(p, n);
    let mut at = 0;
    for (i, j, fit) in channels.iter().filter(|c| !c.2.is_zero()) {
        // observable canonical form; the first block state is the channel output
        match fit.order() {
            1 => {
                a[(at, at)] = fit.a[0];
                b[(at, *j)] = fit.b[0];
            }
            2 => {
                a[(at, at)] = fit.a[0];
                a[(at, at + 1)] = 1.0;
                a[(at + 1, at)] = fit.a[1];
                b[(at, *j)] = fit.b[0];
                b[(at + 1, *j)] = fit.b[1];
            }
            _ => unreachable!(),
        }
        c[(*i, at)] = 1.0;
        at += fit.order();
    }
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.dedup();
    Ok(LinearModel {
        a,
        b,
        c,
        x_ss: DVector::zeros(n),
        u_ss: DVector::from_column_slice(&first.u_ss),
        y_ss: DVector::from_column_slice(&first.y_ss),
        dt,
        provenance: Provenance {
            seeds,
            amplitude: first.amplitude,
            order: order_per_channel,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Per-output RMSE normalized by the plant output's range.
    pub nrmse: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// NRMSE threshold on the production channel.
pub const NRMSE_GATE: f64 = 0.35;

/// Drive both the model and the plant with `probe` from their operating
/// points and compare outputs. A zero-range output with zero error has NRMSE 0.
pub fn validate_model(
    model: &LinearModel,
    plant: &dyn SampledPlant,
    probe: &[Vec<f64>],
) -> Result<FitReport, SysidError> {
    let y_model = model.simulate(probe);
    let y_plant = plant.simulate(probe)?;
    let p = model.n_outputs();
    let nrmse = (0..p)
        .map(|i| {
            let (lo, hi) = y_plant
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y[i]), hi.max(y[i])));
            let mse = y_model
                .iter()
                .zip(&y_plant)
                .map(|(a, b)| (a[i] - b[i]).powi(2))
                .sum::<f64>()
                / y_plant.len() as f64;
            let rmse = mse.sqrt();
            let range = hi - lo;
            if rmse == 0.0 {
                0.0
            } else if range > 0.0 {
                rmse / range
            } else {
                f64::INFINITY
            }
        })
        .collect::<Vec<_>>();
    let pass = nrmse.first().map_or(true, |&e| e <= NRMSE_GATE);
    Ok(FitReport {
        nrmse,
        threshold: NRMSE_GATE,
        pass,
    })
}

/// Deterministic multistep probe: each MV switches between `+-amplitude`
/// of its range on its own period, so all inputs move at once.
pub fn multistep_probe(amplitude: f64, samples: usize) -> Vec<Vec<f64>> {
    const PERIODS: [usize; 4] = [8, 5, 11, 7];
    (0..samples)
        .map(|k| {
            (0..4)
                .map(|j| {
                    let sign = if (k / PERIODS[j] + j) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * amplitude * MvBounds::TABLE.range(j)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysidConfig {
    /// Step size as a fraction of each MV range.
    pub amplitude: f64,
    /// Step-test length, s.
    pub duration: f64,
    pub order: usize,
    pub noise_std: [f64; 4],
    /// Validation probe amplitude (fraction of range) and length (samples).
    pub probe_amplitude: f64,
    pub probe_samples: usize,
}

impl Default for SysidConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.1,
            duration: 6.0 * 3600.0,
            order: 2,
            noise_std: [0.0; 4],
            probe_amplitude: 0.1,
            probe_samples: 96,
        }
    }
}

/// Experiments, fit and validation in one call.
pub fn identify(
    plant: &Plant,
    dt: f64,
    cfg: &SysidConfig,
    seed: u64,
) -> Result<(LinearModel, Vec<ResponseRecord>, FitReport), SysidError> {
    let rig = SurrogateResponse {
        noise_std: cfg.noise_std,
        ..SurrogateResponse::new(plant.clone(), dt)
    };
    let records = (0..4)
        .map(|j| step_experiment(&rig, j, cfg.amplitude, cfg.duration, seed.wrapping_add(j as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let model = fit_linear_model(&records, cfg.order)?;
    let probe = multistep_probe(cfg.probe_amplitude, cfg.probe_samples);
    let clean = SurrogateResponse::new(plant.clone(), dt);
    let report = validate_model(&model, &clean, &probe)?;
    Ok((model, records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Step records from a known first-order channel on input 0.
    fn first_order_records(pole: f64, gain: f64, samples: usize) -> Vec<ResponseRecord> {
        let b = gain * (1.0 - pole);
        let mut y = vec![vec![0.0]];
        let mut x = 0.0;
        for _ in 0..samples {
            x = pole * x + b * 1.0;
            y.push(vec![x]);
        }
        vec![ResponseRecord {
            mv_index: 0,
            amplitude: 0.1,
            dt: 900.0,
            seed: 0,
            u: vec![vec![1.0]; samples],
            y,
            u_ss: vec![0.0],
            y_ss: vec![0.0],
        }]
    }

    #[test]
    fn recovers_known_first_order_channel() {
        for order in [1, 2] {
            let m = fit_linear_model(&first_order_records(0.8, 2.0, 30), order).unwrap();
            assert!((m.spectral_radius() - 0.8).abs() < 0.01);
            let g = m.dc_gain().unwrap()[(0, 0)];
            assert!((g - 2.0).abs() < 0.02, "gain {g}");
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let recs = first_order_records(0.6, -1.5, 20);
        let mut doubled = recs.clone();
        doubled.extend(recs.clone());
        let a = fit_linear_model(&recs, 2).unwrap();
        let b = fit_linear_model(&recs, 2).unwrap();
        assert_eq!(a, b);
        let c = fit_linear_model(&doubled, 2).unwrap();
        assert_relative_eq!(c.a, a.a, epsilon = 1e-9);
        assert_relative_eq!(c.b, a.b, epsilon = 1e-9);
    }

    #[test]
    fn zero_channel_gets_zero_gain() {
        let mut recs = first_order_records(0.5, 1.0, 10);
        for y in recs[0].y.iter_mut() {
            y[0] = 0.0;
        }
        let m = fit_linear_model(&recs, 2).unwrap();
        assert_eq!(m.n_states(), 0);
        assert_eq!(m.dc_gain().unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn unstable_and_rank_deficient_channels_are_errors() {
        let mut recs = first_order_records(0.5, 1.0, 10);
        for (k, y) in recs[0].y.iter_mut().enumerate() {
            y[0] = 1.1f64.powi(k as i32) - 1.0;
        }
        assert!(matches!(fit_linear_model(&recs, 1), Err(SysidError::Unstable { .. })));

        let mut recs = first_order_records(0.5, 1.0, 10);
        for u in recs[0].u.iter_mut() {
            u[0] = 0.0;
        }
        assert!(matches!(fit_linear_model(&recs, 1), Err(SysidError::RankDeficient { .. })));
    }

    #[test]
    fn experiment_validation() {
        let rig = SurrogateResponse::new(Plant::default(), 900.0);
        assert!(matches!(step_experiment(&rig, 4, 0.1, 3600.0, 0), Err(SysidError::MvIndexOutOfRange(4))));
        assert!(matches!(step_experiment(&rig, 0, 0.0, 3600.0, 0), Err(SysidError::InvalidExperiment(_))));
        assert!(matches!(step_experiment(&rig, 0, 0.6, 3600.0, 0), Err(SysidError::InvalidExperiment(_))));
    }

    #[test]
    fn tiny_step_gives_tiny_response() {
        let rig = SurrogateResponse::new(Plant::default(), 900.0);
        let r = step_experiment(&rig, 0, 1e-9, 6.0 * 3600.0, 0).unwrap();
        for y in &r.y {
            assert!(y.iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn step_signs_follow_the_surrogate() {
        let rig = SurrogateResponse::new(Plant::default(), 900.0);
        let r = step_experiment(&rig, 0, 0.1, 6.0 * 3600.0, 0).unwrap();
        let prod: Vec<f64> = r.y.iter().map(|y| y[0]).collect();
        assert!(prod.windows(2).all(|w| w[1] >= w[0]));
        assert!(*prod.last().unwrap() > 0.0);

        let r = step_experiment(&rig, 3, 0.1, 6.0 * 3600.0, 0).unwrap();
        assert!(r.y.last().unwrap()[2] > 0.0);
    }

    #[test]
    fn zero_probe_scores_zero() {
        let model = fit_linear_model(&first_order_records(0.8, 2.0, 30), 1).unwrap();
        let probe = vec![vec![0.0]; 10];
        let report = validate_model(&model, &model, &probe).unwrap();
        assert_eq!(report.nrmse, vec![0.0]);
        assert!(report.pass);
    }

    #[test]
    fn model_against_itself_is_exact() {
        let model = fit_linear_model(&first_order_records(0.8, 2.0, 30), 2).unwrap();
        let probe: Vec<Vec<f64>> = (0..40).map(|k| vec![if (k / 5) % 2 == 0 { 1.0 } else { -0.5 }]).collect();
        let report = validate_model(&model, &model, &probe).unwrap();
        assert!(report.nrmse[0] < 1e-9);
    }

    #[test]
    fn json_roundtrip_and_version_check() {
        let (model, _, _) = identify(&Plant::default(), 900.0, &SysidConfig::default(), 3).unwrap();
        let back = LinearModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        let edited = model.to_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(LinearModel::from_json(&edited), Err(SysidError::SchemaMismatch { found: 2, .. })));
        assert!(matches!(LinearModel::from_json("{ not json"), Err(SysidError::Corrupt(_))));
    }
}
