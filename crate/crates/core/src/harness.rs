//! Training and evaluation orchestration, metrics and run artifacts.
//!
//! Seed split: every root seed owns one ChaCha8 key; each consumer draws
//! from its own stream of that key (`ChaCha8Rng::set_stream`):
//!
//! | stream | consumer                                   |
//! |--------|--------------------------------------------|
//! | 1      | network initialization                     |
//! | 2      | exploration noise and warmup actions       |
//! | 3      | replay-buffer sampling                     |
//! | 4      | training price profiles                    |
//! | 5      | plant reset seeds                          |
//!
//! Per-seed output layout under `<out_dir>/<arch>/seed_<seed>/`:
//! `learning_curve.csv`, `eval_curve.csv`, `checkpoint_best.json`,
//! `summary.json` and `best_trajectory.csv`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{save_trajectory, Arch, Env, EnvError, EpisodeConfig, StepOutcome, TrajectoryRow};
use crate::ddpg::{explore, Checkpoint, DdpgAgent, DdpgError, DdpgHyper, ReplayBuffer, Transition};
use crate::lmpc::MpcConfig;
use crate::plant::{Plant, PlantParams, N_TANK_MID, OBS_DIM, PATH_CONSTRAINT_NAMES};
use crate::pricing::{load_profile, synth_profile, synth_profile_with_noise, PriceProfile, PricingError};
use crate::sysid::{LinearModel, SysidConfig, SysidError};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "ASUFLEX_OUT";

const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_BUFFER: u64 = 3;
const STREAM_PRICE: u64 = 4;
const STREAM_PLANT: u64 = 5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model file {0} not found; run `asuflex sysid --config <file>` first")]
    MissingModel(PathBuf),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ddpg(#[from] DdpgError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::MissingModel(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    /// Held-out evaluation price CSV; the noise-free synthetic day if absent.
    pub profile: Option<PathBuf>,
    pub model: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            profile: None,
            model: PathBuf::from("model.json"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Synthetic prices used for training episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceSettings {
    pub base: f64,
    pub peak_amp: f64,
    /// Noise half-width of training profiles, fraction of `base`.
    pub noise_frac: f64,
}

impl Default for PriceSettings {
    fn default() -> Self {
        Self { base: 50.0, peak_amp: 40.0, noise_frac: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub arch: Arch,
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub paths: RunPaths,
    pub prices: PriceSettings,
    pub episode: EpisodeConfig,
    pub plant: PlantParams,
    pub ddpg: DdpgHyper,
    pub mpc: MpcConfig,
    pub sysid: SysidConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            arch: Arch::Hierarchical,
            seeds: vec![1, 2, 3, 4, 5],
            total_steps: 10_000,
            eval_every: 480,
            eval_episodes: 1,
            paths: RunPaths::default(),
            prices: PriceSettings::default(),
            episode: EpisodeConfig::default(),
            plant: PlantParams::default(),
            ddpg: DdpgHyper::default(),
            mpc: MpcConfig::default(),
            sysid: SysidConfig::default(),
        }
    }
}

pub const CONFIG_HELP: &str = "\
Run config (JSON). Every field is optional and falls back to its default;
print the defaults with `asuflex config`.

  version        schema version, must be 1
  arch           \"direct\" | \"hierarchical\" (alias \"hier\")
  seeds          list of root seeds, at least one
  total_steps    environment steps per seed (>= 1)
  eval_every     steps between held-out evaluations (>= 1)
  eval_episodes  episodes per evaluation (>= 1)
  paths          { profile: CSV or null, model: JSON path, out_dir: dir }
  prices         { base, peak_amp, noise_frac } for training days
  episode        { steps_per_episode, dt, demand, setpoint_range, initial,
                   penalty: { lambda_path, lambda_terminal, t_activate_h,
                   fault_penalty }, constraints, obs_norm }
  plant          surrogate calibration constants
  ddpg           { hidden, gamma, tau, lr_actor, lr_critic, batch,
                   buffer_capacity, warmup, noise_sigma, noise_sigma_final,
                   reward_scale, final_layer_init, preact_l2 }
  mpc            { horizon, q, r, bias_gain, input_reg, output_scale,
                   input_scale, qp_tol, qp_max_iter }
  sysid          { amplitude, duration, order, noise_std, probe_amplitude,
                   probe_samples }

The ASUFLEX_OUT environment variable overrides paths.out_dir.";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        if let Some(v) = value.get("version") {
            if v.as_u64() != Some(u64::from(CONFIG_VERSION)) {
                return Err(HarnessError::Config(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )));
            }
        }
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version must be {CONFIG_VERSION}"));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("total_steps, eval_every and eval_episodes must be at least 1".into());
        }
        let p = &self.prices;
        if !(p.base > 0.0 && p.peak_amp >= 0.0 && p.noise_frac >= 0.0) {
            return bad("prices need base > 0, peak_amp >= 0, noise_frac >= 0".into());
        }
        self.episode.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.ddpg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Output root, honouring `ASUFLEX_OUT`.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.paths.out_dir.clone(),
        }
    }

    pub fn seed_dir(&self, arch: Arch, seed: u64) -> PathBuf {
        self.out_dir().join(arch.name()).join(format!("seed_{seed}"))
    }

    pub fn plant(&self) -> Plant {
        Plant::new(self.plant.clone())
    }

    /// The held-out evaluation day.
    pub fn eval_profile(&self) -> Result<PriceProfile, HarnessError> {
        match &self.paths.profile {
            Some(p) => Ok(load_profile(p)?),
            None => Ok(synth_profile(0, self.prices.base, self.prices.peak_amp)),
        }
    }

    /// Identified model for the hierarchical architecture.
    pub fn load_model(&self) -> Result<LinearModel, HarnessError> {
        if !self.paths.model.exists() {
            return Err(HarnessError::MissingModel(self.paths.model.clone()));
        }
        Ok(LinearModel::load(&self.paths.model)?)
    }

    pub fn build_env(&self, arch: Arch, prices: PriceProfile, model: Option<&LinearModel>) -> Result<Env, HarnessError> {
        let env = match arch {
            Arch::Direct => Env::direct(self.episode.clone(), self.plant(), prices)?,
            Arch::Hierarchical => {
                let model = model.ok_or_else(|| HarnessError::MissingModel(self.paths.model.clone()))?;
                Env::hierarchical(self.episode.clone(), self.plant(), prices, model.clone(), self.mpc.clone())?
            }
        };
        Ok(env)
    }
}

/// Independent generator `stream` of the root `seed`.
pub fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-episode bookkeeping shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub steps: usize,
    pub episode_return: f64,
    /// Electricity bill, $ (the negated electricity reward).
    pub elec_cost: f64,
    /// Steps with a violated path constraint, per constraint.
    pub n_path_violations: Vec<usize>,
    /// Sum of positive normalized path-constraint values.
    pub violation_magnitude: f64,
    /// `|N_tank(T) - N_mid| / N_mid` at the last step.
    pub terminal_deviation: f64,
    pub qp_iters_mean: Option<f64>,
    pub fault: bool,
}

impl Default for EpisodeMetrics {
    fn default() -> Self {
        Self {
            steps: 0,
            episode_return: 0.0,
            elec_cost: 0.0,
            n_path_violations: vec![0; PATH_CONSTRAINT_NAMES.len()],
            violation_magnitude: 0.0,
            terminal_deviation: 0.0,
            qp_iters_mean: None,
            fault: false,
        }
    }
}

impl EpisodeMetrics {
    pub fn record(&mut self, out: &StepOutcome) {
        let i = &out.info;
        self.steps += 1;
        self.episode_return += out.reward;
        self.elec_cost -= i.reward_parts.elec;
        for (k, g) in i.constraint_values.iter().enumerate() {
            if *g > 0.0 {
                if k < self.n_path_violations.len() {
                    self.n_path_violations[k] += 1;
                }
                self.violation_magnitude += g;
            }
        }
        self.terminal_deviation = (i.state.n_tank - N_TANK_MID).abs() / N_TANK_MID;
        if let Some(qp) = &i.qp {
            let prev = self.qp_iters_mean.unwrap_or(0.0) * (self.steps - 1) as f64;
            self.qp_iters_mean = Some((prev + qp.iterations as f64) / self.steps as f64);
        }
        self.fault |= i.fault;
    }

    pub fn total_violations(&self) -> usize {
        self.n_path_violations.iter().sum()
    }
}

/// One learning-curve row per training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRow {
    pub step: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub cost: f64,
    pub violations: usize,
    pub terminal_dev: f64,
}

/// One row per held-out evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub eval_return: f64,
    pub cost: f64,
    pub violations: usize,
    pub violation_magnitude: f64,
    pub terminal_dev: f64,
    pub price_power_corr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: Arch,
    pub episodes: Vec<EpisodeMetrics>,
    pub price_power_corr: Vec<Option<f64>>,
    pub mean_return: f64,
    pub mean_cost: f64,
}

impl EvalReport {
    pub fn first(&self) -> &EpisodeMetrics {
        &self.episodes[0]
    }
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (dx, dy) = (xs[k] - mx, ys[k] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Hourly price and hourly mean net power of a trajectory.
pub fn hourly_price_power(rows: &[TrajectoryRow]) -> (Vec<f64>, Vec<f64>) {
    let mut prices = Vec::new();
    let mut power = Vec::new();
    let mut count = Vec::new();
    for r in rows {
        let h = r.t_h.floor() as usize;
        if h >= prices.len() {
            prices.resize(h + 1, f64::NAN);
            power.resize(h + 1, 0.0);
            count.resize(h + 1, 0usize);
        }
        prices[h] = r.price;
        power[h] += r.p_net();
        count[h] += 1;
    }
    let keep: Vec<usize> = (0..count.len()).filter(|&h| count[h] > 0).collect();
    (
        keep.iter().map(|&h| prices[h]).collect(),
        keep.iter().map(|&h| power[h] / count[h] as f64).collect(),
    )
}

pub fn price_power_correlation(rows: &[TrajectoryRow]) -> Option<f64> {
    let (p, w) = hourly_price_power(rows);
    pearson(&p, &w)
}

/// Deterministic rollout of the actor (no exploration).
pub fn rollout(agent: &DdpgAgent, env: &mut Env, reset_seed: u64) -> Result<(EpisodeMetrics, Vec<TrajectoryRow>), HarnessError> {
    let mut obs = env.reset(reset_seed)?;
    let mut metrics = EpisodeMetrics::default();
    let mut rows = Vec::with_capacity(env.config().steps_per_episode);
    loop {
        let action = agent.act(obs.as_slice())?;
        let out = env.step(&action)?;
        metrics.record(&out);
        rows.push(TrajectoryRow::from_outcome(&out));
        obs = out.obs;
        if out.done {
            return Ok((metrics, rows));
        }
    }
}

/// `n_episodes` frozen-policy rollouts on the env's price profile; episode
/// `k` resets the plant with seed `k`.
pub fn evaluate_agent(
    agent: &DdpgAgent,
    env: &mut Env,
    n_episodes: usize,
) -> Result<(EvalReport, Vec<Vec<TrajectoryRow>>), HarnessError> {
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut corr = Vec::with_capacity(n_episodes);
    let mut trajectories = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes.max(1) {
        let (m, rows) = rollout(agent, env, k as u64)?;
        corr.push(price_power_correlation(&rows));
        episodes.push(m);
        trajectories.push(rows);
    }
    let n = episodes.len() as f64;
    let report = EvalReport {
        arch: env.arch(),
        mean_return: episodes.iter().map(|m| m.episode_return).sum::<f64>() / n,
        mean_cost: episodes.iter().map(|m| m.elec_cost).sum::<f64>() / n,
        price_power_corr: corr,
        episodes,
    };
    Ok((report, trajectories))
}

/// Evaluate a saved checkpoint on the held-out day. Trajectory CSVs go to
/// `out` when given.
pub fn evaluate(
    checkpoint: &Path,
    cfg: &RunConfig,
    n_episodes: usize,
    out: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let arch = arch_for_action_dim(ck.agent.act_dim)?;
    let model = match arch {
        Arch::Hierarchical => Some(cfg.load_model()?),
        Arch::Direct => None,
    };
    let mut env = cfg.build_env(arch, cfg.eval_profile()?, model.as_ref())?;
    let (report, trajectories) = evaluate_agent(&ck.agent, &mut env, n_episodes)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (k, rows) in trajectories.iter().enumerate() {
            save_trajectory(rows, dir.join(format!("trajectory_ep{k}.csv")))?;
        }
        std::fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn arch_for_action_dim(dim: usize) -> Result<Arch, HarnessError> {
    match dim {
        4 => Ok(Arch::Direct),
        1 => Ok(Arch::Hierarchical),
        d => Err(HarnessError::Config(format!("checkpoint action dimension {d} matches no architecture"))),
    }
}

/// First evaluation step whose return is within `(1 - frac)·|best|` of the
/// best evaluation return of the same run.
pub fn steps_to_fraction(curve: &[EvalPoint], frac: f64) -> Option<usize> {
    let best = curve.iter().map(|p| p.eval_return).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let threshold = best - (1.0 - frac) * best.abs();
    curve.iter().find(|p| p.eval_return >= threshold).map(|p| p.step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: Arch,
    pub seed: u64,
    pub total_steps: usize,
    pub episodes: usize,
    pub best_step: usize,
    pub best_eval_return: f64,
    /// Steps to reach 95% of the best evaluation return.
    pub steps_to_95: Option<usize>,
    pub best_report: EvalReport,
    pub eval_curve: Vec<EvalPoint>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, HarnessError> {
    Ok(csv::Writer::from_writer(File::create(path)?))
}

/// Train one seed of one architecture and write its artifacts to `dir`.
pub fn train_seed(
    cfg: &RunConfig,
    arch: Arch,
    seed: u64,
    model: Option<&LinearModel>,
    dir: &Path,
) -> Result<TrainSummary, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let result = train_seed_inner(cfg, arch, seed, model, dir);
    if let Err(e) = &result {
        let mut f = File::create(dir.join("abort.txt"))?;
        writeln!(f, "{e}")?;
    }
    result
}

fn train_seed_inner(
    cfg: &RunConfig,
    arch: Arch,
    seed: u64,
    model: Option<&LinearModel>,
    dir: &Path,
) -> Result<TrainSummary, HarnessError> {
    let hyper = &cfg.ddpg;
    let mut init_rng = seed_stream(seed, STREAM_INIT);
    let mut noise_rng = seed_stream(seed, STREAM_NOISE);
    let mut buffer_rng = seed_stream(seed, STREAM_BUFFER);
    let mut price_rng = seed_stream(seed, STREAM_PRICE);
    let mut plant_rng = seed_stream(seed, STREAM_PLANT);

    let mut agent = DdpgAgent::new(OBS_DIM, arch.action_dim(), hyper.clone(), init_rng.next_u64())?;
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity, buffer_rng.next_u64())?;
    let p = &cfg.prices;
    let train_profile = |rng: &mut ChaCha8Rng| synth_profile_with_noise(rng.next_u64(), p.base, p.peak_amp, p.noise_frac);
    let mut env = cfg.build_env(arch, train_profile(&mut price_rng), model)?;
    let mut eval_env = cfg.build_env(arch, cfg.eval_profile()?, model)?;

    let mut curve = csv_writer(&dir.join("learning_curve.csv"))?;
    let mut eval_csv = csv_writer(&dir.join("eval_curve.csv"))?;
    let ck_path = dir.join("checkpoint_best.json");

    let mut eval_curve: Vec<EvalPoint> = Vec::new();
    let mut best: Option<(usize, EvalReport, Vec<TrajectoryRow>)> = None;
    let mut step = 0usize;
    let mut episode = 0usize;
    while step < cfg.total_steps {
        if episode > 0 {
            env.set_prices(train_profile(&mut price_rng))?;
        }
        let mut obs = env.reset(plant_rng.next_u64())?;
        let mut metrics = EpisodeMetrics::default();
        loop {
            let action = if step < hyper.warmup {
                (0..arch.action_dim()).map(|_| noise_rng.gen_range(-1.0..=1.0)).collect()
            } else {
                let a = agent.act(obs.as_slice())?;
                explore(&a, &mut noise_rng, hyper.sigma_at(step, cfg.total_steps))
            };
            let out = env.step(&action)?;
            metrics.record(&out);
            buffer.push(Transition {
                obs: obs.as_slice().to_vec(),
                action,
                reward: out.reward,
                next_obs: out.obs.as_slice().to_vec(),
                done: out.done,
            });
            obs = out.obs;
            step += 1;
            if step >= hyper.warmup && buffer.len() >= hyper.batch.min(buffer.capacity()) {
                let batch = buffer.sample(hyper.batch)?;
                agent.update(&batch)?;
            }
            if step % cfg.eval_every == 0 || step == cfg.total_steps {
                let (report, mut trajs) = evaluate_agent(&agent, &mut eval_env, cfg.eval_episodes)?;
                let m = report.first();
                let point = EvalPoint {
                    step,
                    eval_return: report.mean_return,
                    cost: report.mean_cost,
                    violations: m.total_violations(),
                    violation_magnitude: m.violation_magnitude,
                    terminal_dev: m.terminal_deviation,
                    price_power_corr: report.price_power_corr[0],
                };
                eval_csv.serialize(&point)?;
                eval_csv.flush()?;
                let improved = best.as_ref().map_or(true, |(_, b, _)| report.mean_return > b.mean_return);
                if improved {
                    Checkpoint::new(agent.clone(), step as u64, noise_rng.clone()).save(&ck_path)?;
                    best = Some((step, report, trajs.swap_remove(0)));
                }
                eval_curve.push(point);
            }
            if out.done || step >= cfg.total_steps {
                break;
            }
        }
        episode += 1;
        curve.serialize(LearningRow {
            step,
            episode,
            episode_return: metrics.episode_return,
            cost: metrics.elec_cost,
            violations: metrics.total_violations(),
            terminal_dev: metrics.terminal_deviation,
        })?;
        curve.flush()?;
    }

    let (best_step, best_report, best_traj) = best.expect("at least one evaluation at the final step");
    save_trajectory(&best_traj, dir.join("best_trajectory.csv"))?;
    let summary = TrainSummary {
        arch,
        seed,
        total_steps: cfg.total_steps,
        episodes: episode,
        best_step,
        best_eval_return: best_report.mean_return,
        steps_to_95: steps_to_fraction(&eval_curve, 0.95),
        best_report,
        eval_curve,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Train every configured seed of `cfg.arch`, one after another.
pub fn train(cfg: &RunConfig) -> Result<Vec<TrainSummary>, HarnessError> {
    let model = match cfg.arch {
        Arch::Hierarchical => Some(cfg.load_model()?),
        Arch::Direct => None,
    };
    cfg.seeds
        .iter()
        .map(|&seed| train_seed(cfg, cfg.arch, seed, model.as_ref(), &cfg.seed_dir(cfg.arch, seed)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MergedRow {
    arch: String,
    seed: u64,
    step: usize,
    episode: usize,
    #[serde(rename = "return")]
    episode_return: f64,
    cost: f64,
    violations: usize,
    terminal_dev: f64,
}

/// Merge every `<arch>/seed_<n>/learning_curve.csv` below `root` into one
/// CSV with `arch` and `seed` columns. Returns the number of runs merged.
pub fn export_curves(root: &Path, out: &Path) -> Result<usize, HarnessError> {
    let mut runs = Vec::new();
    for arch_entry in std::fs::read_dir(root)? {
        let arch_dir = arch_entry?.path();
        if !arch_dir.is_dir() {
            continue;
        }
        for seed_entry in std::fs::read_dir(&arch_dir)? {
            let seed_dir = seed_entry?.path();
            let name = seed_dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) else {
                continue;
            };
            let curve = seed_dir.join("learning_curve.csv");
            if curve.is_file() {
                let arch = arch_dir.file_name().unwrap().to_string_lossy().into_owned();
                runs.push((arch, seed, curve));
            }
        }
    }
    runs.sort();
    let mut w = csv_writer(out)?;
    for (arch, seed, path) in &runs {
        let mut rdr = csv::Reader::from_path(path)?;
        for row in rdr.deserialize::<LearningRow>() {
            let r = row?;
            w.serialize(MergedRow {
                arch: arch.clone(),
                seed: *seed,
                step: r.step,
                episode: r.episode,
                episode_return: r.episode_return,
                cost: r.cost,
                violations: r.violations,
                terminal_dev: r.terminal_dev,
            })?;
        }
    }
    w.flush()?;
    Ok(runs.len())
}
