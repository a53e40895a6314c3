//! Deterministic policy gradient agent with hand-written backprop.
//!
//! Batches are stored column-wise: an `(features × batch)` matrix holds one
//! sample per column. Every network is a chain of affine layers with tanh
//! hidden activations; the actor squashes its output with tanh, the critic
//! output is linear.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DdpgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("non-finite loss at update {update}: {dump}")]
    NonFiniteLoss { update: u64, dump: String },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("checkpoint schema version {found}, expected {expected}")]
    SchemaMismatch { found: u64, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` is `(sizes[l + 1] × sizes[l])`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub output: OutputActivation,
}

/// On-disk form: row-major weights.
#[derive(Serialize, Deserialize)]
struct MlpFile {
    layer_sizes: Vec<usize>,
    output: OutputActivation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpFile {
    fn from(m: Mlp) -> Self {
        let weights = m
            .weights
            .iter()
            .map(|w| w.transpose().as_slice().to_vec())
            .collect();
        let biases = m.biases.iter().map(|b| b.as_slice().to_vec()).collect();
        Self { layer_sizes: m.sizes, output: m.output, weights, biases }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = String;

    fn try_from(f: MlpFile) -> Result<Self, String> {
        let layers = f.layer_sizes.len().saturating_sub(1);
        if layers == 0 || f.weights.len() != layers || f.biases.len() != layers {
            return Err(format!("layer count mismatch for sizes {:?}", f.layer_sizes));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (i, o) = (f.layer_sizes[l], f.layer_sizes[l + 1]);
            if f.weights[l].len() != i * o || f.biases[l].len() != o {
                return Err(format!("layer {l} has wrong parameter count"));
            }
            if f.weights[l].iter().chain(&f.biases[l]).any(|v| !v.is_finite()) {
                return Err(format!("layer {l} has non-finite parameters"));
            }
            weights.push(DMatrix::from_row_slice(o, i, &f.weights[l]));
            biases.push(DVector::from_column_slice(&f.biases[l]));
        }
        Ok(Self { sizes: f.layer_sizes, weights, biases, output: f.output })
    }
}

/// Activations of every layer for one batch, input first.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("at least the input")
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`Mlp::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

impl Mlp {
    /// Uniform fan-in initialization; the last layer is drawn from
    /// `±final_scale` so initial outputs start near zero.
    pub fn new(
        sizes: &[usize],
        output: OutputActivation,
        final_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DdpgError> {
        let mut net = Self::zeros(sizes, output)?;
        let layers = net.weights.len();
        for l in 0..layers {
            let bound = if l + 1 == layers {
                final_scale
            } else {
                1.0 / (sizes[l] as f64).sqrt()
            };
            for v in net.weights[l].iter_mut().chain(net.biases[l].iter_mut()) {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self, DdpgError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DdpgError::DimensionMismatch(format!(
                "layer sizes {sizes:?} need at least two positive widths"
            )));
        }
        let weights = sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = sizes[1..].iter().map(|&o| DVector::zeros(o)).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases, output })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat parameter vector: per layer, the weights in storage order then the biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), DdpgError> {
        if flat.len() != self.num_params() {
            return Err(DdpgError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardCache, DdpgError> {
        if x.nrows() != self.input_dim() {
            return Err(DdpgError::DimensionMismatch(format!(
                "network input {} but batch has {} rows",
                self.input_dim(),
                x.nrows()
            )));
        }
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.clone());
        for l in 0..layers {
            let mut z = &self.weights[l] * &activations[l];
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let last = l + 1 == layers;
            if !last || self.output == OutputActivation::Tanh {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DdpgError> {
        let cache = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(cache.output().as_slice().to_vec())
    }

    /// Backpropagate `d_out` (gradient w.r.t. the network output, same
    /// shape) through a cached forward pass. Returns parameter gradients
    /// and the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        let mut delta = d_out.clone();
        if self.output == OutputActivation::Tanh {
            delta.zip_apply(cache.output(), |d, y| *d *= 1.0 - y * y);
        }
        self.backward_pre(cache, delta)
    }

    /// Output-layer pre-activation of a cached forward pass.
    pub fn output_pre(&self, cache: &ForwardCache) -> DMatrix<f64> {
        let layers = self.weights.len();
        let mut z = &self.weights[layers - 1] * &cache.activations[layers - 1];
        for mut col in z.column_iter_mut() {
            col += &self.biases[layers - 1];
        }
        z
    }

    /// Like [`Mlp::backward`] with the gradient given w.r.t. the output
    /// pre-activation.
    pub fn backward_pre(&self, cache: &ForwardCache, d_pre: DMatrix<f64>) -> (Gradients, DMatrix<f64>) {
        let layers = self.weights.len();
        let mut weights = vec![DMatrix::zeros(0, 0); layers];
        let mut biases = vec![DVector::zeros(0); layers];
        let mut delta = d_pre;
        for l in (0..layers).rev() {
            let a_prev = &cache.activations[l];
            weights[l] = &delta * a_prev.transpose();
            biases[l] = delta.column_sum();
            let mut d_prev = self.weights[l].transpose() * &delta;
            if l > 0 {
                d_prev.zip_apply(a_prev, |d, a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        (Gradients { weights, biases }, delta)
    }
}

pub fn actor_forward(actor: &Mlp, obs: &[f64]) -> Result<Vec<f64>, DdpgError> {
    actor.forward(obs)
}

pub fn critic_forward(critic: &Mlp, obs: &[f64], action: &[f64]) -> Result<f64, DdpgError> {
    if obs.len() + action.len() != critic.input_dim() || critic.output_dim() != 1 {
        return Err(DdpgError::DimensionMismatch(format!(
            "critic takes {} inputs, got obs {} + action {}",
            critic.input_dim(),
            obs.len(),
            action.len()
        )));
    }
    let mut x = obs.to_vec();
    x.extend_from_slice(action);
    Ok(critic.forward(&x)?[0])
}

pub fn bellman_target(reward: f64, gamma: f64, done: bool, q_next: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q_next
    }
}

/// Stack observations and actions into one critic input batch.
pub fn critic_input(obs: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
    let (n_obs, n_act) = (obs.nrows(), actions.nrows());
    let mut x = DMatrix::zeros(n_obs + n_act, obs.ncols());
    x.rows_mut(0, n_obs).copy_from(obs);
    x.rows_mut(n_obs, n_act).copy_from(actions);
    x
}

/// Mean squared TD error and its gradient w.r.t. the critic parameters.
pub fn critic_loss_grad(
    critic: &Mlp,
    obs: &DMatrix<f64>,
    actions: &DMatrix<f64>,
    targets: &DVector<f64>,
) -> Result<(f64, Gradients), DdpgError> {
    let b = obs.ncols();
    if actions.ncols() != b || targets.len() != b {
        return Err(DdpgError::DimensionMismatch("batch sizes differ".into()));
    }
    let cache = critic.forward_batch(&critic_input(obs, actions))?;
    let err = DMatrix::from_fn(1, b, |_, j| cache.output()[(0, j)] - targets[j]);
    let loss = err.iter().map(|e| e * e).sum::<f64>() / b as f64;
    let (grads, _) = critic.backward(&cache, &(err * (2.0 / b as f64)));
    Ok((loss, grads))
}

/// Actor objective `-mean Q(s, mu(s)) + preact_l2 * mean ||z||^2`, with `z`
/// the actor's output pre-activation, and its gradient w.r.t. the actor.
pub fn actor_loss_grad(
    actor: &Mlp,
    critic: &Mlp,
    obs: &DMatrix<f64>,
    preact_l2: f64,
) -> Result<(f64, Gradients), DdpgError> {
    let b = obs.ncols();
    let a_cache = actor.forward_batch(obs)?;
    let c_cache = critic.forward_batch(&critic_input(obs, a_cache.output()))?;
    let z = actor.output_pre(&a_cache);
    let loss = -c_cache.output().sum() / b as f64 + preact_l2 * z.norm_squared() / b as f64;
    let d_q = DMatrix::from_element(1, b, -1.0 / b as f64);
    let (_, d_in) = critic.backward(&c_cache, &d_q);
    let mut d_pre = d_in.rows(obs.nrows(), actor.output_dim()).into_owned();
    if actor.output == OutputActivation::Tanh {
        d_pre.zip_apply(a_cache.output(), |d, y| *d *= 1.0 - y * y);
    }
    d_pre += z * (2.0 * preact_l2 / b as f64);
    let (grads, _) = actor.backward_pre(&a_cache, d_pre);
    Ok((loss, grads))
}

/// Adam moments in [`Mlp::params`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<(), DdpgError> {
        let g = grads.to_flat();
        if g.len() != self.m.len() {
            return Err(DdpgError::DimensionMismatch(format!(
                "optimizer sized for {} parameters, gradient has {}",
                self.m.len(),
                g.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut p = net.params();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        net.set_params(&p)
    }
}

/// `target ← tau·online + (1 − tau)·target`, parameter by parameter.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) {
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        t.zip_apply(o, |t, o| *t = tau * o + (1.0 - tau) * *t);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        t.zip_apply(o, |t, o| *t = tau * o + (1.0 - tau) * *t);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self, DdpgError> {
        if capacity == 0 {
            return Err(DdpgError::InvalidHyper("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `n` uniform draws with replacement.
    pub fn sample(&mut self, n: usize) -> Result<Vec<&Transition>, DdpgError> {
        if self.items.is_empty() {
            return Err(DdpgError::EmptyBuffer);
        }
        let len = self.items.len();
        let idx: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..len)).collect();
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Gaussian exploration noise, clipped back into `[-1, 1]`.
pub fn explore(action: &[f64], rng: &mut impl Rng, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    action
        .iter()
        .map(|a| (a + normal.sample(rng)).clamp(-1.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgHyper {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    /// Environment steps with uniformly random actions before updates start.
    pub warmup: usize,
    /// Exploration scale at step 0, decayed linearly to `noise_sigma_final`.
    pub noise_sigma: f64,
    pub noise_sigma_final: f64,
    /// Rewards are multiplied by this before entering the critic target.
    pub reward_scale: f64,
    /// Bound of the uniform init of both output layers.
    pub final_layer_init: f64,
    /// Weight of the squared actor pre-activation in the actor loss.
    pub preact_l2: f64,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch: 128,
            buffer_capacity: 20_000,
            warmup: 500,
            noise_sigma: 0.1,
            noise_sigma_final: 0.02,
            reward_scale: 0.1,
            final_layer_init: 3e-3,
            preact_l2: 0.1,
        }
    }
}

impl DdpgHyper {
    pub fn validate(&self) -> Result<(), DdpgError> {
        let bad = |m: &str| Err(DdpgError::InvalidHyper(m.into()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return bad("batch and buffer_capacity must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma_final >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale must be positive");
        }
        if !(self.final_layer_init >= 0.0) {
            return bad("final_layer_init must be non-negative");
        }
        if !(self.preact_l2 >= 0.0 && self.preact_l2.is_finite()) {
            return bad("preact_l2 must be non-negative");
        }
        Ok(())
    }

    /// Linearly decayed exploration scale.
    pub fn sigma_at(&self, step: usize, total_steps: usize) -> f64 {
        let frac = if total_steps <= 1 {
            1.0
        } else {
            (step as f64 / (total_steps - 1) as f64).min(1.0)
        };
        self.noise_sigma + (self.noise_sigma_final - self.noise_sigma) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpgAgent {
    pub hyper: DdpgHyper,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub updates: u64,
}

impl DdpgAgent {
    pub fn new(obs_dim: usize, act_dim: usize, hyper: DdpgHyper, seed: u64) -> Result<Self, DdpgError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a_sizes = vec![obs_dim];
        a_sizes.extend(&hyper.hidden);
        a_sizes.push(act_dim);
        let mut c_sizes = vec![obs_dim + act_dim];
        c_sizes.extend(&hyper.hidden);
        c_sizes.push(1);
        let actor = Mlp::new(&a_sizes, OutputActivation::Tanh, hyper.final_layer_init, &mut rng)?;
        let critic = Mlp::new(&c_sizes, OutputActivation::Linear, hyper.final_layer_init, &mut rng)?;
        Ok(Self {
            obs_dim,
            act_dim,
            actor_opt: Adam::new(actor.num_params()),
            critic_opt: Adam::new(critic.num_params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            hyper,
            updates: 0,
        })
    }

    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>, DdpgError> {
        actor_forward(&self.actor, obs)
    }

    pub fn q_value(&self, obs: &[f64], action: &[f64]) -> Result<f64, DdpgError> {
        critic_forward(&self.critic, obs, action)
    }

    /// One critic step, one actor step, then both soft target updates.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateStats, DdpgError> {
        let b = batch.len();
        if b == 0 {
            return Err(DdpgError::EmptyBuffer);
        }
        for t in batch {
            if t.obs.len() != self.obs_dim
                || t.next_obs.len() != self.obs_dim
                || t.action.len() != self.act_dim
            {
                return Err(DdpgError::DimensionMismatch(format!(
                    "transition dims obs {} action {} next {} vs agent {}/{}",
                    t.obs.len(),
                    t.action.len(),
                    t.next_obs.len(),
                    self.obs_dim,
                    self.act_dim
                )));
            }
        }
        let obs = DMatrix::from_fn(self.obs_dim, b, |i, j| batch[j].obs[i]);
        let next = DMatrix::from_fn(self.obs_dim, b, |i, j| batch[j].next_obs[i]);
        let actions = DMatrix::from_fn(self.act_dim, b, |i, j| batch[j].action[i]);

        let next_actions = self.actor_target.forward_batch(&next)?;
        let q_next = self
            .critic_target
            .forward_batch(&critic_input(&next, next_actions.output()))?;
        let targets = DVector::from_fn(b, |j, _| {
            let r = self.hyper.reward_scale * batch[j].reward;
            bellman_target(r, self.hyper.gamma, batch[j].done, q_next.output()[(0, j)])
        });

        let (critic_loss, c_grads) = critic_loss_grad(&self.critic, &obs, &actions, &targets)?;
        if !critic_loss.is_finite() || !c_grads.is_finite() {
            return Err(self.non_finite("critic", critic_loss));
        }
        self.critic_opt.step(&mut self.critic, &c_grads, self.hyper.lr_critic)?;

        let (actor_loss, a_grads) = actor_loss_grad(&self.actor, &self.critic, &obs, self.hyper.preact_l2)?;
        if !actor_loss.is_finite() || !a_grads.is_finite() {
            return Err(self.non_finite("actor", actor_loss));
        }
        self.actor_opt.step(&mut self.actor, &a_grads, self.hyper.lr_actor)?;

        soft_update(&mut self.critic_target, &self.critic, self.hyper.tau);
        soft_update(&mut self.actor_target, &self.actor, self.hyper.tau);
        self.updates += 1;
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    fn non_finite(&self, which: &str, loss: f64) -> DdpgError {
        let norm = |m: &Mlp| m.params().iter().map(|v| v * v).sum::<f64>().sqrt();
        DdpgError::NonFiniteLoss {
            update: self.updates,
            dump: format!(
                "{which} loss {loss}; |actor| {:.6e}, |critic| {:.6e}, |actor'| {:.6e}, |critic'| {:.6e}",
                norm(&self.actor),
                norm(&self.critic),
                norm(&self.actor_target),
                norm(&self.critic_target)
            ),
        }
    }
}

/// Everything needed to resume or replay a policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub step: u64,
    pub agent: DdpgAgent,
    /// Exploration-noise generator at the time of saving.
    pub noise_rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(agent: DdpgAgent, step: u64, noise_rng: ChaCha8Rng) -> Self {
        Self { schema_version: CHECKPOINT_SCHEMA_VERSION, step, agent, noise_rng }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DdpgError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DdpgError::Corrupt(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| DdpgError::Corrupt("missing schema_version".into()))?;
        if found != u64::from(CHECKPOINT_SCHEMA_VERSION) {
            return Err(DdpgError::SchemaMismatch { found, expected: CHECKPOINT_SCHEMA_VERSION });
        }
        let ck: Self = serde_json::from_value(value).map_err(|e| DdpgError::Corrupt(e.to_string()))?;
        let a = &ck.agent;
        let dims_ok = a.actor.input_dim() == a.obs_dim
            && a.actor.output_dim() == a.act_dim
            && a.critic.input_dim() == a.obs_dim + a.act_dim
            && a.critic.output_dim() == 1
            && a.actor_target.layer_sizes() == a.actor.layer_sizes()
            && a.critic_target.layer_sizes() == a.critic.layer_sizes();
        if !dims_ok {
            return Err(DdpgError::Corrupt("network dimensions disagree".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), DdpgError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DdpgError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(rows: usize, b: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, b, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Per-parameter central differences of `loss` around `net`.
    fn numeric_grad(net: &Mlp, eps: f64, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
        let base = net.params();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + eps;
                probe.set_params(&p).unwrap();
                let up = loss(&probe);
                p[i] = base[i] - eps;
                probe.set_params(&p).unwrap();
                let down = loss(&probe);
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_actor_outputs_midpoint() {
        let actor = Mlp::zeros(&[17, 8, 8, 4], OutputActivation::Tanh).unwrap();
        assert_eq!(actor_forward(&actor, &[0.3; 17]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn zero_critic_is_zero() {
        let critic = Mlp::zeros(&[5, 3, 1], OutputActivation::Linear).unwrap();
        assert_eq!(critic_forward(&critic, &[1.0, -2.0, 3.0, 0.5], &[0.7]).unwrap(), 0.0);
    }

    #[test]
    fn single_weight_tanh() {
        let mut net = Mlp::zeros(&[1, 1], OutputActivation::Tanh).unwrap();
        net.weights[0][(0, 0)] = 1.0;
        let y = actor_forward(&net, &[0.5]).unwrap()[0];
        assert_relative_eq!(y, 0.46211715726000974, epsilon = 1e-15);
    }

    #[test]
    fn hand_computed_critic_value() {
        // obs (1, 2), action 0.5 -> hidden tanh(W1 x + b1) -> linear
        let mut net = Mlp::zeros(&[3, 2, 1], OutputActivation::Linear).unwrap();
        net.weights[0] = DMatrix::from_row_slice(2, 3, &[0.1, -0.2, 0.3, 0.0, 0.5, -1.0]);
        net.biases[0] = DVector::from_column_slice(&[0.05, -0.1]);
        net.weights[1] = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        net.biases[1] = DVector::from_column_slice(&[0.25]);
        // z1 = 0.1 - 0.4 + 0.15 + 0.05 = -0.1 ; z2 = 0 + 1.0 - 0.5 - 0.1 = 0.4
        let expected = 2.0 * (-0.1f64).tanh() - 0.4f64.tanh() + 0.25;
        let q = critic_forward(&net, &[1.0, 2.0], &[0.5]).unwrap();
        assert_relative_eq!(q, expected, epsilon = 1e-15);
        assert_relative_eq!(q, -0.3292849515051366, epsilon = 1e-12);
    }

    #[test]
    fn forward_dim_mismatch() {
        let net = Mlp::zeros(&[3, 2, 1], OutputActivation::Linear).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(DdpgError::DimensionMismatch(_))));
        assert!(matches!(
            critic_forward(&net, &[1.0, 2.0], &[0.5, 0.5]),
            Err(DdpgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn bellman_arithmetic() {
        assert_relative_eq!(bellman_target(1.0, 0.99, false, 2.0), 2.98, epsilon = 1e-12);
        assert_eq!(bellman_target(1.0, 0.99, true, 2.0), 1.0);
        assert_eq!(bellman_target(-3.0, 0.99, true, 1e6), -3.0);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let critic = Mlp::new(&[4, 5, 3, 1], OutputActivation::Linear, 0.5, &mut rng).unwrap();
        let obs = random_batch(3, 6, &mut rng);
        let act = random_batch(1, 6, &mut rng);
        let targets = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let (_, g) = critic_loss_grad(&critic, &obs, &act, &targets).unwrap();
        let num = numeric_grad(&critic, 1e-5, |c| critic_loss_grad(c, &obs, &act, &targets).unwrap().0);
        assert!(max_rel_err(&g.to_flat(), &num) < 1e-4);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let actor = Mlp::new(&[3, 4, 4, 2], OutputActivation::Tanh, 0.5, &mut rng).unwrap();
        let critic = Mlp::new(&[5, 4, 1], OutputActivation::Linear, 0.5, &mut rng).unwrap();
        let obs = random_batch(3, 5, &mut rng);
        let (_, g) = actor_loss_grad(&actor, &critic, &obs, 0.05).unwrap();
        let num = numeric_grad(&actor, 1e-5, |a| actor_loss_grad(a, &critic, &obs, 0.05).unwrap().0);
        assert!(max_rel_err(&g.to_flat(), &num) < 1e-4);
    }

    #[test]
    fn td_loss_decreases_for_small_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut critic = Mlp::new(&[6, 16, 16, 1], OutputActivation::Linear, 0.3, &mut rng).unwrap();
            let obs = random_batch(4, 32, &mut rng);
            let act = random_batch(2, 32, &mut rng);
            let targets = DVector::from_fn(32, |_, _| rng.gen_range(-2.0..2.0));
            let (before, g) = critic_loss_grad(&critic, &obs, &act, &targets).unwrap();
            let mut opt = Adam::new(critic.num_params());
            opt.step(&mut critic, &g, 1e-5).unwrap();
            let (after, _) = critic_loss_grad(&critic, &obs, &act, &targets).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn soft_update_contracts_toward_online() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let online = Mlp::new(&[3, 4, 2], OutputActivation::Tanh, 1.0, &mut rng).unwrap();
        let mut target = Mlp::new(&[3, 4, 2], OutputActivation::Tanh, 1.0, &mut rng).unwrap();
        let old = target.params();
        soft_update(&mut target, &online, 0.005);
        let theta = online.params();
        for ((n, o), t) in target.params().iter().zip(&old).zip(&theta) {
            assert_relative_eq!(n - t, 0.995 * (o - t), epsilon = 1e-14);
        }
    }

    #[test]
    fn buffer_push_one_sample_one() {
        let mut buf = ReplayBuffer::new(4, 0).unwrap();
        assert!(matches!(buf.sample(1), Err(DdpgError::EmptyBuffer)));
        let t = Transition { obs: vec![1.0], action: vec![0.5], reward: 2.0, next_obs: vec![3.0], done: true };
        buf.push(t.clone());
        assert_eq!(buf.sample(1).unwrap(), vec![&t]);
    }

    #[test]
    fn buffer_ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3, 0).unwrap();
        for k in 0..4 {
            buf.push(Transition { obs: vec![k as f64], action: vec![0.0], reward: 0.0, next_obs: vec![0.0], done: false });
        }
        assert_eq!(buf.len(), 3);
        let mut kept: Vec<f64> = buf.iter().map(|t| t.obs[0]).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn buffers_with_same_seed_sample_identically() {
        let fill = |buf: &mut ReplayBuffer| {
            for k in 0..50 {
                buf.push(Transition { obs: vec![k as f64], action: vec![0.0], reward: 0.0, next_obs: vec![0.0], done: false });
            }
        };
        let (mut a, mut b) = (ReplayBuffer::new(64, 9).unwrap(), ReplayBuffer::new(64, 9).unwrap());
        fill(&mut a);
        fill(&mut b);
        for _ in 0..10 {
            assert_eq!(a.sample(16).unwrap(), b.sample(16).unwrap());
        }
    }

    #[test]
    fn explore_without_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(explore(&[0.3, -0.9], &mut rng, 0.0), vec![0.3, -0.9]);
    }

    #[test]
    fn explore_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..20).map(|_| explore(&[0.0, 0.5], &mut rng, 0.1)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sigma_decays_linearly() {
        let h = DdpgHyper::default();
        assert_eq!(h.sigma_at(0, 10_000), 0.1);
        assert_relative_eq!(h.sigma_at(9_999, 10_000), 0.02, epsilon = 1e-15);
        assert_relative_eq!(h.sigma_at(20_000, 10_000), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn hyper_validation() {
        assert!(DdpgHyper::default().validate().is_ok());
        assert!(DdpgHyper { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(DdpgHyper { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DdpgHyper { batch: 0, ..Default::default() }.validate().is_err());
    }

    fn small_agent(seed: u64) -> DdpgAgent {
        let hyper = DdpgHyper { hidden: vec![8, 8], batch: 4, ..Default::default() };
        DdpgAgent::new(3, 2, hyper, seed).unwrap()
    }

    #[test]
    fn update_rejects_bad_transition() {
        let mut agent = small_agent(0);
        let t = Transition { obs: vec![0.0; 2], action: vec![0.0; 2], reward: 0.0, next_obs: vec![0.0; 3], done: false };
        assert!(matches!(agent.update(&[&t]), Err(DdpgError::DimensionMismatch(_))));
    }

    #[test]
    fn update_moves_targets_slowly() {
        let mut agent = small_agent(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ts: Vec<Transition> = (0..4)
            .map(|_| Transition {
                obs: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                reward: rng.gen_range(-5.0..0.0),
                next_obs: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                done: false,
            })
            .collect();
        let refs: Vec<&Transition> = ts.iter().collect();
        let target_before = agent.critic_target.params();
        let stats = agent.update(&refs).unwrap();
        assert!(stats.critic_loss.is_finite() && stats.actor_loss.is_finite());
        assert_eq!(agent.updates, 1);
        let online = agent.critic.params();
        for ((n, o), t) in agent.critic_target.params().iter().zip(&target_before).zip(&online) {
            assert_relative_eq!(n - t, 0.995 * (o - t), epsilon = 1e-12);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut agent = small_agent(1);
        let t = Transition { obs: vec![0.0; 3], action: vec![0.0; 2], reward: f64::NAN, next_obs: vec![0.0; 3], done: false };
        assert!(matches!(agent.update(&[&t]), Err(DdpgError::NonFiniteLoss { .. })));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let agent = small_agent(6);
        let ck = Checkpoint::new(agent.clone(), 42, ChaCha8Rng::seed_from_u64(3));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back.agent, agent);
        assert_eq!(back.step, 42);
        assert_eq!(back.noise_rng, ck.noise_rng);
        let obs = [0.1, -0.2, 0.7];
        assert_eq!(back.agent.act(&obs).unwrap(), agent.act(&obs).unwrap());
    }

    #[test]
    fn checkpoint_weights_are_row_major() {
        let mut net = Mlp::zeros(&[2, 2], OutputActivation::Linear).unwrap();
        net.weights[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let v = serde_json::to_value(&net).unwrap();
        assert_eq!(v["weights"][0], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let ck = Checkpoint::new(small_agent(0), 0, ChaCha8Rng::seed_from_u64(0));
        let text = ck.to_json().replacen("\"schema_version\":1", "\"schema_version\":7", 1);
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(DdpgError::SchemaMismatch { found: 7, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_json("{"), Err(DdpgError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn actor_output_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let actor = Mlp::new(&[5, 6, 3], OutputActivation::Tanh, scale, &mut rng).unwrap();
            let obs: Vec<f64> = (0..5).map(|_| rng.gen_range(-100.0..100.0)).collect();
            for a in actor_forward(&actor, &obs).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn explore_stays_in_box(seed in 0u64..1000, sigma in 0.0f64..5.0, a in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in explore(&[a, -a], &mut rng, sigma) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn critic_finite_for_finite_inputs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let critic = Mlp::new(&[4, 5, 1], OutputActivation::Linear, 1.0, &mut rng).unwrap();
            let obs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1e6..1e6)).collect();
            prop_assert!(critic_forward(&critic, &obs, &[0.5]).unwrap().is_finite());
        }

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n_obs, n_act, h) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(2..5));
            let actor = Mlp::new(&[n_obs, h, h, n_act], OutputActivation::Tanh, 0.5, &mut rng).unwrap();
            let critic = Mlp::new(&[n_obs + n_act, h, h, 1], OutputActivation::Linear, 0.5, &mut rng).unwrap();
            let obs = random_batch(n_obs, 4, &mut rng);
            let act = random_batch(n_act, 4, &mut rng);
            let targets = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let (_, gc) = critic_loss_grad(&critic, &obs, &act, &targets).unwrap();
            let nc = numeric_grad(&critic, 1e-5, |c| critic_loss_grad(c, &obs, &act, &targets).unwrap().0);
            prop_assert!(max_rel_err(&gc.to_flat(), &nc) < 1e-4);
            let (_, ga) = actor_loss_grad(&actor, &critic, &obs, 0.05).unwrap();
            let na = numeric_grad(&actor, 1e-5, |a| actor_loss_grad(a, &critic, &obs, 0.05).unwrap().0);
            prop_assert!(max_rel_err(&ga.to_flat(), &na) < 1e-4);
        }
    }
}
