//! Fitted safety value functions: the discounted safety backup, double-DQN
//! critics trained in latent imagination or on the true state, and a CMDP
//! risk critic baseline.

use log::{debug, info};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::FailureClassifier;
use crate::dubins::{margin_gt, step_clamped, DubinsParams};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Architecture, Checkpoint, LrSchedule, Mlp, NetSpec};
use crate::rng::Rng;
use crate::types::{ActionIndex, ActionSet, Dataset, State};
use crate::world_model::{LatentState, WorldModel};

/// Discounted safety backup: `(1-γ)ℓ + γ·min(ℓ, q)`.
pub fn bellman_target(l: f32, best_next_q: f32, gamma: f32) -> f32 {
    let (l, q, g) = (l as f64, best_next_q as f64, gamma as f64);
    ((1.0 - g) * l + g * l.min(q)) as f32
}

/// CMDP risk backup: `c + (1-c)·γ·q`.
pub fn risk_target(violation: bool, next_risk: f32, gamma: f32) -> f32 {
    if violation {
        1.0
    } else {
        gamma * next_risk
    }
}

/// Critic input for the privileged variant: `(x, y, cos θ, sin θ)`.
pub fn priv_features(s: &State) -> [f32; 4] {
    [s.px as f32, s.py as f32, s.theta.cos() as f32, s.theta.sin() as f32]
}

/// Privileged margin rescaled into (−1, 1).
pub fn priv_margin(s: &State, params: &DubinsParams, scale: f64) -> f32 {
    (scale * margin_gt(s, params)).tanh() as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticKind {
    Latent,
    Privileged,
}

/// What a critic is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum CriticInput<'a> {
    Latent(&'a LatentState),
    Privileged(&'a State),
}

impl CriticInput<'_> {
    fn features(&self, kind: CriticKind) -> Result<Vec<f32>> {
        match (self, kind) {
            (CriticInput::Latent(z), CriticKind::Latent) => Ok(z.z.clone()),
            (CriticInput::Privileged(s), CriticKind::Privileged) => Ok(priv_features(s).to_vec()),
            _ => Err(Error::ModeMismatch(format!("{kind:?} critic given a different input kind"))),
        }
    }
}

/// Linear γ and exploration-ε schedules over the update count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub gamma_fraction: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_fraction: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            gamma_start: 0.85,
            gamma_end: 0.9999,
            gamma_fraction: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.5,
        }
    }
}

fn lerp_clamped(start: f64, end: f64, frac: f64, step: u64, total: u64) -> f64 {
    let horizon = frac * total as f64;
    if horizon <= 0.0 {
        return end;
    }
    let t = (step as f64 / horizon).min(1.0);
    start + (end - start) * t
}

impl AnnealSchedule {
    pub fn fixed_gamma(gamma: f64) -> Self {
        Self {
            gamma_start: gamma,
            gamma_end: gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g_ok = |g: f64| (0.0..1.0).contains(&g);
        let e_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !g_ok(self.gamma_start) || !g_ok(self.gamma_end) || !e_ok(self.epsilon_start) || !e_ok(self.epsilon_end) {
            return Err(Error::Config("γ must lie in [0, 1) and exploration ε in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn gamma(&self, step: u64, total: u64) -> f64 {
        lerp_clamped(self.gamma_start, self.gamma_end, self.gamma_fraction, step, total)
    }

    pub fn epsilon(&self, step: u64, total: u64) -> f64 {
        lerp_clamped(self.epsilon_start, self.epsilon_end, self.epsilon_fraction, step, total)
    }
}

/// FIFO ring buffer of `(x, a, x', ℓ(x))` transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    dim: usize,
    capacity: usize,
    len: usize,
    head: usize,
    inputs: Vec<f32>,
    next_inputs: Vec<f32>,
    actions: Vec<ActionIndex>,
    margins: Vec<f32>,
}

/// A sampled mini-batch.
#[derive(Debug, Clone)]
pub struct ReplayBatch {
    pub inputs: Array2<f32>,
    pub next_inputs: Array2<f32>,
    pub actions: Vec<ActionIndex>,
    pub margins: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::InvalidArgument("replay buffer needs positive dim and capacity".into()));
        }
        Ok(Self {
            dim,
            capacity,
            len: 0,
            head: 0,
            inputs: vec![0.0; dim * capacity],
            next_inputs: vec![0.0; dim * capacity],
            actions: vec![ActionIndex::STRAIGHT; capacity],
            margins: vec![0.0; capacity],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, x: &[f32], a: ActionIndex, x_next: &[f32], margin: f32) -> Result<()> {
        if x.len() != self.dim || x_next.len() != self.dim {
            return Err(Error::Shape(format!("transition width {} does not match buffer {}", x.len(), self.dim)));
        }
        let i = self.head;
        self.inputs[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        self.next_inputs[i * self.dim..(i + 1) * self.dim].copy_from_slice(x_next);
        self.actions[i] = a;
        self.margins[i] = margin;
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Slot index of the `k`-th oldest stored transition.
    fn slot(&self, k: usize) -> usize {
        (self.head + self.capacity - self.len + k) % self.capacity
    }

    pub fn margin_at(&self, k: usize) -> f32 {
        self.margins[self.slot(k)]
    }

    /// Uniform indices in `0..len` (with replacement).
    pub fn sample_indices(&self, rng: &mut Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.below(self.len)).collect()
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<ReplayBatch> {
        if self.len == 0 {
            return Err(Error::Empty("cannot sample an empty replay buffer".into()));
        }
        let idx = self.sample_indices(rng, n);
        let mut inputs = Array2::zeros((n, self.dim));
        let mut next_inputs = Array2::zeros((n, self.dim));
        let mut actions = Vec::with_capacity(n);
        let mut margins = Vec::with_capacity(n);
        for (r, &k) in idx.iter().enumerate() {
            let s = self.slot(k);
            let span = s * self.dim..(s + 1) * self.dim;
            inputs.row_mut(r).assign(&ndarray::ArrayView1::from(&self.inputs[span.clone()]));
            next_inputs.row_mut(r).assign(&ndarray::ArrayView1::from(&self.next_inputs[span]));
            actions.push(self.actions[s]);
            margins.push(self.margins[s]);
        }
        Ok(ReplayBatch {
            inputs,
            next_inputs,
            actions,
            margins,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub updates: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    pub lr: f64,
    pub lr_decay_at: Vec<f64>,
    pub lr_decay: f64,
    pub target_sync_every: u64,
    pub schedule: AnnealSchedule,
    /// Environment steps collected per gradient update.
    pub env_steps_per_update: usize,
    /// Episode length in steps (imagination horizon for latent critics).
    pub horizon: usize,
    /// Privileged margin is `tanh(margin_scale · ℓ_gt)`.
    pub margin_scale: f64,
    /// Episodes end once the margin drops below this value.
    pub terminal_margin: f32,
    /// Actions enumerated by the critic (and explored).
    pub actions: ActionSet,
    /// Mean squared TD error above which training aborts.
    pub divergence_loss: f64,
    pub log_every: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            updates: 200_000,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup: 1_000,
            lr: 1e-3,
            lr_decay_at: vec![0.6, 0.8],
            lr_decay: 0.8,
            target_sync_every: 1_000,
            schedule: AnnealSchedule::default(),
            env_steps_per_update: 1,
            horizon: 25,
            margin_scale: 4.0,
            terminal_margin: -0.95,
            actions: ActionSet::FULL,
            divergence_loss: 1e3,
            log_every: 20_000,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.horizon == 0 || self.target_sync_every == 0 {
            return Err(Error::Config("critic batch, buffer, horizon and sync period must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.margin_scale > 0.0) {
            return Err(Error::Config("critic lr and margin_scale must be positive".into()));
        }
        Ok(())
    }
}

pub fn critic_arch(input_dim: usize, hidden: &[usize], output: Activation) -> Architecture {
    Architecture::mlp(input_dim, hidden, ActionIndex::COUNT, Activation::Tanh, output)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub updates: u64,
    pub transitions: u64,
    pub episodes: u64,
    pub final_loss: f64,
    pub final_gamma: f64,
}

/// Q-network over three actions with its target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyCritic {
    pub kind: CriticKind,
    pub actions: ActionSet,
    pub online: Mlp,
    pub target: Mlp,
    pub report: CriticReport,
}

impl SafetyCritic {
    pub fn new(kind: CriticKind, actions: ActionSet, online: Mlp) -> Result<Self> {
        if online.output_dim() != ActionIndex::COUNT {
            return Err(Error::Shape("critic must output one value per action".into()));
        }
        if actions.is_empty() {
            return Err(Error::InvalidArgument("critic needs at least one action".into()));
        }
        Ok(Self {
            kind,
            actions,
            target: online.clone(),
            online,
            report: CriticReport::default(),
        })
    }

    pub fn q_values(&self, input: CriticInput) -> Result<Vec<f32>> {
        self.online.forward(&input.features(self.kind)?)
    }

    /// `max_a Q(x, a)` over the enumerated actions.
    pub fn value_of(&self, input: CriticInput) -> Result<f32> {
        let q = self.q_values(input)?;
        Ok(q[self.actions.argmax(&q).index()])
    }

    /// `argmax_a Q(x, a)`, ties to the lowest index.
    pub fn shield_action(&self, input: CriticInput) -> Result<ActionIndex> {
        Ok(self.actions.argmax(&self.q_values(input)?))
    }

    /// Values for a batch of feature rows.
    pub fn values_batch(&self, x: ArrayView2<f32>) -> Result<Vec<f32>> {
        let q = self.online.forward_batch(x)?;
        Ok(q.rows()
            .into_iter()
            .map(|r| {
                let r = r.as_slice().expect("standard layout");
                r[self.actions.argmax(r).index()]
            })
            .collect())
    }

    pub fn shield_batch(&self, x: ArrayView2<f32>) -> Result<Vec<ActionIndex>> {
        let q = self.online.forward_batch(x)?;
        Ok(q.rows()
            .into_iter()
            .map(|r| self.actions.argmax(r.as_slice().expect("standard layout")))
            .collect())
    }

    pub fn to_checkpoint(&self, name: &str, mut metadata: serde_json::Value) -> Checkpoint {
        metadata["critic"] = json!({
            "name": name,
            "kind": self.kind,
            "actions": self.actions,
            "report": self.report,
        });
        Checkpoint::new(metadata).with(name, self.online.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, name: &str) -> Result<Self> {
        let meta = &ck.metadata["critic"];
        let kind: CriticKind = serde_json::from_value(meta["kind"].clone())
            .map_err(|e| Error::Shape(format!("critic metadata kind: {e}")))?;
        let actions: ActionSet = serde_json::from_value(meta["actions"].clone())
            .map_err(|e| Error::Shape(format!("critic metadata actions: {e}")))?;
        let mut c = Self::new(kind, actions, ck.get(name)?.clone())?;
        c.report = serde_json::from_value(meta["report"].clone()).unwrap_or_default();
        Ok(c)
    }
}

/// Risk critic: sigmoid outputs estimating the discounted probability of
/// entering the failure set.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskCritic {
    pub gamma: f32,
    pub actions: ActionSet,
    pub online: Mlp,
    pub target: Mlp,
    pub report: CriticReport,
}

impl RiskCritic {
    pub fn new(gamma: f32, actions: ActionSet, online: Mlp) -> Result<Self> {
        if online.output_dim() != ActionIndex::COUNT {
            return Err(Error::Shape("risk critic must output one value per action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument("γ_risk must lie in [0, 1)".into()));
        }
        Ok(Self {
            gamma,
            actions,
            target: online.clone(),
            online,
            report: CriticReport::default(),
        })
    }

    pub fn risks(&self, z: &LatentState) -> Result<Vec<f32>> {
        self.online.forward(&z.z)
    }

    /// `min_a Q_risk(z, a)`.
    pub fn min_risk(&self, z: &LatentState) -> Result<f32> {
        let q = self.risks(z)?;
        Ok(q[self.actions.argmin(&q).index()])
    }

    pub fn safest_action(&self, z: &LatentState) -> Result<ActionIndex> {
        Ok(self.actions.argmin(&self.risks(z)?))
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Checkpoint {
        metadata["critic"] = json!({
            "name": "critic_risk",
            "gamma": self.gamma,
            "actions": self.actions,
            "report": self.report,
        });
        Checkpoint::new(metadata).with("critic_risk", self.online.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.metadata["critic"];
        let gamma = meta["gamma"]
            .as_f64()
            .ok_or_else(|| Error::Shape("risk critic metadata lacks `gamma`".into()))? as f32;
        let actions: ActionSet = serde_json::from_value(meta["actions"].clone())
            .map_err(|e| Error::Shape(format!("critic metadata actions: {e}")))?;
        let mut c = Self::new(gamma, actions, ck.get("critic_risk")?.clone())?;
        c.report = serde_json::from_value(meta["report"].clone()).unwrap_or_default();
        Ok(c)
    }
}

/// Episode source for critic training.
trait CriticEnv {
    type S: Clone;
    fn reset(&self, rng: &mut Rng) -> Self::S;
    fn features(&self, s: &Self::S) -> Vec<f32>;
    fn step(&self, s: &Self::S, a: ActionIndex) -> Result<Self::S>;
    fn margin(&self, s: &Self::S) -> Result<f32>;
}

/// Imagination episodes reset from encodings of dataset observations.
struct LatentEnv<'a> {
    wm: &'a WorldModel,
    clf: &'a FailureClassifier,
    pool: Array2<f32>,
}

impl CriticEnv for LatentEnv<'_> {
    type S = LatentState;

    fn reset(&self, rng: &mut Rng) -> LatentState {
        let i = rng.below(self.pool.nrows());
        LatentState {
            z: self.pool.row(i).to_vec(),
        }
    }

    fn features(&self, s: &LatentState) -> Vec<f32> {
        s.z.clone()
    }

    fn step(&self, s: &LatentState, a: ActionIndex) -> Result<LatentState> {
        self.wm.imagine_step(s, a)
    }

    fn margin(&self, s: &LatentState) -> Result<f32> {
        self.clf.latent_margin(s)
    }
}

/// True dynamics with clamped positions and uniform resets.
struct PrivEnv<'a> {
    params: &'a DubinsParams,
    margin_scale: f64,
}

impl CriticEnv for PrivEnv<'_> {
    type S = State;

    fn reset(&self, rng: &mut Rng) -> State {
        self.params.sample_uniform(rng)
    }

    fn features(&self, s: &State) -> Vec<f32> {
        priv_features(s).to_vec()
    }

    fn step(&self, s: &State, a: ActionIndex) -> Result<State> {
        Ok(step_clamped(s, a, self.params))
    }

    fn margin(&self, s: &State) -> Result<f32> {
        Ok(priv_margin(s, self.params, self.margin_scale))
    }
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    /// Maximize the discounted minimum margin.
    Safety,
    /// Minimize discounted violation probability with the given discount.
    Risk(f32),
}

impl Objective {
    fn greedy(self, actions: ActionSet, q: &[f32]) -> ActionIndex {
        match self {
            Objective::Safety => actions.argmax(q),
            Objective::Risk(_) => actions.argmin(q),
        }
    }

    fn target(self, margin: f32, next_q: f32, gamma: f32) -> f32 {
        match self {
            Objective::Safety => bellman_target(margin, next_q.clamp(-1.0, 1.0), gamma),
            Objective::Risk(g) => risk_target(margin < 0.0, next_q.clamp(0.0, 1.0), g),
        }
    }
}

struct Episode<S> {
    state: S,
    t: usize,
}

/// Double-DQN loop shared by every critic variant. Returns trained online
/// and target networks plus a report.
fn fit_q<E: CriticEnv>(env: &E, objective: Objective, mut online: Mlp, cfg: &CriticConfig, seed: u64) -> Result<(Mlp, Mlp, CriticReport)> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let mut env_rng = root.derive(1);
    let mut batch_rng = root.derive(2);
    let mut target = online.clone();
    let mut report = CriticReport::default();
    if cfg.updates == 0 {
        return Ok((online, target, report));
    }
    let dim = online.input_dim();
    let mut buffer = ReplayBuffer::new(dim, cfg.buffer_capacity)?;
    let schedule = LrSchedule::step_decay(cfg.lr, cfg.updates, &cfg.lr_decay_at, cfg.lr_decay);
    let mut opt = Adam::new(&online.params, schedule, AdamConfig::default());
    let allowed: Vec<ActionIndex> = cfg.actions.iter().collect();

    let mut ep = Episode {
        state: env.reset(&mut env_rng),
        t: 0,
    };
    report.episodes = 1;
    let mut collect = |online: &Mlp, eps: f64, buffer: &mut ReplayBuffer, report: &mut CriticReport| -> Result<()> {
        let x = env.features(&ep.state);
        let a = if env_rng.bernoulli(eps) {
            allowed[env_rng.below(allowed.len())]
        } else {
            objective.greedy(cfg.actions, &online.forward(&x)?)
        };
        let l = env.margin(&ep.state)?;
        let next = env.step(&ep.state, a)?;
        buffer.push(&x, a, &env.features(&next), l)?;
        report.transitions += 1;
        ep.t += 1;
        if ep.t >= cfg.horizon || l < cfg.terminal_margin {
            ep = Episode {
                state: env.reset(&mut env_rng),
                t: 0,
            };
            report.episodes += 1;
        } else {
            ep.state = next;
        }
        Ok(())
    };

    while buffer.len() < cfg.warmup.min(cfg.buffer_capacity) {
        collect(&online, 1.0, &mut buffer, &mut report)?;
    }

    let mut running = 0.0;
    for u in 0..cfg.updates {
        let eps = cfg.schedule.epsilon(u, cfg.updates);
        for _ in 0..cfg.env_steps_per_update {
            collect(&online, eps, &mut buffer, &mut report)?;
        }
        let gamma = cfg.schedule.gamma(u, cfg.updates) as f32;
        let b = buffer.sample(&mut batch_rng, cfg.batch_size)?;
        let q_next_online = online.forward_batch(b.next_inputs.view())?;
        let q_next_target = target.forward_batch(b.next_inputs.view())?;
        let cache = online.forward_cached(b.inputs.view())?;
        let q = cache.output();
        let n = b.actions.len();
        let mut grad = Array2::zeros(q.dim());
        let mut loss = 0.0f64;
        for i in 0..n {
            let a_star = objective.greedy(cfg.actions, q_next_online.row(i).as_slice().expect("standard layout"));
            let y = objective.target(b.margins[i], q_next_target[[i, a_star.index()]], gamma);
            let a = b.actions[i].index();
            let err = q[[i, a]] - y;
            grad[[i, a]] = 2.0 * err / n as f32;
            loss += (err as f64).powi(2);
        }
        loss /= n as f64;
        if !loss.is_finite() || loss > cfg.divergence_loss {
            return Err(Error::Divergence(format!("critic TD loss {loss:e} at update {u}")));
        }
        let (g, _) = online.backward(&cache, grad.view())?;
        opt.step(&mut online.params, &g);
        if (u + 1) % cfg.target_sync_every == 0 {
            target = online.clone();
        }
        running = if u == 0 { loss } else { 0.999 * running + 0.001 * loss };
        if cfg.log_every > 0 && (u + 1) % cfg.log_every == 0 {
            debug!("critic update {}: td loss {running:.5}, γ {gamma:.5}, ε {eps:.3}", u + 1);
        }
        report.final_gamma = gamma as f64;
    }
    report.updates = cfg.updates;
    report.final_loss = running;
    Ok((online, target, report))
}

/// Encodings of every dataset observation (the imagination reset pool).
pub fn latent_pool(wm: &WorldModel, dataset: &Dataset) -> Result<Array2<f32>> {
    if dataset.total_steps() == 0 {
        return Err(Error::Empty("cannot build a reset pool from an empty dataset".into()));
    }
    let obs: Vec<_> = dataset.steps().map(|s| &s.observation).collect();
    wm.encode_batch(&obs)
}

fn latent_net(pool: &Array2<f32>, hidden: &[usize], out: Activation, rng: &mut Rng) -> Result<Mlp> {
    let spec = NetSpec::fit_normalization(critic_arch(pool.ncols(), hidden, out), pool.view(), 1e-3)?;
    Ok(Mlp::new(spec, rng))
}

pub fn train_latent_critic(wm: &WorldModel, clf: &FailureClassifier, dataset: &Dataset, cfg: &CriticConfig, seed: u64) -> Result<SafetyCritic> {
    let pool = latent_pool(wm, dataset)?;
    let online = latent_net(&pool, &cfg.hidden, Activation::Identity, &mut Rng::new(seed).derive(0))?;
    let env = LatentEnv { wm, clf, pool };
    let (online, target, report) = fit_q(&env, Objective::Safety, online, cfg, seed)?;
    info!("latent critic: {} updates, td loss {:.5}", report.updates, report.final_loss);
    Ok(SafetyCritic {
        kind: CriticKind::Latent,
        actions: cfg.actions,
        online,
        target,
        report,
    })
}

pub fn train_priv_critic(params: &DubinsParams, cfg: &CriticConfig, seed: u64) -> Result<SafetyCritic> {
    params.validate()?;
    let spec = NetSpec::new(critic_arch(4, &cfg.hidden, Activation::Identity))?;
    let online = Mlp::new(spec, &mut Rng::new(seed).derive(0));
    let env = PrivEnv {
        params,
        margin_scale: cfg.margin_scale,
    };
    let (online, target, report) = fit_q(&env, Objective::Safety, online, cfg, seed)?;
    info!("privileged critic: {} updates, td loss {:.5}", report.updates, report.final_loss);
    Ok(SafetyCritic {
        kind: CriticKind::Privileged,
        actions: cfg.actions,
        online,
        target,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    pub gamma_risk: f32,
    pub critic: CriticConfig,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            gamma_risk: 0.9,
            critic: CriticConfig::default(),
        }
    }
}

pub fn train_risk_critic(wm: &WorldModel, clf: &FailureClassifier, dataset: &Dataset, cfg: &RiskConfig, seed: u64) -> Result<RiskCritic> {
    let pool = latent_pool(wm, dataset)?;
    let online = latent_net(&pool, &cfg.critic.hidden, Activation::Sigmoid, &mut Rng::new(seed).derive(0))?;
    let env = LatentEnv { wm, clf, pool };
    let (online, target, report) = fit_q(&env, Objective::Risk(cfg.gamma_risk), online, &cfg.critic, seed)?;
    info!("risk critic: {} updates, td loss {:.5}", report.updates, report.final_loss);
    Ok(RiskCritic {
        gamma: cfg.gamma_risk,
        actions: cfg.critic.actions,
        online,
        target,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn target_examples() {
        assert_eq!(bellman_target(0.3, -0.7, 0.0), 0.3);
        assert_eq!(bellman_target(-1.0, 0.4, 0.9), -1.0);
        assert_eq!(bellman_target(-1.0, -1.0, 0.5), -1.0);
        assert!((bellman_target(0.5, 0.2, 0.9) - 0.23).abs() < 1e-6);
        assert_eq!(risk_target(true, 0.0, 0.9), 1.0);
        assert_eq!(risk_target(true, 0.7, 0.9), 1.0);
        assert_eq!(risk_target(false, 0.0, 0.9), 0.0);
    }

    proptest! {
        #[test]
        fn target_is_contraction_and_below_margin(
            l in -1.0f32..1.0, q1 in -1.0f32..1.0, q2 in -1.0f32..1.0, g in 0.0f32..0.9999
        ) {
            let (t1, t2) = (bellman_target(l, q1, g), bellman_target(l, q2, g));
            let slack = 2.0 * f32::EPSILON;
            prop_assert!((t1 - t2).abs() <= g * (q1 - q2).abs() + slack);
            prop_assert!(t1 <= l);
            prop_assert!((-1.0..=1.0).contains(&t1));
        }
    }

    fn fixed_critic(bias: [f32; 3]) -> SafetyCritic {
        let spec = NetSpec::new(Architecture::mlp(4, &[], 3, Activation::Identity, Activation::Identity)).unwrap();
        let mut net = Mlp::new(spec, &mut Rng::new(0));
        net.params.weights[0].fill(0.0);
        net.params.biases[0] = ndarray::Array1::from(bias.to_vec());
        SafetyCritic::new(CriticKind::Privileged, ActionSet::FULL, net).unwrap()
    }

    #[test]
    fn value_and_shield_examples() {
        let s = State::new(0.2, 0.3, 0.1).unwrap();
        let input = CriticInput::Privileged(&s);
        let c = fixed_critic([0.1, 0.3, -0.2]);
        assert!((c.value_of(input).unwrap() - 0.3).abs() < 1e-7);
        assert_eq!(c.shield_action(input).unwrap(), ActionIndex::STRAIGHT);
        let tie = fixed_critic([0.3, 0.3, 0.0]);
        assert_eq!(tie.shield_action(input).unwrap(), ActionIndex::RIGHT);
        let flat = fixed_critic([0.25; 3]);
        assert_eq!(flat.value_of(input).unwrap(), 0.25);
        let shifted = fixed_critic([0.6, 0.8, 0.3]);
        assert!((shifted.value_of(input).unwrap() - 0.8).abs() < 1e-7);
        assert_eq!(shifted.shield_action(input).unwrap(), c.shield_action(input).unwrap());
        let z = LatentState { z: vec![0.0; 4] };
        assert!(matches!(c.value_of(CriticInput::Latent(&z)), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn restricted_critic_enumerates_allowed_actions() {
        let s = State::new(0.0, 0.9, 0.0).unwrap();
        let mut c = fixed_critic([0.9, 0.1, 0.2]);
        c.actions = ActionSet::from_actions(&[ActionIndex::STRAIGHT, ActionIndex::LEFT]).unwrap();
        assert_eq!(c.shield_action(CriticInput::Privileged(&s)).unwrap(), ActionIndex::LEFT);
        assert!((c.value_of(CriticInput::Privileged(&s)).unwrap() - 0.2).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn shield_invariant_under_shift_and_positive_scale(
            q in proptest::array::uniform3(-1.0f32..1.0), k in -0.5f32..0.5, m in 0.1f32..4.0
        ) {
            let base = ActionSet::FULL.argmax(&q);
            let shifted: Vec<f32> = q.iter().map(|v| v + k).collect();
            let scaled: Vec<f32> = q.iter().map(|v| v * m).collect();
            // Exact ties can appear or vanish under rounding; only check clear winners.
            let mut sorted = q;
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-5);
            prop_assert_eq!(ActionSet::FULL.argmax(&shifted), base);
            prop_assert_eq!(ActionSet::FULL.argmax(&scaled), base);
        }
    }

    #[test]
    fn replay_buffer_fifo_and_capacity() {
        let mut b = ReplayBuffer::new(2, 3).unwrap();
        for i in 0..5 {
            b.push(&[i as f32, 0.0], ActionIndex::LEFT, &[0.0, i as f32], i as f32).unwrap();
            assert!(b.len() <= 3);
        }
        assert_eq!(b.len(), 3);
        assert_eq!((0..3).map(|k| b.margin_at(k)).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert!(b.push(&[0.0], ActionIndex::LEFT, &[0.0, 0.0], 0.0).is_err());
        let batch = b.sample(&mut Rng::new(1), 8).unwrap();
        assert!(batch.margins.iter().all(|m| *m >= 2.0));
        for (r, m) in batch.margins.iter().enumerate() {
            assert_eq!(batch.inputs[[r, 0]], *m);
            assert_eq!(batch.next_inputs[[r, 1]], *m);
        }
    }

    #[test]
    fn replay_sampling_is_uniform() {
        // Chi-square goodness of fit over 100 slots, 1e5 draws; the 5%
        // critical value for 99 degrees of freedom is 123.2.
        let mut b = ReplayBuffer::new(1, 100).unwrap();
        for i in 0..250 {
            b.push(&[i as f32], ActionIndex::STRAIGHT, &[0.0], 0.0).unwrap();
        }
        let mut counts = [0usize; 100];
        for k in b.sample_indices(&mut Rng::new(42), 100_000) {
            counts[k] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 123.2, "chi2 {chi2}");
    }

    #[test]
    fn schedule_endpoints() {
        let s = AnnealSchedule::default();
        assert_eq!(s.gamma(0, 100), 0.85);
        assert!((s.gamma(25, 100) - (0.85 + 0.5 * (0.9999 - 0.85))).abs() < 1e-12);
        assert!((s.gamma(50, 100) - 0.9999).abs() < 1e-12);
        assert!((s.gamma(99, 100) - 0.9999).abs() < 1e-12);
        assert_eq!(s.epsilon(0, 100), 1.0);
        assert!((s.epsilon(80, 100) - 0.05).abs() < 1e-12);
        assert!(AnnealSchedule::fixed_gamma(1.0).validate().is_err());
    }

    #[test]
    fn zero_updates_returns_fresh_critic() {
        let p = DubinsParams::default();
        let cfg = CriticConfig {
            updates: 0,
            ..CriticConfig::default()
        };
        let c = train_priv_critic(&p, &cfg, 5).unwrap();
        let fresh = Mlp::new(
            NetSpec::new(critic_arch(4, &cfg.hidden, Activation::Identity)).unwrap(),
            &mut Rng::new(5).derive(0),
        );
        assert_eq!(c.online, fresh);
        assert_eq!(c.target, fresh);
    }

    #[test]
    fn short_priv_training_is_deterministic_and_bounded() {
        let p = DubinsParams::default();
        let cfg = CriticConfig {
            hidden: vec![16, 16],
            updates: 300,
            warmup: 64,
            buffer_capacity: 500,
            target_sync_every: 50,
            ..CriticConfig::default()
        };
        let a = train_priv_critic(&p, &cfg, 3).unwrap();
        let b = train_priv_critic(&p, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.report.final_loss.is_finite());
        assert_eq!(a.report.transitions, 64 + 300);
    }

    #[test]
    fn checkpoint_round_trips() {
        let c = fixed_critic([0.1, 0.2, 0.3]);
        let ck = Checkpoint::decode(&c.to_checkpoint("critic_priv", json!({})).encode()).unwrap();
        let back = SafetyCritic::from_checkpoint(&ck, "critic_priv").unwrap();
        assert_eq!(back.online, c.online);
        assert_eq!(back.kind, c.kind);

        let spec = NetSpec::new(critic_arch(4, &[8], Activation::Sigmoid)).unwrap();
        let r = RiskCritic::new(0.9, ActionSet::FULL, Mlp::new(spec, &mut Rng::new(1))).unwrap();
        let back = RiskCritic::from_checkpoint(&Checkpoint::decode(&r.to_checkpoint(json!({})).encode()).unwrap()).unwrap();
        assert_eq!(back.online, r.online);
        assert_eq!(back.gamma, 0.9);
        let z = LatentState { z: vec![5.0, -3.0, 0.0, 1.0] };
        assert!(r.risks(&z).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
