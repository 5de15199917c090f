//! Episodic double-DQN training of the shared message-passing model.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{
    self, agent_features, argmax, build_action_table, q_values, select_actions, ActionTable, AgentGraph, Features,
    GnnError, Mode, MpnnParams,
};
use crate::netsim::{EcnConfig, SimConfig, SimError, Simulation};
use crate::nn::{clip_global_norm, Adam, AdamConfig, NnError, UpdateOutcome};
use crate::topo::Topology;
use crate::workload::{generate, TrafficSpec, WorkloadError};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("cannot sample {want} items from a buffer holding {have}")]
    Sample { want: usize, have: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at episode {episode}, step {step}")]
    NonFiniteLoss { episode: usize, step: usize, last_good: Box<MpnnParams> },
    #[error("agent {agent} diverged at episode {episode}")]
    AgentDiverged { episode: usize, agent: usize },
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w1: 0.7, w2: 0.3 }
    }
}

/// `w1 * (1 - q) + w2 * u` on inputs clamped to [0, 1]; the flag reports
/// whether clamping was needed.
pub fn reward(q_norm: f64, u: f64, w: &RewardWeights) -> (f64, bool) {
    let q = q_norm.clamp(0.0, 1.0);
    let uu = u.clamp(0.0, 1.0);
    let clamped = q != q_norm || uu != u;
    (w.w1 * (1.0 - q) + w.w2 * uu, clamped)
}

/// One global step: every agent's features, action and reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<Features>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_features: Vec<Features>,
    pub terminal: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<(), RlError> {
        let n = self.features.len();
        if self.actions.len() != n || self.rewards.len() != n || self.next_features.len() != n {
            return Err(RlError::Shape(format!(
                "{} features, {} actions, {} rewards, {} next features",
                n,
                self.actions.len(),
                self.rewards.len(),
                self.next_features.len()
            )));
        }
        Ok(())
    }
}

/// Binary sum tree over leaf priorities.
#[derive(Debug, Clone)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn set(&mut self, i: usize, p: f64) {
        let mut k = i + self.leaves;
        self.nodes[k] = p;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.leaves]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative interval contains `x`.
    fn find(&self, mut x: f64, len: usize) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if x < left {
                k *= 2;
            } else {
                x -= left;
                k = 2 * k + 1;
            }
        }
        (k - self.leaves).min(len - 1)
    }
}

/// Sampled indices with importance weights (all 1 in uniform mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Fixed-capacity ring buffer with optional proportional prioritization.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
    tree: Option<SumTree>,
    alpha: f64,
    max_priority: f64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0, tree: None, alpha: 1.0, max_priority: 1.0 }
    }

    /// Sampling probability proportional to `priority^alpha`.
    pub fn with_priorities(capacity: usize, alpha: f64) -> Self {
        let mut b = Self::new(capacity);
        b.tree = Some(SumTree::new(capacity));
        b.alpha = alpha;
        b
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_prioritized(&self) -> bool {
        self.tree.is_some()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// Overwrites the oldest entry once full. New entries get the largest
    /// priority seen so far.
    pub fn push(&mut self, t: T) {
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.next = (slot + 1) % self.capacity;
        let p = self.max_priority.powf(self.alpha);
        if let Some(tree) = self.tree.as_mut() {
            tree.set(slot, p);
        }
    }

    /// Raw priority of entry `i`, if prioritized.
    pub fn priority(&self, i: usize) -> Option<f64> {
        self.tree.as_ref().map(|t| t.get(i))
    }

    /// Sets raw priorities; the stored value is `priority^alpha`.
    pub fn set_priorities(&mut self, indices: &[usize], priorities: &[f64]) {
        if let Some(tree) = self.tree.as_mut() {
            for (&i, &p) in indices.iter().zip(priorities) {
                let p = p.max(1e-6);
                self.max_priority = self.max_priority.max(p);
                tree.set(i, p.powf(self.alpha));
            }
        }
    }

    /// Draws `n` entries with replacement. `beta` sets the importance-weight
    /// exponent in prioritized mode; weights are normalized by their maximum.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R, beta: f64) -> Result<Sample, RlError> {
        let len = self.items.len();
        if len == 0 || n > len {
            return Err(RlError::Sample { want: n, have: len });
        }
        match &self.tree {
            None => Ok(Sample { indices: (0..n).map(|_| rng.gen_range(0..len)).collect(), weights: vec![1.0; n] }),
            Some(tree) => {
                let total = tree.total();
                let indices: Vec<usize> = (0..n).map(|_| tree.find(rng.gen::<f64>() * total, len)).collect();
                let w: Vec<f64> = indices.iter().map(|&i| (len as f64 * tree.get(i) / total).powf(-beta)).collect();
                let wmax = w.iter().cloned().fold(f64::MIN, f64::max);
                Ok(Sample { indices, weights: w.iter().map(|x| x / wmax).collect() })
            }
        }
    }
}

/// Double-Q regression targets, per transition and agent.
pub fn td_targets(
    online: &MpnnParams,
    target: &MpnnParams,
    g: &AgentGraph,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<Vec<f64>>, RlError> {
    if batch.is_empty() {
        return Err(RlError::Shape("empty batch".into()));
    }
    batch
        .iter()
        .map(|t| {
            t.validate()?;
            if t.features.len() != g.len() {
                return Err(RlError::Shape(format!("{} agents in transition, {} in graph", t.features.len(), g.len())));
            }
            if t.terminal {
                return Ok(t.rewards.clone());
            }
            let q_on = q_values(online, g, &t.next_features)?;
            let q_tg = q_values(target, g, &t.next_features)?;
            Ok(double_q(&t.rewards, &q_on, &q_tg, gamma))
        })
        .collect()
}

/// `r + gamma * q_target[argmax q_online]` per agent.
pub fn double_q(rewards: &[f64], q_online: &[Vec<f64>], q_target: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(q_online.iter().zip(q_target))
        .map(|(r, (qo, qt))| r + gamma * qt[argmax(qo).expect("non-empty Q-vector")])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episodes over which epsilon decays linearly.
    pub eps_decay_frac: f64,
    pub batch_size: usize,
    /// Gradient steps between target-network copies.
    pub target_sync: usize,
    pub episodes: usize,
    /// Environment steps between gradient steps.
    pub train_every: usize,
    pub buffer_capacity: usize,
    pub prioritized: bool,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub rounds: usize,
    pub reward: RewardWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_frac: 0.6,
            batch_size: 16,
            target_sync: 50,
            episodes: 60,
            train_every: 5,
            buffer_capacity: 10_000,
            prioritized: false,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            grad_clip: Some(10.0),
            rounds: gnn::DEFAULT_ROUNDS,
            reward: RewardWeights::default(),
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// One gradient step per environment step with a larger batch; suits
    /// small environments where simulation is cheap.
    pub fn per_step() -> Self {
        Self { gamma: 0.95, batch_size: 32, target_sync: 100, episodes: 200, train_every: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if (self.reward.w1 + self.reward.w2 - 1.0).abs() > 1e-9 || self.reward.w1 < 0.0 || self.reward.w2 < 0.0 {
            return bad("reward weights must be non-negative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.train_every == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, target_sync, train_every and buffer_capacity must be positive");
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size exceeds buffer_capacity");
        }
        Ok(())
    }

    /// Exploration rate for episode `ep`.
    pub fn epsilon(&self, ep: usize) -> f64 {
        let decay = ((self.eps_decay_frac * self.episodes as f64).round() as usize).max(1);
        if ep >= decay {
            self.eps_end
        } else {
            self.eps_start + (self.eps_end - self.eps_start) * ep as f64 / decay as f64
        }
    }

    /// Importance-weight exponent, annealed to 1 over training.
    pub fn beta(&self, ep: usize) -> f64 {
        let f = ep as f64 / self.episodes.max(1) as f64;
        self.per_beta_start + (1.0 - self.per_beta_start) * f
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub features: Vec<Features>,
    pub rewards: Vec<f64>,
    /// No bootstrapping from `features`.
    pub terminal: bool,
    /// The episode is over.
    pub done: bool,
}

/// A multi-agent episodic environment over a fixed agent graph.
pub trait Environment {
    fn graph(&self) -> &AgentGraph;
    fn n_actions(&self) -> usize;
    /// Starts episode `episode` and returns the initial features.
    fn reset(&mut self, episode: usize) -> Result<Vec<Features>, RlError>;
    fn step(&mut self, actions: &[usize]) -> Result<Step, RlError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    /// Mean TD loss over the episode's gradient steps, if any ran.
    pub loss: Option<f64>,
    pub epsilon: f64,
}

pub fn write_log_csv<W: Write>(log: &[EpisodeLog], mut out: W) -> Result<(), RlError> {
    writeln!(out, "episode,mean_reward,loss,epsilon")?;
    for r in log {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.episode, r.mean_reward, loss, r.epsilon)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MpnnParams,
    pub log: Vec<EpisodeLog>,
    pub gradient_steps: u64,
    pub skipped_updates: u64,
}

/// One gradient step on a sampled batch. Returns the weighted mean squared
/// TD error and per-transition mean absolute TD errors.
#[allow(clippy::too_many_arguments)]
fn gradient_step(
    params: &mut MpnnParams,
    target: &MpnnParams,
    g: &AgentGraph,
    batch: &[&Transition],
    weights: &[f64],
    gamma: f64,
    grad_clip: Option<f64>,
    opt: &mut Adam,
) -> Result<(f64, Vec<f64>, UpdateOutcome), RlError> {
    let targets = td_targets(params, target, g, batch, gamma)?;
    let n_agents = g.len();
    let scale = 1.0 / (batch.len() * n_agents) as f64;
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    let mut td_abs = Vec::with_capacity(batch.len());
    for ((t, y), &w) in batch.iter().zip(&targets).zip(weights) {
        let cache = gnn::forward_cached(params, g, &t.features)?;
        let mut dq = vec![vec![0.0; params.n_actions()]; n_agents];
        let mut abs = 0.0;
        for v in 0..n_agents {
            let a = t.actions[v];
            let err = cache.q[v][a] - y[v];
            loss += w * err * err * scale;
            dq[v][a] = 2.0 * w * err * scale;
            abs += err.abs();
        }
        td_abs.push(abs / n_agents as f64);
        gnn::backward(params, g, &cache, &dq, &mut grads)?;
    }
    if let Some(c) = grad_clip {
        clip_global_norm(&mut grads.tensors_mut(), c);
    }
    if !loss.is_finite() {
        return Ok((loss, td_abs, UpdateOutcome::SkippedNonFinite));
    }
    let outcome = opt.update(&mut params.tensors_mut(), &grads.tensors())?;
    Ok((loss, td_abs, outcome))
}

/// Trains a fresh model on `env`. Deterministic in `cfg.seed`.
pub fn train<E: Environment + ?Sized>(env: &mut E, cfg: &TrainConfig) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MpnnParams::init(env.n_actions(), cfg.rounds, &mut rng);
    let mut target = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Adam::new(cfg.adam, &shapes);
    let mut buffer = if cfg.prioritized {
        ReplayBuffer::with_priorities(cfg.buffer_capacity, cfg.per_alpha)
    } else {
        ReplayBuffer::new(cfg.buffer_capacity)
    };
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut grad_steps = 0u64;
    for ep in 0..cfg.episodes {
        let eps = cfg.epsilon(ep);
        let mut feats = env.reset(ep)?;
        let (mut reward_sum, mut loss_sum, mut n_loss, mut t) = (0.0, 0.0, 0usize, 0usize);
        loop {
            let qs = q_values(&params, env.graph(), &feats)?;
            let actions = select_actions(&qs, Mode::Epsilon(eps, &mut rng))?;
            let step = env.step(&actions)?;
            reward_sum += step.rewards.iter().sum::<f64>() / step.rewards.len().max(1) as f64;
            let done = step.done;
            let next = step.features.clone();
            buffer.push(Transition {
                features: feats,
                actions,
                rewards: step.rewards,
                next_features: step.features,
                terminal: step.terminal,
            });
            t += 1;
            if buffer.len() >= cfg.batch_size && t % cfg.train_every == 0 {
                let sample = buffer.sample(cfg.batch_size, &mut rng, cfg.beta(ep))?;
                let batch: Vec<&Transition> = sample.indices.iter().map(|&i| buffer.get(i)).collect();
                let last_good = params.clone();
                let (loss, td, outcome) = gradient_step(
                    &mut params,
                    &target,
                    env.graph(),
                    &batch,
                    &sample.weights,
                    cfg.gamma,
                    cfg.grad_clip,
                    &mut opt,
                )?;
                if !loss.is_finite() {
                    return Err(RlError::NonFiniteLoss { episode: ep, step: t, last_good: Box::new(last_good) });
                }
                if outcome == UpdateOutcome::Applied {
                    grad_steps += 1;
                    if grad_steps.is_multiple_of(cfg.target_sync as u64) {
                        target = params.clone();
                    }
                }
                buffer.set_priorities(&sample.indices, &td);
                loss_sum += loss;
                n_loss += 1;
            }
            feats = next;
            if done {
                break;
            }
        }
        let row = EpisodeLog {
            episode: ep,
            mean_reward: reward_sum / t.max(1) as f64,
            loss: (n_loss > 0).then(|| loss_sum / n_loss as f64),
            epsilon: eps,
        };
        log::info!("episode {} reward {:.4} loss {:?} eps {:.3}", ep, row.mean_reward, row.loss, eps);
        log.push(row);
    }
    params.message.check_finite()?;
    params.update.check_finite()?;
    params.readout.check_finite()?;
    Ok(TrainOutcome { params, log, gradient_steps: grad_steps, skipped_updates: opt.skipped })
}

/// Degenerate environment: reward 1 for one fixed action, 0 otherwise,
/// independent of state. Features are uniform noise and every step is
/// terminal, so the optimal Q-values are exactly 1 and 0.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    graph: AgentGraph,
    n_actions: usize,
    best: usize,
    steps: usize,
    seed: u64,
    t: usize,
    rng: ChaCha8Rng,
}

impl BanditEnv {
    /// `n_agents` on a directed ring.
    pub fn new(n_agents: usize, n_actions: usize, best: usize, steps: usize, seed: u64) -> Self {
        assert!(best < n_actions && steps > 0 && n_agents > 0);
        let ingress = (0..n_agents).map(|v| if n_agents > 1 { vec![(v + n_agents - 1) % n_agents] } else { vec![] }).collect();
        Self {
            graph: AgentGraph::from_ingress(ingress),
            n_actions,
            best,
            steps,
            seed,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn best(&self) -> usize {
        self.best
    }

    pub fn random_features(&mut self) -> Vec<Features> {
        let r = &mut self.rng;
        (0..self.graph.len()).map(|_| std::array::from_fn(|_| r.gen::<f64>())).collect()
    }
}

impl Environment for BanditEnv {
    fn graph(&self) -> &AgentGraph {
        &self.graph
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn reset(&mut self, episode: usize) -> Result<Vec<Features>, RlError> {
        self.t = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ (episode as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Ok(self.random_features())
    }

    fn step(&mut self, actions: &[usize]) -> Result<Step, RlError> {
        if actions.len() != self.graph.len() {
            return Err(RlError::Shape(format!("{} actions for {} agents", actions.len(), self.graph.len())));
        }
        self.t += 1;
        let rewards = actions.iter().map(|&a| if a == self.best { 1.0 } else { 0.0 }).collect();
        Ok(Step { features: self.random_features(), rewards, terminal: true, done: self.t >= self.steps })
    }
}

/// The simulated fabric as an environment. Episode `e` replays the traffic
/// spec with seed `traffic.seed + e`.
#[derive(Debug, Clone)]
pub struct NetEnv {
    topo: Topology,
    graph: AgentGraph,
    table: ActionTable,
    traffic: TrafficSpec,
    sim_cfg: SimConfig,
    weights: RewardWeights,
    sim: Option<Simulation>,
    t: usize,
    clamped: u64,
}

impl NetEnv {
    pub fn new(topo: Topology, traffic: TrafficSpec, sim_cfg: SimConfig, weights: RewardWeights) -> Result<Self, RlError> {
        sim_cfg.validate()?;
        let graph = AgentGraph::from_topology(&topo)?;
        Ok(Self {
            topo,
            graph,
            table: build_action_table(),
            traffic,
            sim_cfg,
            weights,
            sim: None,
            t: 0,
            clamped: 0,
        })
    }

    pub fn table(&self) -> &ActionTable {
        &self.table
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn sim(&self) -> Option<&Simulation> {
        self.sim.as_ref()
    }

    /// Rewards whose inputs had to be clamped so far.
    pub fn clamped_rewards(&self) -> u64 {
        self.clamped
    }

    /// Starts a run on the trace generated with `seed`.
    pub fn reset_seed(&mut self, seed: u64) -> Result<Vec<Features>, RlError> {
        let spec = TrafficSpec { seed, ..self.traffic.clone() };
        let trace = generate(&self.topo, &spec)?;
        let cfg = SimConfig { seed, ..self.sim_cfg.clone() };
        let sim = Simulation::new(&self.topo, trace, cfg, EcnConfig { k_min: 100e3, k_max: 400e3, p_max: 0.25 })?;
        let f = agent_features(&sim);
        self.sim = Some(sim);
        self.t = 0;
        Ok(f)
    }
}

impl Environment for NetEnv {
    fn graph(&self) -> &AgentGraph {
        &self.graph
    }

    fn n_actions(&self) -> usize {
        self.table.len()
    }

    fn reset(&mut self, episode: usize) -> Result<Vec<Features>, RlError> {
        self.reset_seed(self.traffic.seed.wrapping_add(episode as u64))
    }

    /// Applies one configuration per agent, advances one agent interval and
    /// rewards each agent from its end-of-interval observation.
    fn step(&mut self, actions: &[usize]) -> Result<Step, RlError> {
        let configs = self.table.resolve(actions)?;
        let sim = self.sim.as_mut().ok_or_else(|| RlError::Config("step before reset".into()))?;
        sim.apply_actions(&configs)?;
        sim.run_interval()?;
        let obs = sim.observe_agents();
        let mut rewards = Vec::with_capacity(obs.len());
        for o in &obs {
            let (r, c) = reward(o.queue, o.utilization, &self.weights);
            self.clamped += u64::from(c);
            rewards.push(r);
        }
        self.t += 1;
        let end = self.t >= self.sim_cfg.steps_per_episode();
        Ok(Step { features: agent_features(sim), rewards, terminal: end, done: end })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::build_clos;
    use crate::workload::builtin_cdf;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(reward(0.0, 1.0, &w), (1.0, false));
        assert_eq!(reward(1.0, 0.0, &w), (0.0, false));
        assert!((reward(0.5, 0.5, &w).0 - 0.5).abs() < 1e-15);
        assert_eq!(reward(1.5, -0.2, &w), (0.0, true));
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(4);
        for i in 0..6 {
            b.push(i);
        }
        assert_eq!(b.len(), 4);
        let mut items: Vec<i32> = (0..4).map(|i| *b.get(i)).collect();
        items.sort();
        assert_eq!(items, vec![2, 3, 4, 5]);
    }

    #[test]
    fn empty_or_short_buffer_cannot_be_sampled() {
        let b: ReplayBuffer<u8> = ReplayBuffer::new(4);
        assert!(matches!(b.sample(1, &mut rng(0), 1.0), Err(RlError::Sample { want: 1, have: 0 })));
    }

    #[test]
    fn uniform_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.push(i);
        }
        let n = 100_000;
        let mut r = rng(1);
        let mut c = [0usize; 10];
        for _ in 0..n / 10 {
            let s = b.sample(10, &mut r, 1.0).unwrap();
            assert!(s.weights.iter().all(|&w| w == 1.0));
            s.indices.iter().for_each(|&i| c[i] += 1);
        }
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        assert!(c.iter().all(|&k| (k as f64 - 0.1 * n as f64).abs() < 3.0 * sigma), "{c:?}");
    }

    #[test]
    fn priorities_set_sampling_ratio() {
        let mut b = ReplayBuffer::with_priorities(2, 1.0);
        b.push('a');
        b.push('b');
        b.set_priorities(&[0, 1], &[1.0, 3.0]);
        let n = 100_000;
        let mut r = rng(2);
        let mut ones = 0.0;
        for _ in 0..n / 2 {
            let s = b.sample(2, &mut r, 1.0).unwrap();
            ones += s.indices.iter().filter(|&&i| i == 1).count() as f64;
            // the rarer entry carries the largest weight
            if let Some(k) = s.indices.iter().position(|&i| i == 0) {
                assert_eq!(s.weights[k], 1.0);
            }
        }
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((ones - 0.75 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn double_q_hand_value() {
        let mut qo = vec![0.0; 5];
        qo[3] = 9.0;
        let mut qt = vec![2.0; 5];
        qt[3] = 1.0;
        let y = double_q(&[0.5], &[qo], &[qt], 0.95);
        assert!((y[0] - 1.45).abs() < 1e-12);
    }

    #[test]
    fn terminal_target_is_reward_and_same_net_is_max() {
        let p = MpnnParams::init(120, 2, &mut rng(3));
        let g = AgentGraph::from_ingress(vec![vec![1], vec![0]]);
        let mut t = Transition {
            features: vec![[0.1; 9]; 2],
            actions: vec![0, 1],
            rewards: vec![0.4, 0.2],
            next_features: vec![[0.2; 9]; 2],
            terminal: true,
        };
        assert_eq!(td_targets(&p, &p, &g, &[&t], 0.95).unwrap()[0], vec![0.4, 0.2]);
        t.terminal = false;
        let y = td_targets(&p, &p, &g, &[&t], 0.95).unwrap();
        let q = q_values(&p, &g, &t.next_features).unwrap();
        for v in 0..2 {
            let m = q[v].iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(y[0][v], t.rewards[v] + 0.95 * m);
        }
    }

    #[test]
    fn mismatched_transition_is_rejected() {
        let p = MpnnParams::init(4, 1, &mut rng(3));
        let g = AgentGraph::from_ingress(vec![vec![], vec![]]);
        let t = Transition {
            features: vec![[0.0; 9]; 2],
            actions: vec![0],
            rewards: vec![0.0, 0.0],
            next_features: vec![[0.0; 9]; 2],
            terminal: false,
        };
        assert!(matches!(td_targets(&p, &p, &g, &[&t], 0.9), Err(RlError::Shape(_))));
        assert!(matches!(td_targets(&p, &p, &g, &[], 0.9), Err(RlError::Shape(_))));
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = TrainConfig { episodes: 100, ..TrainConfig::default() };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(30) - (1.0 - 0.95 * 0.5)).abs() < 1e-12);
        assert_eq!(cfg.epsilon(60), 0.05);
        assert_eq!(cfg.epsilon(99), 0.05);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let c = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { reward: RewardWeights { w1: 0.5, w2: 0.6 }, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    fn bandit_cfg(seed: u64) -> TrainConfig {
        TrainConfig { episodes: 200, seed, ..TrainConfig::per_step() }
    }

    #[test]
    fn bandit_training_finds_the_best_action() {
        let mut env = BanditEnv::new(3, 120, 37, 5, 4);
        let out = train(&mut env, &bandit_cfg(4)).unwrap();
        let f = env.random_features();
        let a = gnn::greedy_actions(&q_values(&out.params, env.graph(), &f).unwrap()).unwrap();
        assert_eq!(a, vec![37; 3]);
        assert_eq!(out.log.len(), 200);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { episodes: 20, ..bandit_cfg(5) };
        let run = || {
            let mut env = BanditEnv::new(3, 10, 2, 4, 5);
            let out = train(&mut env, &cfg).unwrap();
            let mut buf = Vec::new();
            write_log_csv(&out.log, &mut buf).unwrap();
            (buf, out.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn net_env_runs_fixed_length_episodes() {
        let t = build_clos(4, 2, 2, 25e9, 100e9, 1e-6).unwrap();
        let traffic = TrafficSpec { cdf: builtin_cdf("fb_hadoop").unwrap(), load: 0.6, duration: 2e-3, incast: None, seed: 3 };
        let sim = SimConfig { episode: 2e-3, ..SimConfig::default() };
        let mut env = NetEnv::new(t, traffic, sim, RewardWeights::default()).unwrap();
        let f0 = env.reset(0).unwrap();
        assert!(f0.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        let n = env.graph().len();
        let mut steps = 0;
        loop {
            let s = env.step(&vec![0; n]).unwrap();
            steps += 1;
            assert!(s.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
            assert!(s.features.iter().all(|x| x.iter().all(|v| (0.0..=1.0).contains(v))));
            if s.done {
                break;
            }
        }
        assert_eq!(steps, 20);
        assert!(env.sim().unwrap().port(env.sim().unwrap().agent_links()[0]).ecn.unwrap() == env.table().get(0).unwrap());
    }
}
