//! Comparison policies: a capacity-scaled static ECN configuration and
//! independently trained per-port DQN agents ("ACC-like") that share neither
//! parameters nor messages.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gnn::{argmax, ActionTable, Features, GnnError, FEATURE_DIM, HIDDEN_DIM};
use crate::harness::{self, HarnessError, MetricsReport, Policy, RunOptions, ScenarioSpec};
use crate::netsim::EcnConfig;
use crate::nn::{clip_global_norm, Adam, Mlp, MlpCheckpoint, UpdateOutcome};
use crate::rl::{EpisodeLog, Environment, ReplayBuffer, RlError, TrainConfig};

/// Marking probability at `k_max` for the static configuration.
pub const STATIC_P_MAX: f64 = 0.25;
const REF_CAPACITY: f64 = 25e9;

/// 100 KB / 400 KB thresholds at 25 Gbps, scaled linearly with capacity.
pub fn static_ecn(link_capacity: f64, p_max: f64) -> EcnConfig {
    let s = link_capacity / REF_CAPACITY;
    EcnConfig { k_min: 100e3 * s, k_max: 400e3 * s, p_max }
}

/// One agent's experience: local features only.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTransition {
    pub x: Features,
    pub action: usize,
    pub reward: f64,
    pub next_x: Features,
    pub terminal: bool,
}

/// A single port's learner: online and target networks, optimizer, replay
/// buffer and exploration RNG, none of them shared.
#[derive(Debug, Clone)]
pub struct IndependentLearner {
    pub net: Mlp,
    target: Mlp,
    opt: Adam,
    buffer: ReplayBuffer<LocalTransition>,
    rng: ChaCha8Rng,
    grad_steps: u64,
}

impl IndependentLearner {
    pub fn new(n_actions: usize, cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::init(&[FEATURE_DIM, HIDDEN_DIM, n_actions], &mut rng);
        let buffer = if cfg.prioritized {
            ReplayBuffer::with_priorities(cfg.buffer_capacity, cfg.per_alpha)
        } else {
            ReplayBuffer::new(cfg.buffer_capacity)
        };
        Self { opt: Adam::for_mlp(cfg.adam, &net), target: net.clone(), net, buffer, rng, grad_steps: 0 }
    }

    pub fn act(&mut self, x: &Features, eps: f64) -> Result<usize, RlError> {
        let q = self.net.forward(x)?;
        if self.rng.gen::<f64>() < eps {
            Ok(self.rng.gen_range(0..q.len()))
        } else {
            Ok(argmax(&q).expect("non-empty Q-vector"))
        }
    }

    pub fn observe(&mut self, t: LocalTransition) {
        self.buffer.push(t);
    }

    /// One double-Q gradient step; `None` until the buffer holds a batch.
    pub fn learn(&mut self, cfg: &TrainConfig, beta: f64) -> Result<Option<f64>, RlError> {
        if self.buffer.len() < cfg.batch_size {
            return Ok(None);
        }
        let sample = self.buffer.sample(cfg.batch_size, &mut self.rng, beta)?;
        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = self.net.zero_grads();
        let mut loss = 0.0;
        let mut td = Vec::with_capacity(sample.indices.len());
        for (&i, &w) in sample.indices.iter().zip(&sample.weights) {
            let t = self.buffer.get(i);
            let y = if t.terminal {
                t.reward
            } else {
                let a = argmax(&self.net.forward(&t.next_x)?).expect("non-empty Q-vector");
                t.reward + cfg.gamma * self.target.forward(&t.next_x)?[a]
            };
            let (q, tr) = self.net.forward_trace(&t.x)?;
            let err = q[t.action] - y;
            loss += w * err * err * scale;
            let mut dq = vec![0.0; q.len()];
            dq[t.action] = 2.0 * w * err * scale;
            self.net.backward_trace(&tr, &dq, &mut grads)?;
            td.push(err.abs());
        }
        if !loss.is_finite() {
            return Ok(Some(loss));
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads.tensors_mut(), c);
        }
        if self.opt.update_mlp(&mut self.net, &grads)? == UpdateOutcome::Applied {
            self.grad_steps += 1;
            if self.grad_steps.is_multiple_of(cfg.target_sync as u64) {
                self.target = self.net.clone();
            }
        }
        self.buffer.set_priorities(&sample.indices, &td);
        Ok(Some(loss))
    }
}

/// One network per agent, in canonical agent order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentAgents {
    pub nets: Vec<Mlp>,
}

impl IndependentAgents {
    pub fn q_values(&self, features: &[Features]) -> Result<Vec<Vec<f64>>, GnnError> {
        if features.len() != self.nets.len() {
            return Err(GnnError::AgentCount { expected: self.nets.len(), got: features.len() });
        }
        self.nets.iter().zip(features).map(|(n, x)| Ok(n.forward(x)?)).collect()
    }

    pub fn n_params(&self) -> usize {
        self.nets.iter().map(Mlp::n_params).sum()
    }

    /// Writes `manifest.json` plus one `agent_NNN.json` per network.
    pub fn save(&self, dir: &Path, table: &ActionTable, seed: u64) -> Result<(), GnnError> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.nets.len());
        for (i, n) in self.nets.iter().enumerate() {
            let name = format!("agent_{i:03}.json");
            std::fs::write(dir.join(&name), serde_json::to_string(&MlpCheckpoint::new(n, seed)?)?)?;
            files.push(name);
        }
        let m = IndependentManifest { schema_version: crate::gnn::MODEL_SCHEMA, label: "ACC-like".into(), files, action_table: table.clone() };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ActionTable), GnnError> {
        let m: IndependentManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.schema_version != crate::gnn::MODEL_SCHEMA {
            return Err(GnnError::BadModel(format!("unsupported schema {}", m.schema_version)));
        }
        let nets = m
            .files
            .iter()
            .map(|f| {
                let ck: MlpCheckpoint = serde_json::from_str(&std::fs::read_to_string(dir.join(f))?)?;
                let net = ck.into_mlp()?;
                if net.n_in() != FEATURE_DIM || net.n_out() != m.action_table.len() {
                    return Err(GnnError::BadModel(format!("{f}: shape does not match the action table")));
                }
                Ok(net)
            })
            .collect::<Result<Vec<_>, GnnError>>()?;
        Ok((Self { nets }, m.action_table))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndependentManifest {
    schema_version: u32,
    label: String,
    files: Vec<String>,
    action_table: ActionTable,
}

#[derive(Debug, Clone)]
pub struct IndependentOutcome {
    pub agents: IndependentAgents,
    pub log: Vec<EpisodeLog>,
}

/// Per-agent learner seed.
fn agent_seed(seed: u64, v: usize) -> u64 {
    seed ^ (v as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f)
}

/// The same episodic loop as [`crate::rl::train`], but every agent trains its
/// own network on its own local features, actions and rewards.
pub fn train_independent<E: Environment + ?Sized>(env: &mut E, cfg: &TrainConfig) -> Result<IndependentOutcome, RlError> {
    cfg.validate()?;
    let n = env.graph().len();
    let mut learners: Vec<IndependentLearner> =
        (0..n).map(|v| IndependentLearner::new(env.n_actions(), cfg, agent_seed(cfg.seed, v))).collect();
    let mut log = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let eps = cfg.epsilon(ep);
        let beta = cfg.beta(ep);
        let mut feats = env.reset(ep)?;
        let (mut reward_sum, mut loss_sum, mut n_loss, mut t) = (0.0, 0.0, 0usize, 0usize);
        loop {
            let actions = learners.iter_mut().zip(&feats).map(|(l, x)| l.act(x, eps)).collect::<Result<Vec<_>, _>>()?;
            let step = env.step(&actions)?;
            reward_sum += step.rewards.iter().sum::<f64>() / n.max(1) as f64;
            t += 1;
            for (v, l) in learners.iter_mut().enumerate() {
                l.observe(LocalTransition {
                    x: feats[v],
                    action: actions[v],
                    reward: step.rewards[v],
                    next_x: step.features[v],
                    terminal: step.terminal,
                });
            }
            if t % cfg.train_every == 0 {
                let mut step_loss = 0.0;
                let mut trained = 0;
                for (v, l) in learners.iter_mut().enumerate() {
                    if let Some(loss) = l.learn(cfg, beta)? {
                        if !loss.is_finite() {
                            return Err(RlError::AgentDiverged { episode: ep, agent: v });
                        }
                        step_loss += loss;
                        trained += 1;
                    }
                }
                if trained > 0 {
                    loss_sum += step_loss / trained as f64;
                    n_loss += 1;
                }
            }
            feats = step.features;
            if step.done {
                break;
            }
        }
        log.push(EpisodeLog {
            episode: ep,
            mean_reward: reward_sum / t.max(1) as f64,
            loss: (n_loss > 0).then(|| loss_sum / n_loss as f64),
            epsilon: eps,
        });
    }
    Ok(IndependentOutcome { agents: IndependentAgents { nets: learners.into_iter().map(|l| l.net).collect() }, log })
}

/// Greedy rollout of `policy` over `scenario` with the harness metrics.
pub fn evaluate_policy(policy: &Policy, scenario: &ScenarioSpec, seeds: &[u64]) -> Result<MetricsReport, HarnessError> {
    Ok(harness::run(scenario, policy, seeds, &RunOptions::default())?.0)
}
