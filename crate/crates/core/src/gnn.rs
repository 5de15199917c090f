//! Message-passing ECN agent with one parameter set shared by every port.
//!
//! Each agent starts from its zero-padded feature vector, runs `k` rounds in
//! which it receives the hidden states of its ingress neighbors, aggregates
//! the per-neighbor messages with an elementwise min and max, and updates its
//! own state. A readout head turns the final state into Q-values over the ECN
//! action table.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{EcnConfig, PortState, Simulation, HISTORY_LEN};
use crate::nn::{Dense, Mlp, MlpGrads, NnError, Trace};
use crate::topo::{Topology, TopologyError};

pub const HIDDEN_DIM: usize = 24;
/// Observation history depth beyond the current interval.
pub const HISTORY: usize = HISTORY_LEN - 1;
pub const FEATURE_DIM: usize = 3 * HISTORY_LEN;
pub const DEFAULT_ROUNDS: usize = 2;
pub const MODEL_SCHEMA: u32 = 1;

/// Bytes per KB in the action grid.
pub const KB: f64 = 1000.0;
const K_MIN_KB: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 32.0];
const K_MAX_KB: [f64; 5] = [16.0, 32.0, 64.0, 128.0, 256.0];
const P_MAX: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 1.0];

/// `(u, q, ecn)` for the current interval, then the previous `HISTORY` ones.
pub type Features = [f64; FEATURE_DIM];

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("expected {expected} agents, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("feature vector of length {0} exceeds hidden dim {HIDDEN_DIM}")]
    FeatureTooLong(usize),
    #[error("empty Q-vector for agent {0}")]
    EmptyQ(usize),
    #[error("agent {receiver} round {round}: no message from {sender}")]
    Undelivered { receiver: usize, sender: usize, round: usize },
    #[error("agent {receiver} round {round}: unexpected message from {sender}")]
    Unexpected { receiver: usize, sender: usize, round: usize },
    #[error("bad model: {0}")]
    BadModel(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The 120 admissible RED configurations, in lexicographic
/// `(k_min, k_max, p_max)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTable {
    configs: Vec<EcnConfig>,
}

pub fn build_action_table() -> ActionTable {
    let mut configs = Vec::with_capacity(120);
    for &lo in &K_MIN_KB {
        for &hi in &K_MAX_KB {
            if lo > hi {
                continue;
            }
            for &p in &P_MAX {
                configs.push(EcnConfig { k_min: lo * KB, k_max: hi * KB, p_max: p });
            }
        }
    }
    ActionTable { configs }
}

impl ActionTable {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<EcnConfig> {
        self.configs.get(i).copied()
    }

    pub fn configs(&self) -> &[EcnConfig] {
        &self.configs
    }

    pub fn index_of(&self, c: &EcnConfig) -> Option<usize> {
        self.configs.iter().position(|x| x == c)
    }

    pub fn resolve(&self, actions: &[usize]) -> Result<Vec<EcnConfig>, GnnError> {
        actions
            .iter()
            .map(|&a| self.get(a).ok_or_else(|| GnnError::BadModel(format!("action {a} outside table of {}", self.len()))))
            .collect()
    }
}

/// Features of one port from its observation history (zeros before the
/// first observations exist).
pub fn port_features(p: &PortState) -> Features {
    let mut x = [0.0; FEATURE_DIM];
    for (j, o) in p.history().iter().take(HISTORY_LEN).enumerate() {
        x[3 * j] = o.utilization;
        x[3 * j + 1] = o.queue;
        x[3 * j + 2] = o.ecn_rate;
    }
    x
}

/// Features of every agent, in canonical agent order.
pub fn agent_features(sim: &Simulation) -> Vec<Features> {
    sim.agent_links().iter().map(|&l| port_features(sim.port(l))).collect()
}

pub fn init_hidden(x: &[f64]) -> Result<Vec<f64>, GnnError> {
    if x.len() > HIDDEN_DIM {
        return Err(GnnError::FeatureTooLong(x.len()));
    }
    let mut h = vec![0.0; HIDDEN_DIM];
    h[..x.len()].copy_from_slice(x);
    Ok(h)
}

/// Agent adjacency: `ingress[v]` lists the agents whose traffic enters `v`'s
/// switch, `egress[v]` the agents fed by `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGraph {
    ingress: Vec<Vec<usize>>,
    egress: Vec<Vec<usize>>,
}

impl AgentGraph {
    pub fn from_topology(t: &Topology) -> Result<Self, GnnError> {
        let ingress = t
            .agents()
            .iter()
            .map(|&a| {
                t.ingress_neighbors(a)?
                    .into_iter()
                    .map(|n| t.agent_index(n))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, TopologyError>>()?;
        Ok(Self::from_ingress(ingress))
    }

    /// Builds the graph from ingress lists; egress lists are derived.
    pub fn from_ingress(ingress: Vec<Vec<usize>>) -> Self {
        let mut egress = vec![Vec::new(); ingress.len()];
        for (v, ins) in ingress.iter().enumerate() {
            for &i in ins {
                egress[i].push(v);
            }
        }
        Self { ingress, egress }
    }

    pub fn len(&self) -> usize {
        self.ingress.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ingress.is_empty()
    }

    pub fn ingress(&self, v: usize) -> &[usize] {
        &self.ingress[v]
    }

    pub fn egress(&self, v: usize) -> &[usize] {
        &self.egress[v]
    }

    /// Messages exchanged per round.
    pub fn edge_count(&self) -> usize {
        self.ingress.iter().map(Vec::len).sum()
    }
}

/// The three shared networks and the number of message-passing rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnParams {
    pub message: Mlp,
    pub update: Mlp,
    pub readout: Mlp,
    pub rounds: usize,
}

/// Gradients of [`MpnnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnGrads {
    pub message: MlpGrads,
    pub update: MlpGrads,
    pub readout: MlpGrads,
}

impl MpnnGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.message.tensors();
        v.extend(self.update.tensors());
        v.extend(self.readout.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.message.tensors_mut();
        v.extend(self.update.tensors_mut());
        v.extend(self.readout.tensors_mut());
        v
    }

    pub fn clear(&mut self) {
        self.message.clear();
        self.update.clear();
        self.readout.clear();
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Elementwise min followed by elementwise max; zeros for an empty set.
/// Adding 0.0 folds a negative zero into +0.0 so the result does not depend
/// on the order of equal inputs.
fn aggregate(msgs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; 2 * HIDDEN_DIM];
    if let Some(first) = msgs.first() {
        let (lo, hi) = out.split_at_mut(HIDDEN_DIM);
        lo.copy_from_slice(first);
        hi.copy_from_slice(first);
        for m in &msgs[1..] {
            for j in 0..HIDDEN_DIM {
                lo[j] = lo[j].min(m[j]);
                hi[j] = hi[j].max(m[j]);
            }
        }
        out.iter_mut().for_each(|v| *v += 0.0);
    }
    out
}

impl MpnnParams {
    /// Fan-in uniform initialization of message 48-24-24, update 72-24-24
    /// (own state plus min and max aggregates) and readout 24-24-`n_actions`.
    pub fn init<R: Rng>(n_actions: usize, rounds: usize, rng: &mut R) -> Self {
        let h = HIDDEN_DIM;
        Self {
            message: Mlp::init(&[2 * h, h, h], rng),
            update: Mlp::init(&[3 * h, h, h], rng),
            readout: Mlp::init(&[h, h, n_actions], rng),
            rounds,
        }
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        let h = HIDDEN_DIM;
        self.message.validate()?;
        self.update.validate()?;
        self.readout.validate()?;
        let shapes = [
            (self.message.n_in(), 2 * h),
            (self.message.n_out(), h),
            (self.update.n_in(), 3 * h),
            (self.update.n_out(), h),
            (self.readout.n_in(), h),
        ];
        if shapes.iter().any(|(a, b)| a != b) {
            return Err(GnnError::BadModel("network shapes do not fit the hidden dimension".into()));
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.readout.n_out()
    }

    pub fn n_params(&self) -> usize {
        self.message.n_params() + self.update.n_params() + self.readout.n_params()
    }

    pub fn zero_grads(&self) -> MpnnGrads {
        MpnnGrads { message: self.message.zero_grads(), update: self.update.zero_grads(), readout: self.readout.zero_grads() }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.message.tensors();
        v.extend(self.update.tensors());
        v.extend(self.readout.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.message.tensors_mut();
        v.extend(self.update.tensors_mut());
        v.extend(self.readout.tensors_mut());
        v
    }

    fn message_out(&self, hv: &[f64], hi: &[f64]) -> Result<Vec<f64>, GnnError> {
        Ok(self.message.forward(&concat(hv, hi))?)
    }

    fn update_out(&self, hv: &[f64], m: &[f64]) -> Result<Vec<f64>, GnnError> {
        Ok(self.update.forward(&concat(hv, m))?)
    }
}

fn check_agents(g: &AgentGraph, n: usize) -> Result<(), GnnError> {
    if g.len() != n {
        return Err(GnnError::AgentCount { expected: g.len(), got: n });
    }
    Ok(())
}

/// One message-passing round over every agent.
pub fn mp_round(p: &MpnnParams, g: &AgentGraph, hiddens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, GnnError> {
    check_agents(g, hiddens.len())?;
    (0..g.len())
        .map(|v| {
            let hv = &hiddens[v];
            let msgs = g.ingress(v).iter().map(|&i| p.message_out(hv, &hiddens[i])).collect::<Result<Vec<_>, _>>()?;
            p.update_out(hv, &aggregate(&msgs))
        })
        .collect()
}

/// Q-values over the action table for every agent.
pub fn q_values(p: &MpnnParams, g: &AgentGraph, features: &[Features]) -> Result<Vec<Vec<f64>>, GnnError> {
    check_agents(g, features.len())?;
    let mut h = features.iter().map(|x| init_hidden(x)).collect::<Result<Vec<_>, _>>()?;
    for _ in 0..p.rounds {
        h = mp_round(p, g, &h)?;
    }
    h.iter().map(|hv| Ok(p.readout.forward(hv)?)).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(q: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in q.iter().enumerate() {
        match best {
            Some(b) if q[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub enum Mode<'a, R: Rng> {
    Greedy,
    /// Uniform random action with probability `eps`, greedy otherwise.
    Epsilon(f64, &'a mut R),
}

pub fn select_actions<R: Rng>(qs: &[Vec<f64>], mode: Mode<'_, R>) -> Result<Vec<usize>, GnnError> {
    let greedy = |v: usize, q: &Vec<f64>| argmax(q).ok_or(GnnError::EmptyQ(v));
    match mode {
        Mode::Greedy => qs.iter().enumerate().map(|(v, q)| greedy(v, q)).collect(),
        Mode::Epsilon(eps, rng) => qs
            .iter()
            .enumerate()
            .map(|(v, q)| {
                if q.is_empty() {
                    return Err(GnnError::EmptyQ(v));
                }
                if rng.gen::<f64>() < eps {
                    Ok(rng.gen_range(0..q.len()))
                } else {
                    greedy(v, q)
                }
            })
            .collect(),
    }
}

/// Greedy actions without an RNG.
pub fn greedy_actions(qs: &[Vec<f64>]) -> Result<Vec<usize>, GnnError> {
    select_actions::<rand_chacha::ChaCha8Rng>(qs, Mode::Greedy)
}

/// Hidden-state record sent from one agent to an egress neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub round: usize,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedOutcome {
    pub actions: Vec<usize>,
    pub messages_per_round: Vec<usize>,
}

/// A per-agent copy of the model that only sees its own features and its
/// mailbox.
struct Replica<'a> {
    id: usize,
    params: &'a MpnnParams,
    expected: &'a [usize],
    h: Vec<f64>,
    inbox: Vec<Message>,
}

impl Replica<'_> {
    fn absorb(&mut self, round: usize) -> Result<(), GnnError> {
        let mut by_sender: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for m in self.inbox.drain(..) {
            if m.round != round || !self.expected.contains(&m.sender) || by_sender.contains_key(&m.sender) {
                return Err(GnnError::Unexpected { receiver: self.id, sender: m.sender, round: m.round });
            }
            by_sender.insert(m.sender, m.payload);
        }
        let mut msgs = Vec::with_capacity(self.expected.len());
        for &s in self.expected {
            let hi = by_sender.get(&s).ok_or(GnnError::Undelivered { receiver: self.id, sender: s, round })?;
            msgs.push(self.params.message_out(&self.h, hi)?);
        }
        self.h = self.params.update_out(&self.h, &aggregate(&msgs))?;
        Ok(())
    }
}

/// Runs the model as independent replicas that exchange explicit messages,
/// one barrier per round, and returns each agent's greedy action.
pub fn distributed_run(p: &MpnnParams, g: &AgentGraph, features: &[Features]) -> Result<DistributedOutcome, GnnError> {
    check_agents(g, features.len())?;
    let mut replicas = (0..g.len())
        .map(|v| Ok(Replica { id: v, params: p, expected: g.ingress(v), h: init_hidden(&features[v])?, inbox: Vec::new() }))
        .collect::<Result<Vec<_>, GnnError>>()?;
    let mut counts = Vec::with_capacity(p.rounds);
    for round in 0..p.rounds {
        let outgoing: Vec<(usize, Message)> = replicas
            .iter()
            .flat_map(|r| {
                g.egress(r.id).iter().map(move |&to| (to, Message { sender: r.id, round, payload: r.h.clone() }))
            })
            .collect();
        counts.push(outgoing.len());
        for (to, m) in outgoing {
            replicas[to].inbox.push(m);
        }
        for r in replicas.iter_mut() {
            r.absorb(round)?;
        }
    }
    let actions = replicas
        .iter()
        .map(|r| {
            let q = p.readout.forward(&r.h)?;
            argmax(&q).ok_or(GnnError::EmptyQ(r.id))
        })
        .collect::<Result<Vec<_>, GnnError>>()?;
    Ok(DistributedOutcome { actions, messages_per_round: counts })
}

struct RoundCache {
    /// Per agent, per ingress edge.
    msg_traces: Vec<Vec<Trace>>,
    /// Per agent and component: index of the edge holding the min / max.
    argmin: Vec<[usize; HIDDEN_DIM]>,
    argmax: Vec<[usize; HIDDEN_DIM]>,
    upd_traces: Vec<Trace>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    rounds: Vec<RoundCache>,
    readout: Vec<Trace>,
    pub q: Vec<Vec<f64>>,
}

/// `q_values` that also records activations for [`backward`].
pub fn forward_cached(p: &MpnnParams, g: &AgentGraph, features: &[Features]) -> Result<ForwardCache, GnnError> {
    check_agents(g, features.len())?;
    let n = g.len();
    let mut h = features.iter().map(|x| init_hidden(x)).collect::<Result<Vec<_>, _>>()?;
    let mut rounds = Vec::with_capacity(p.rounds);
    for _ in 0..p.rounds {
        let mut rc = RoundCache {
            msg_traces: Vec::with_capacity(n),
            argmin: Vec::with_capacity(n),
            argmax: Vec::with_capacity(n),
            upd_traces: Vec::with_capacity(n),
        };
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            let mut traces = Vec::with_capacity(g.ingress(v).len());
            let mut msgs = Vec::with_capacity(g.ingress(v).len());
            for &i in g.ingress(v) {
                let (m, tr) = p.message.forward_trace(&concat(&h[v], &h[i]))?;
                msgs.push(m);
                traces.push(tr);
            }
            let mut amin = [0usize; HIDDEN_DIM];
            let mut amax = [0usize; HIDDEN_DIM];
            for (e, m) in msgs.iter().enumerate().skip(1) {
                for j in 0..HIDDEN_DIM {
                    if m[j] < msgs[amin[j]][j] {
                        amin[j] = e;
                    }
                    if m[j] > msgs[amax[j]][j] {
                        amax[j] = e;
                    }
                }
            }
            let (hv, tr) = p.update.forward_trace(&concat(&h[v], &aggregate(&msgs)))?;
            next.push(hv);
            rc.msg_traces.push(traces);
            rc.argmin.push(amin);
            rc.argmax.push(amax);
            rc.upd_traces.push(tr);
        }
        rounds.push(rc);
        h = next;
    }
    let mut readout = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for hv in &h {
        let (qv, tr) = p.readout.forward_trace(hv)?;
        q.push(qv);
        readout.push(tr);
    }
    Ok(ForwardCache { rounds, readout, q })
}

/// Accumulates into `grads` the parameter gradients of `sum_v dq[v] . q[v]`
/// and returns the gradient with respect to each agent's features.
///
/// Min/max gradients flow to the first edge attaining the extremum.
pub fn backward(
    p: &MpnnParams,
    g: &AgentGraph,
    cache: &ForwardCache,
    dq: &[Vec<f64>],
    grads: &mut MpnnGrads,
) -> Result<Vec<Features>, GnnError> {
    check_agents(g, dq.len())?;
    let n = g.len();
    let mut dh: Vec<Vec<f64>> = Vec::with_capacity(n);
    for v in 0..n {
        dh.push(p.readout.backward_trace(&cache.readout[v], &dq[v], &mut grads.readout)?);
    }
    for rc in cache.rounds.iter().rev() {
        let mut dprev = vec![vec![0.0; HIDDEN_DIM]; n];
        for v in 0..n {
            if dh[v].iter().all(|&d| d == 0.0) {
                continue;
            }
            let din = p.update.backward_trace(&rc.upd_traces[v], &dh[v], &mut grads.update)?;
            for j in 0..HIDDEN_DIM {
                dprev[v][j] += din[j];
            }
            let edges = g.ingress(v);
            if edges.is_empty() {
                continue;
            }
            let mut dmsg = vec![vec![0.0; HIDDEN_DIM]; edges.len()];
            for j in 0..HIDDEN_DIM {
                dmsg[rc.argmin[v][j]][j] += din[HIDDEN_DIM + j];
                dmsg[rc.argmax[v][j]][j] += din[2 * HIDDEN_DIM + j];
            }
            for (e, &i) in edges.iter().enumerate() {
                if dmsg[e].iter().all(|&d| d == 0.0) {
                    continue;
                }
                let dx = p.message.backward_trace(&rc.msg_traces[v][e], &dmsg[e], &mut grads.message)?;
                for j in 0..HIDDEN_DIM {
                    dprev[v][j] += dx[j];
                    dprev[i][j] += dx[HIDDEN_DIM + j];
                }
            }
        }
        dh = dprev;
    }
    Ok(dh
        .iter()
        .map(|d| {
            let mut x = [0.0; FEATURE_DIM];
            x.copy_from_slice(&d[..FEATURE_DIM]);
            x
        })
        .collect())
}

/// Serialized model: networks, dimensions, action table and the queue
/// normalization used to build features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub hidden_dim: usize,
    pub rounds: usize,
    pub history: usize,
    pub feature_dim: usize,
    pub queue_scale: f64,
    pub seed: u64,
    pub action_table: ActionTable,
    pub message: Vec<Dense>,
    pub update: Vec<Dense>,
    pub readout: Vec<Dense>,
}

impl ModelCheckpoint {
    pub fn new(p: &MpnnParams, table: &ActionTable, queue_scale: f64, seed: u64) -> Result<Self, GnnError> {
        p.validate()?;
        if table.len() != p.n_actions() {
            return Err(GnnError::BadModel(format!("{} actions vs readout width {}", table.len(), p.n_actions())));
        }
        Ok(Self {
            schema_version: MODEL_SCHEMA,
            hidden_dim: HIDDEN_DIM,
            rounds: p.rounds,
            history: HISTORY,
            feature_dim: FEATURE_DIM,
            queue_scale,
            seed,
            action_table: table.clone(),
            message: p.message.layers.clone(),
            update: p.update.layers.clone(),
            readout: p.readout.layers.clone(),
        })
    }

    pub fn params(&self) -> Result<(MpnnParams, ActionTable), GnnError> {
        if self.schema_version != MODEL_SCHEMA {
            return Err(GnnError::BadModel(format!("unsupported schema {}", self.schema_version)));
        }
        if self.hidden_dim != HIDDEN_DIM || self.feature_dim != FEATURE_DIM || self.history != HISTORY {
            return Err(GnnError::BadModel("dimensions differ from this build".into()));
        }
        let p = MpnnParams {
            message: Mlp::new(self.message.clone())?,
            update: Mlp::new(self.update.clone())?,
            readout: Mlp::new(self.readout.clone())?,
            rounds: self.rounds,
        };
        p.validate()?;
        if self.action_table.len() != p.n_actions() {
            return Err(GnnError::BadModel("action table does not match readout width".into()));
        }
        for c in self.action_table.configs() {
            c.validate().map_err(|e| GnnError::BadModel(e.to_string()))?;
        }
        Ok((p, self.action_table.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<(), GnnError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GnnError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::{build_clos, default_clos};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn random_features(n: usize, r: &mut ChaCha8Rng) -> Vec<Features> {
        (0..n).map(|_| std::array::from_fn(|_| r.gen::<f64>())).collect()
    }

    #[test]
    fn action_table_enumerates_the_grid() {
        let t = build_action_table();
        assert_eq!(t.len(), 120);
        let mut brute = 0;
        for lo in K_MIN_KB {
            for hi in K_MAX_KB {
                for _ in P_MAX {
                    brute += usize::from(lo <= hi);
                }
            }
        }
        assert_eq!(brute, 120);
        assert_eq!(t.get(0), Some(EcnConfig { k_min: 2e3, k_max: 16e3, p_max: 0.01 }));
        assert_eq!(t.get(119), Some(EcnConfig { k_min: 32e3, k_max: 256e3, p_max: 1.0 }));
        assert!(t.configs().iter().all(|c| !(c.k_min == 32e3 && c.k_max == 16e3)));
        let keys: Vec<_> = t.configs().iter().map(|c| (c.k_min, c.k_max, c.p_max)).collect();
        assert!(keys.windows(2).all(|w| w[0].partial_cmp(&w[1]) == Some(std::cmp::Ordering::Less)));
    }

    #[test]
    fn hidden_state_is_zero_padded() {
        assert_eq!(init_hidden(&[0.0; 9]).unwrap(), vec![0.0; 24]);
        let h = init_hidden(&[1.0; 9]).unwrap();
        assert_eq!(&h[..9], &[1.0; 9]);
        assert_eq!(&h[9..], &[0.0; 15]);
        assert!(matches!(init_hidden(&[0.0; 25]), Err(GnnError::FeatureTooLong(25))));
    }

    #[test]
    fn default_fabric_graph_matches_topology() {
        let t = default_clos();
        let g = AgentGraph::from_topology(&t).unwrap();
        assert_eq!(g.len(), 40);
        // 24 leaf->host and 8 leaf->spine agents hear 2 spines, 8 spine->leaf hear 4 leaves
        assert_eq!(g.edge_count(), 24 * 2 + 8 * 2 + 8 * 4);
        for v in 0..g.len() {
            for &i in g.ingress(v) {
                assert!(g.egress(i).contains(&v));
            }
        }
    }

    #[test]
    fn single_neighbor_aggregate_duplicates_message() {
        let m = vec![(0..24).map(|j| j as f64 - 3.5).collect::<Vec<_>>()];
        let a = aggregate(&m);
        assert_eq!(&a[..24], &m[0][..]);
        assert_eq!(&a[24..], &m[0][..]);
        assert_eq!(aggregate(&[]), vec![0.0; 48]);
    }

    #[test]
    fn empty_neighborhood_uses_zero_aggregate() {
        let p = MpnnParams::init(120, 1, &mut rng(1));
        let g = AgentGraph::from_ingress(vec![vec![]]);
        let h = vec![init_hidden(&[0.3; 9]).unwrap()];
        let out = mp_round(&p, &g, &h).unwrap();
        assert_eq!(out[0], p.update.forward(&concat(&h[0], &[0.0; 48])).unwrap());
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let p = MpnnParams::init(120, 2, &mut rng(2));
        let mut r = rng(3);
        let h: Vec<Vec<f64>> = (0..5).map(|_| (0..24).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let a = mp_round(&p, &AgentGraph::from_ingress(vec![vec![1, 2, 3, 4], vec![], vec![], vec![], vec![]]), &h).unwrap();
        let b = mp_round(&p, &AgentGraph::from_ingress(vec![vec![4, 2, 1, 3], vec![], vec![], vec![], vec![]]), &h).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn zero_rounds_depend_only_on_own_features() {
        let p = MpnnParams::init(120, 0, &mut rng(4));
        let t = build_clos(4, 2, 2, 25e9, 100e9, 1e-6).unwrap();
        let g = AgentGraph::from_topology(&t).unwrap();
        let mut f = random_features(g.len(), &mut rng(5));
        let a = q_values(&p, &g, &f).unwrap();
        f[1] = [0.9; 9];
        let b = q_values(&p, &g, &f).unwrap();
        for v in 0..g.len() {
            assert_eq!(a[v] == b[v], v != 1);
        }
    }

    #[test]
    fn symmetric_inputs_give_symmetric_outputs() {
        // spine->leaf agents in a full leaf-spine fabric are interchangeable
        let p = MpnnParams::init(120, 2, &mut rng(6));
        let t = build_clos(4, 2, 2, 25e9, 25e9, 1e-6).unwrap();
        let g = AgentGraph::from_topology(&t).unwrap();
        let q = q_values(&p, &g, &vec![[0.4; 9]; g.len()]).unwrap();
        let spine_leaf: Vec<usize> = t
            .agents()
            .iter()
            .enumerate()
            .filter(|(_, a)| t.node_id(t.links()[a.link()].src).starts_with("spine"))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(spine_leaf.len(), 4);
        for &v in &spine_leaf {
            assert_eq!(q[v], q[spine_leaf[0]]);
        }
    }

    #[test]
    fn relabeled_graph_gives_permuted_q_values() {
        let p = MpnnParams::init(120, 2, &mut rng(7));
        let t = build_clos(4, 2, 2, 25e9, 100e9, 1e-6).unwrap();
        let g = AgentGraph::from_topology(&t).unwrap();
        let n = g.len();
        let f = random_features(n, &mut rng(8));
        let perm: Vec<usize> = (0..n).map(|v| (v * 5 + 3) % n).collect();
        assert_eq!(n % 5 != 0, true);
        // agent v of the original is agent perm[v] of the relabeled graph
        let mut ingress = vec![Vec::new(); n];
        let mut pf = vec![[0.0; 9]; n];
        for v in 0..n {
            ingress[perm[v]] = g.ingress(v).iter().rev().map(|&i| perm[i]).collect();
            pf[perm[v]] = f[v];
        }
        let a = q_values(&p, &g, &f).unwrap();
        let b = q_values(&p, &AgentGraph::from_ingress(ingress), &pf).unwrap();
        for v in 0..n {
            assert_eq!(a[v], b[perm[v]]);
        }
    }

    #[test]
    fn greedy_selection_and_tie_break() {
        let mut q = vec![0.0; 120];
        q[7] = 1.0;
        assert_eq!(greedy_actions(&[q, vec![0.5; 120]]).unwrap(), vec![7, 0]);
        assert!(matches!(greedy_actions(&[vec![]]), Err(GnnError::EmptyQ(0))));
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut r = rng(9);
        let qs = vec![vec![0.0; 120]];
        let n = 100_000;
        let mut counts = [0usize; 120];
        for _ in 0..n {
            counts[select_actions(&qs, Mode::Epsilon(1.0, &mut r)).unwrap()[0]] += 1;
        }
        let p = 1.0 / 120.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "{c}");
        }
    }

    #[test]
    fn distributed_matches_centralized() {
        let mut r = rng(10);
        for case in 0..20 {
            let leaves = r.gen_range(2..5);
            let t = build_clos(leaves * 2, leaves, r.gen_range(1..4), 25e9, 100e9, 1e-6).unwrap();
            let g = AgentGraph::from_topology(&t).unwrap();
            let p = MpnnParams::init(120, 2, &mut rng(100 + case));
            let f = random_features(g.len(), &mut r);
            let central = greedy_actions(&q_values(&p, &g, &f).unwrap()).unwrap();
            let d = distributed_run(&p, &g, &f).unwrap();
            assert_eq!(d.actions, central);
            assert_eq!(d.messages_per_round, vec![g.edge_count(); 2]);
        }
    }

    #[test]
    fn missing_message_is_an_error() {
        let p = MpnnParams::init(4, 1, &mut rng(11));
        let h = init_hidden(&[0.1; 9]).unwrap();
        let mut rep = Replica { id: 0, params: &p, expected: &[1, 2], h, inbox: vec![] };
        rep.inbox.push(Message { sender: 1, round: 0, payload: vec![0.0; 24] });
        assert!(matches!(rep.absorb(0), Err(GnnError::Undelivered { receiver: 0, sender: 2, round: 0 })));
    }

    #[test]
    fn mpnn_gradients_match_finite_differences() {
        let t = build_clos(4, 2, 2, 25e9, 100e9, 1e-6).unwrap();
        let g = AgentGraph::from_topology(&t).unwrap();
        let mut r = rng(12);
        let p = MpnnParams::init(6, 2, &mut r);
        let f = random_features(g.len(), &mut r);
        let dq: Vec<Vec<f64>> = (0..g.len()).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let obj = |q: &MpnnParams, f: &[Features]| -> f64 {
            q_values(q, &g, f).unwrap().iter().zip(&dq).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum()
        };
        let cache = forward_cached(&p, &g, &f).unwrap();
        assert_eq!(cache.q, q_values(&p, &g, &f).unwrap());
        let mut grads = p.zero_grads();
        let dx = backward(&p, &g, &cache, &dq, &mut grads).unwrap();
        let h = 1e-6;
        let mut q = p.clone();
        let mut worst: f64 = 0.0;
        let n_t = q.tensors().len();
        for ti in 0..n_t {
            let len = q.tensors()[ti].len();
            for i in (0..len).step_by(7) {
                let orig = q.tensors()[ti][i];
                q.tensors_mut()[ti][i] = orig + h;
                let fp = obj(&q, &f);
                q.tensors_mut()[ti][i] = orig - h;
                let fm = obj(&q, &f);
                q.tensors_mut()[ti][i] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads.tensors()[ti][i];
                worst = worst.max((num - ana).abs() / (num.abs() + ana.abs()).max(1e-4));
            }
        }
        let mut ff = f.clone();
        for v in 0..g.len() {
            for j in 0..FEATURE_DIM {
                let orig = ff[v][j];
                ff[v][j] = orig + h;
                let fp = obj(&p, &ff);
                ff[v][j] = orig - h;
                let fm = obj(&p, &ff);
                ff[v][j] = orig;
                let num = (fp - fm) / (2.0 * h);
                worst = worst.max((num - dx[v][j]).abs() / (num.abs() + dx[v][j].abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn port_features_read_newest_first() {
        let mut port = PortState::new(25e9, None);
        port.record_tx(25e9 * 100e-6 / 8.0 / 2.0);
        crate::netsim::observe(&mut port, 100e-6, 256e3);
        port.set_queue(128e3);
        crate::netsim::observe(&mut port, 100e-6, 256e3);
        let x = port_features(&port);
        assert_eq!(x, [0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model_and_table() {
        let p = MpnnParams::init(120, 2, &mut rng(13));
        let table = build_action_table();
        let ck = ModelCheckpoint::new(&p, &table, 256e3, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let (p2, t2) = ModelCheckpoint::load(&path).unwrap().params().unwrap();
        assert_eq!(p2, p);
        assert_eq!(t2, table);
    }
}
