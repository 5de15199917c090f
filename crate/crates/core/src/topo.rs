//! Clos datacenter topologies.
//!
//! A [`Topology`] is a set of named nodes joined by directed [`Link`]s; every
//! physical cable is stored as two links, one per direction. Each link whose
//! source is a switch is an egress port that hosts one ECN-tuning agent.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("count `{0}` must be at least 1")]
    ZeroCount(&'static str),
    #[error("capacity must be positive, got {0}")]
    BadCapacity(f64),
    #[error("propagation delay must be positive, got {0}")]
    BadDelay(f64),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("no cable between `{0}` and `{1}`")]
    UnknownCable(String, String),
    #[error("link {0} is not an agent (its source is not a switch)")]
    NotAnAgent(usize),
    #[error("unknown agent index {0}")]
    UnknownAgent(usize),
    #[error("`{0}` is not a {1}")]
    WrongKind(String, &'static str),
    #[error("change would disconnect the topology")]
    Disconnected,
    #[error("no path from `{0}` to `{1}`")]
    Unreachable(String, String),
    #[error("topology file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Host,
    Leaf,
    Spine,
    Core,
}

impl NodeKind {
    pub fn is_switch(self) -> bool {
        !matches!(self, NodeKind::Host)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

/// One direction of a cable. `src` and `dst` index into [`Topology::nodes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub src: usize,
    pub dst: usize,
    /// bits per second
    pub capacity: f64,
    /// seconds
    pub prop_delay: f64,
}

/// An agent is identified by the index of the switch egress link it controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn link(self) -> usize {
        self.0
    }
}

/// Parameters of the extra branch attached by [`Change::AddBranch`].
///
/// A new core switch is cabled to every existing spine and to `n_spine` new
/// spines; the new hosts are spread round-robin over the new spines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub n_spine: usize,
    pub n_hosts: usize,
    pub host_cap: f64,
    pub fabric_cap: f64,
    pub delay: f64,
}

impl Default for BranchSpec {
    fn default() -> Self {
        Self { n_spine: 2, n_hosts: 6, host_cap: 25e9, fabric_cap: 100e9, delay: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    /// Remove both directions of the cable between two nodes.
    RemoveLink { a: String, b: String },
    AddBranch(BranchSpec),
    /// Attach `count` new hosts to `leaf`, using the capacity and delay of the
    /// leaf's existing host cables.
    AddHosts { leaf: String, count: usize },
}

#[derive(Debug, Clone)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    index: HashMap<String, usize>,
    out_links: Vec<Vec<usize>>,
    in_links: Vec<Vec<usize>>,
    agents: Vec<AgentId>,
    agent_pos: Vec<Option<usize>>,
}

impl Topology {
    /// Builds a topology from nodes and cables. Each cable becomes two links.
    pub fn new(nodes: Vec<Node>, cables: &[Cable]) -> Result<Self, TopologyError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(TopologyError::DuplicateNode(n.id.clone()));
            }
        }
        let mut links = Vec::with_capacity(cables.len() * 2);
        for c in cables {
            if !(c.capacity_bps > 0.0) || !c.capacity_bps.is_finite() {
                return Err(TopologyError::BadCapacity(c.capacity_bps));
            }
            if !(c.delay_s > 0.0) || !c.delay_s.is_finite() {
                return Err(TopologyError::BadDelay(c.delay_s));
            }
            let a = *index.get(&c.a).ok_or_else(|| TopologyError::UnknownNode(c.a.clone()))?;
            let b = *index.get(&c.b).ok_or_else(|| TopologyError::UnknownNode(c.b.clone()))?;
            links.push(Link { src: a, dst: b, capacity: c.capacity_bps, prop_delay: c.delay_s });
            links.push(Link { src: b, dst: a, capacity: c.capacity_bps, prop_delay: c.delay_s });
        }
        let topo = Self::assemble(nodes, links, index);
        if !topo.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(topo)
    }

    fn assemble(nodes: Vec<Node>, links: Vec<Link>, index: HashMap<String, usize>) -> Self {
        let mut out_links = vec![Vec::new(); nodes.len()];
        let mut in_links = vec![Vec::new(); nodes.len()];
        for (i, l) in links.iter().enumerate() {
            out_links[l.src].push(i);
            in_links[l.dst].push(i);
        }
        let mut agents: Vec<AgentId> = links
            .iter()
            .enumerate()
            .filter(|(_, l)| nodes[l.src].kind.is_switch())
            .map(|(i, _)| AgentId(i))
            .collect();
        agents.sort_by(|x, y| {
            let (lx, ly) = (&links[x.0], &links[y.0]);
            (&nodes[lx.src].id, &nodes[lx.dst].id).cmp(&(&nodes[ly.src].id, &nodes[ly.dst].id))
        });
        let mut agent_pos = vec![None; links.len()];
        for (pos, a) in agents.iter().enumerate() {
            agent_pos[a.0] = Some(pos);
        }
        Self { nodes, links, index, out_links, in_links, agents, agent_pos }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node_id(&self, idx: usize) -> &str {
        &self.nodes[idx].id
    }

    pub fn out_links(&self, node: usize) -> &[usize] {
        &self.out_links[node]
    }

    pub fn in_links(&self, node: usize) -> &[usize] {
        &self.in_links[node]
    }

    pub fn hosts(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == NodeKind::Host).collect()
    }

    pub fn nodes_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].kind == kind).collect()
    }

    /// Capacity of the host's single access cable.
    pub fn host_capacity(&self, host: usize) -> f64 {
        self.out_links[host].iter().map(|&l| self.links[l].capacity).sum()
    }

    /// Human readable `src->dst` label of a link.
    pub fn link_label(&self, link: usize) -> String {
        let l = &self.links[link];
        format!("{}->{}", self.nodes[l.src].id, self.nodes[l.dst].id)
    }

    /// Agents in canonical order: lexicographic by (source id, destination id).
    pub fn agents(&self) -> &[AgentId] {
        &self.agents
    }

    /// Position of `agent` in [`Topology::agents`].
    pub fn agent_index(&self, agent: AgentId) -> Result<usize, TopologyError> {
        self.agent_pos
            .get(agent.0)
            .copied()
            .flatten()
            .ok_or(TopologyError::UnknownAgent(agent.0))
    }

    pub fn agent_of_link(&self, link: usize) -> Result<AgentId, TopologyError> {
        match self.agent_pos.get(link) {
            Some(Some(_)) => Ok(AgentId(link)),
            Some(None) => Err(TopologyError::NotAnAgent(link)),
            None => Err(TopologyError::UnknownAgent(link)),
        }
    }

    /// Agents that can inject traffic into `v`: agent links ending at v's source.
    pub fn ingress_neighbors(&self, v: AgentId) -> Result<Vec<AgentId>, TopologyError> {
        self.agent_index(v)?;
        let src = self.links[v.0].src;
        let mut out: Vec<AgentId> = self.in_links[src]
            .iter()
            .filter(|&&l| self.agent_pos[l].is_some())
            .map(|&l| AgentId(l))
            .collect();
        out.sort_by_key(|a| self.agent_pos[a.0]);
        Ok(out)
    }

    /// Agents that can receive traffic from `v`: agent links leaving v's destination.
    pub fn egress_neighbors(&self, v: AgentId) -> Result<Vec<AgentId>, TopologyError> {
        self.agent_index(v)?;
        let dst = self.links[v.0].dst;
        let mut out: Vec<AgentId> = self.out_links[dst]
            .iter()
            .filter(|&&l| self.agent_pos[l].is_some())
            .map(|&l| AgentId(l))
            .collect();
        out.sort_by_key(|a| self.agent_pos[a.0]);
        Ok(out)
    }

    fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &l in &self.out_links[n] {
                let d = self.links[l].dst;
                if !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// The cable list that regenerates this topology.
    pub fn cables(&self) -> Vec<Cable> {
        // links are stored in cable pairs, the first one in cable orientation
        self.links
            .iter()
            .step_by(2)
            .map(|l| Cable {
                a: self.nodes[l.src].id.clone(),
                b: self.nodes[l.dst].id.clone(),
                capacity_bps: l.capacity,
                delay_s: l.prop_delay,
            })
            .collect()
    }

    /// Applies a change and returns the resulting topology. The original is untouched.
    pub fn mutate(&self, change: &Change) -> Result<Topology, TopologyError> {
        let mut nodes = self.nodes.clone();
        let mut cables = self.cables();
        match change {
            Change::RemoveLink { a, b } => {
                self.node(a).ok_or_else(|| TopologyError::UnknownNode(a.clone()))?;
                self.node(b).ok_or_else(|| TopologyError::UnknownNode(b.clone()))?;
                let before = cables.len();
                cables.retain(|c| !((c.a == *a && c.b == *b) || (c.a == *b && c.b == *a)));
                if cables.len() == before {
                    return Err(TopologyError::UnknownCable(a.clone(), b.clone()));
                }
            }
            Change::AddBranch(spec) => {
                if spec.n_spine == 0 {
                    return Err(TopologyError::ZeroCount("n_spine"));
                }
                let core = fresh_id(&nodes, "core");
                nodes.push(Node { id: core.clone(), kind: NodeKind::Core });
                for s in self.nodes_of(NodeKind::Spine) {
                    cables.push(Cable::new(&core, self.node_id(s), spec.fabric_cap, spec.delay));
                }
                let mut new_spines = Vec::new();
                for _ in 0..spec.n_spine {
                    let id = fresh_id(&nodes, "spine");
                    nodes.push(Node { id: id.clone(), kind: NodeKind::Spine });
                    cables.push(Cable::new(&core, &id, spec.fabric_cap, spec.delay));
                    new_spines.push(id);
                }
                for h in 0..spec.n_hosts {
                    let id = fresh_id(&nodes, "host");
                    nodes.push(Node { id: id.clone(), kind: NodeKind::Host });
                    let sw = &new_spines[h % new_spines.len()];
                    cables.push(Cable::new(&id, sw, spec.host_cap, spec.delay));
                }
            }
            Change::AddHosts { leaf, count } => {
                let l = self.node(leaf).ok_or_else(|| TopologyError::UnknownNode(leaf.clone()))?;
                if self.nodes[l].kind != NodeKind::Leaf {
                    return Err(TopologyError::WrongKind(leaf.clone(), "leaf"));
                }
                let template = self.out_links[l]
                    .iter()
                    .map(|&i| self.links[i])
                    .find(|k| self.nodes[k.dst].kind == NodeKind::Host)
                    .or_else(|| self.out_links[l].first().map(|&i| self.links[i]))
                    .ok_or_else(|| TopologyError::UnknownNode(leaf.clone()))?;
                for _ in 0..*count {
                    let id = fresh_id(&nodes, "host");
                    nodes.push(Node { id: id.clone(), kind: NodeKind::Host });
                    cables.push(Cable::new(&id, leaf, template.capacity, template.prop_delay));
                }
            }
        }
        Topology::new(nodes, &cables)
    }

    /// Hop distance from every node to `dst`.
    fn distances_to(&self, dst: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        dist[dst] = 0;
        queue.push_back(dst);
        while let Some(n) = queue.pop_front() {
            for &l in &self.in_links[n] {
                let s = self.links[l].src;
                if dist[s] == usize::MAX {
                    dist[s] = dist[n] + 1;
                    queue.push_back(s);
                }
            }
        }
        dist
    }

    /// Shortest host-to-host path, choosing among equal-cost next hops by a
    /// stable hash of (src, dst, flow_key, hop).
    ///
    /// Transit through hosts is never allowed.
    pub fn ecmp_route(&self, src: usize, dst: usize, flow_key: u64) -> Result<Vec<usize>, TopologyError> {
        Router::default().route(self, src, dst, flow_key)
    }

    /// Loads the JSON topology file format.
    pub fn from_json_str(s: &str) -> Result<Self, TopologyError> {
        let file: TopologyFile = serde_json::from_str(s).map_err(|e| TopologyError::File(e.to_string()))?;
        Topology::new(file.nodes, &file.cables)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let s = std::fs::read_to_string(path).map_err(|e| TopologyError::File(e.to_string()))?;
        Self::from_json_str(&s)
    }

    pub fn to_file(&self) -> TopologyFile {
        TopologyFile { nodes: self.nodes.clone(), cables: self.cables() }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} hosts, {} switches, {} links, {} agents",
            self.hosts().len(),
            self.nodes.len() - self.hosts().len(),
            self.links.len(),
            self.agents.len()
        )
    }
}

fn fresh_id(nodes: &[Node], prefix: &str) -> String {
    (0..)
        .map(|i| format!("{prefix}{i:02}"))
        .find(|c| nodes.iter().all(|n| &n.id != c))
        .expect("unbounded id space")
}

/// Caches per-destination distances for repeated ECMP lookups on one topology.
#[derive(Debug, Clone, Default)]
pub struct Router {
    dist: HashMap<usize, Vec<usize>>,
}

impl Router {
    pub fn route(&mut self, t: &Topology, src: usize, dst: usize, flow_key: u64) -> Result<Vec<usize>, TopologyError> {
        for &n in &[src, dst] {
            if n >= t.nodes.len() {
                return Err(TopologyError::UnknownNode(n.to_string()));
            }
            if t.nodes[n].kind != NodeKind::Host {
                return Err(TopologyError::WrongKind(t.nodes[n].id.clone(), "host"));
            }
        }
        let unreachable = || TopologyError::Unreachable(t.nodes[src].id.clone(), t.nodes[dst].id.clone());
        if src == dst {
            return Err(unreachable());
        }
        let dist = self.dist.entry(dst).or_insert_with(|| t.distances_to(dst));
        if dist[src] == usize::MAX {
            return Err(unreachable());
        }
        let mut path = Vec::with_capacity(dist[src]);
        let mut at = src;
        let mut hop = 0u64;
        while at != dst {
            let candidates: Vec<usize> = t.out_links[at]
                .iter()
                .copied()
                .filter(|&l| {
                    let d = t.links[l].dst;
                    dist[d] != usize::MAX
                        && dist[d] + 1 == dist[at]
                        && (d == dst || t.nodes[d].kind.is_switch())
                })
                .collect();
            if candidates.is_empty() {
                return Err(unreachable());
            }
            let h = mix64(mix64(mix64(src as u64 ^ 0x5bd1_e995) ^ dst as u64) ^ flow_key) ^ hop;
            let pick = candidates[(mix64(h) % candidates.len() as u64) as usize];
            path.push(pick);
            at = t.links[pick].dst;
            hop += 1;
        }
        Ok(path)
    }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An undirected cable as written in topology files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cable {
    pub a: String,
    pub b: String,
    pub capacity_bps: f64,
    pub delay_s: f64,
}

impl Cable {
    pub fn new(a: &str, b: &str, capacity_bps: f64, delay_s: f64) -> Self {
        Self { a: a.to_string(), b: b.to_string(), capacity_bps, delay_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub nodes: Vec<Node>,
    pub cables: Vec<Cable>,
}

/// Two-tier leaf-spine fabric: every host on one leaf, every leaf cabled to every spine.
pub fn build_clos(
    hosts_per_leaf: usize,
    n_leaf: usize,
    n_spine: usize,
    host_cap: f64,
    fabric_cap: f64,
    delay: f64,
) -> Result<Topology, TopologyError> {
    if hosts_per_leaf == 0 {
        return Err(TopologyError::ZeroCount("hosts_per_leaf"));
    }
    if n_leaf == 0 {
        return Err(TopologyError::ZeroCount("n_leaf"));
    }
    if n_spine == 0 {
        return Err(TopologyError::ZeroCount("n_spine"));
    }
    for cap in [host_cap, fabric_cap] {
        if !(cap > 0.0) {
            return Err(TopologyError::BadCapacity(cap));
        }
    }
    let mut nodes = Vec::new();
    let mut cables = Vec::new();
    for s in 0..n_spine {
        nodes.push(Node { id: format!("spine{s:02}"), kind: NodeKind::Spine });
    }
    for l in 0..n_leaf {
        let leaf = format!("leaf{l:02}");
        nodes.push(Node { id: leaf.clone(), kind: NodeKind::Leaf });
        for s in 0..n_spine {
            cables.push(Cable::new(&leaf, &format!("spine{s:02}"), fabric_cap, delay));
        }
        for h in 0..hosts_per_leaf {
            let host = format!("host{:02}", l * hosts_per_leaf + h);
            nodes.push(Node { id: host.clone(), kind: NodeKind::Host });
            cables.push(Cable::new(&host, &leaf, host_cap, delay));
        }
    }
    Topology::new(nodes, &cables)
}

/// The 24-host, 4-leaf, 2-spine evaluation fabric (25G access, 100G fabric, 1us links).
pub fn default_clos() -> Topology {
    build_clos(6, 4, 2, 25e9, 100e9, 1e-6).expect("static parameters are valid")
}
