//! Discrete-time flow-level datacenter simulator.
//!
//! Every directed link is an output port with a FIFO of fluid chunks. Each
//! tick, senders inject up to their DCQCN-style rate (capped by a
//! bandwidth-delay-product window), ports serve up to `capacity * tick` in
//! arrival order, switch ports mark traffic with a RED curve, and marks travel
//! back to the sender after the forward path's round-trip plus queueing delay.
//!
//! Fluid amounts are tracked in integer units of 1/1000 byte so that byte
//! conservation is exact.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topo::{Router, Topology, TopologyError};
use crate::workload::{FlowArrival, FlowTag};

/// Fluid units per byte.
const UNITS: f64 = 1000.0;
/// Observations kept per port: the current one plus `p = 2` previous ones.
pub const HISTORY_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid ECN config: {0}")]
    BadEcn(String),
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("shared buffer exceeded at t={time:.6}s: {queued:.0} bytes queued, limit {limit:.0}")]
    BufferOverflow { time: f64, queued: f64, limit: f64 },
    #[error("flow {0} has not finished")]
    Unfinished(u64),
    #[error("expected {expected} ECN configs, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// RED marking thresholds of one switch port (bytes, bytes, probability).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcnConfig {
    pub k_min: f64,
    pub k_max: f64,
    pub p_max: f64,
}

impl EcnConfig {
    pub fn new(k_min: f64, k_max: f64, p_max: f64) -> Result<Self, SimError> {
        let c = Self { k_min, k_max, p_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.k_min > 0.0 && self.k_min <= self.k_max && self.k_max.is_finite()) {
            return Err(SimError::BadEcn(format!("need 0 < k_min <= k_max, got {} / {}", self.k_min, self.k_max)));
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return Err(SimError::BadEcn(format!("p_max {} outside (0, 1]", self.p_max)));
        }
        Ok(())
    }
}

/// RED curve: 0 below `k_min`, linear up to `p_max` at `k_max`, 1 from `k_max` on.
pub fn mark_probability(c: &EcnConfig, q: f64) -> f64 {
    if q < c.k_min {
        0.0
    } else if q < c.k_max {
        c.p_max * (q - c.k_min) / (c.k_max - c.k_min)
    } else {
        1.0
    }
}

/// DCQCN-style sender reaction constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateControl {
    /// EWMA gain of the congestion estimate.
    pub g: f64,
    /// Additive increase per signal-free update period, bits/s.
    pub rate_ai: f64,
    /// bits/s
    pub min_rate: f64,
}

impl Default for RateControl {
    fn default() -> Self {
        Self { g: 1.0 / 16.0, rate_ai: 0.5e9, min_rate: 100e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateState {
    /// bits/s
    pub rate: f64,
    pub alpha: f64,
    /// Upper clamp: the smallest capacity on the flow's path.
    pub line_rate: f64,
}

/// One reaction step: multiplicative decrease on congestion, additive increase otherwise.
pub fn rate_update(s: RateState, congested: bool, rc: &RateControl) -> RateState {
    if congested {
        let alpha = (1.0 - rc.g) * s.alpha + rc.g;
        let rate = (s.rate * (1.0 - alpha / 2.0)).max(rc.min_rate).min(s.line_rate);
        RateState { rate, alpha, line_rate: s.line_rate }
    } else {
        let alpha = (1.0 - rc.g) * s.alpha;
        let rate = (s.rate + rc.rate_ai).min(s.line_rate);
        RateState { rate, alpha, line_rate: s.line_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Network step, seconds.
    pub tick: f64,
    /// Agent control period, seconds.
    pub agent_interval: f64,
    /// Episode length, seconds.
    pub episode: f64,
    /// Shared switch buffer, bytes.
    pub buffer_total: f64,
    /// Packet size used for per-packet marking, bytes.
    pub mtu: f64,
    pub rate: RateControl,
    /// Queue length that maps to a normalized queue of 1.0 in features and rewards.
    pub queue_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tick: 1e-6,
            agent_interval: 100e-6,
            episode: 25e-3,
            buffer_total: 32e6,
            mtu: 1000.0,
            rate: RateControl::default(),
            queue_scale: 96e3,
            seed: 1,
        }
    }
}

fn whole_ratio(a: f64, b: f64) -> Option<u64> {
    let r = a / b;
    let n = r.round();
    ((r - n).abs() < 1e-6 && n >= 1.0).then_some(n as u64)
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::BadConfig(m.to_string()));
        if !(self.tick > 0.0) {
            return bad("tick must be positive");
        }
        if self.tick > self.agent_interval {
            return bad("tick must not exceed agent_interval");
        }
        if whole_ratio(self.agent_interval, self.tick).is_none() {
            return bad("tick must divide agent_interval");
        }
        if whole_ratio(self.episode, self.agent_interval).is_none() {
            return bad("agent_interval must divide episode");
        }
        if !(self.buffer_total > 0.0 && self.mtu > 0.0 && self.queue_scale > 0.0) {
            return bad("buffer_total, mtu and queue_scale must be positive");
        }
        if !(self.rate.g > 0.0 && self.rate.g <= 1.0 && self.rate.min_rate > 0.0 && self.rate.rate_ai >= 0.0) {
            return bad("rate-control constants out of range");
        }
        Ok(())
    }

    pub fn ticks_per_interval(&self) -> u64 {
        whole_ratio(self.agent_interval, self.tick).unwrap_or(1)
    }

    pub fn steps_per_episode(&self) -> usize {
        whole_ratio(self.episode, self.agent_interval).unwrap_or(1) as usize
    }

    pub fn episode_ticks(&self) -> u64 {
        self.ticks_per_interval() * self.steps_per_episode() as u64
    }
}

/// End-of-interval port metrics, all normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub utilization: f64,
    pub queue: f64,
    pub ecn_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortState {
    /// bits/s
    pub capacity: f64,
    /// `None` for host NICs, which never mark.
    pub ecn: Option<EcnConfig>,
    queued: u64,
    tx: u64,
    marked: f64,
    marked_packets: f64,
    total_packets: u64,
    history: VecDeque<Observation>,
}

impl PortState {
    pub fn new(capacity: f64, ecn: Option<EcnConfig>) -> Self {
        Self {
            capacity,
            ecn,
            queued: 0,
            tx: 0,
            marked: 0.0,
            marked_packets: 0.0,
            total_packets: 0,
            history: VecDeque::from(vec![Observation::default(); HISTORY_LEN]),
        }
    }

    /// Queued bytes.
    pub fn queue(&self) -> f64 {
        self.queued as f64 / UNITS
    }

    /// Bytes transmitted in the current interval.
    pub fn tx_bytes(&self) -> f64 {
        self.tx as f64 / UNITS
    }

    /// Expected ECN-marked bytes in the current interval.
    pub fn marked_bytes(&self) -> f64 {
        self.marked / UNITS
    }

    pub fn marked_packets(&self) -> f64 {
        self.marked_packets
    }

    pub fn total_packets(&self) -> u64 {
        self.total_packets
    }

    /// Newest first.
    pub fn history(&self) -> &VecDeque<Observation> {
        &self.history
    }

    /// Records a transmitted chunk; used by the simulator and by tests.
    pub fn record_tx(&mut self, bytes: f64) {
        self.tx += (bytes * UNITS).round() as u64;
    }

    pub fn set_queue(&mut self, bytes: f64) {
        self.queued = (bytes * UNITS).round() as u64;
    }

    pub fn record_marked(&mut self, bytes: f64) {
        self.marked += bytes * UNITS;
    }
}

/// Closes an agent interval on `p`: computes normalized metrics, pushes them
/// into the port history and resets the interval counters.
pub fn observe(p: &mut PortState, interval: f64, queue_scale: f64) -> Observation {
    let budget = p.capacity * interval;
    let obs = Observation {
        utilization: (p.tx_bytes() * 8.0 / budget).clamp(0.0, 1.0),
        queue: (p.queue() / queue_scale).clamp(0.0, 1.0),
        ecn_rate: (p.marked_bytes() * 8.0 / budget).clamp(0.0, 1.0),
    };
    p.tx = 0;
    p.marked = 0.0;
    p.marked_packets = 0.0;
    p.total_packets = 0;
    p.history.pop_back();
    p.history.push_front(obs);
    obs
}

/// Installs a new marking configuration; it governs marking from the next tick on.
pub fn apply_action(p: &mut PortState, c: EcnConfig) {
    p.ecn = Some(c);
}

/// Public record of a flow; completed flows carry `finish`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub id: u64,
    pub src: usize,
    pub dst: usize,
    /// bytes
    pub size: u64,
    /// Bytes not yet injected.
    pub remaining: f64,
    pub rate: RateState,
    /// bytes
    pub inflight_cap: f64,
    /// link indices
    pub path: Vec<usize>,
    pub start: f64,
    pub finish: Option<f64>,
    pub tag: FlowTag,
}

/// Line-rate completion time: base round-trip propagation plus serialization
/// at the path's bottleneck capacity.
pub fn ideal_fct(t: &Topology, path: &[usize], size: u64) -> f64 {
    let links = t.links();
    let rtt: f64 = 2.0 * path.iter().map(|&l| links[l].prop_delay).sum::<f64>();
    let cap = path.iter().map(|&l| links[l].capacity).fold(f64::INFINITY, f64::min);
    rtt + size as f64 * 8.0 / cap
}

pub fn fct_slowdown(f: &FlowState, t: &Topology) -> Result<f64, SimError> {
    let finish = f.finish.ok_or(SimError::Unfinished(f.id))?;
    Ok((finish - f.start) / ideal_fct(t, &f.path, f.size))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ByteAccounting {
    pub injected: f64,
    pub delivered: f64,
    pub queued: f64,
    pub in_flight: f64,
}

impl ByteAccounting {
    /// |injected - (delivered + queued + in_flight)| / injected.
    pub fn relative_error(&self) -> f64 {
        let rhs = self.delivered + self.queued + self.in_flight;
        if self.injected == 0.0 {
            rhs.abs()
        } else {
            (self.injected - rhs).abs() / self.injected
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Chunk {
    slot: u32,
    hop: u8,
    units: u64,
}

#[derive(Debug, Clone)]
struct Hop {
    port: usize,
    wire: VecDeque<u64>,
    served: u64,
}

#[derive(Debug, Clone)]
struct ActiveFlow {
    state: FlowState,
    hops: Vec<Hop>,
    size_units: u64,
    injected: u64,
    delivered: u64,
    served_last: u64,
    acked: u64,
    acks: VecDeque<(u64, u64)>,
    window: u64,
    base_rtt: f64,
    return_ticks: u64,
    tail_delay: f64,
    update_period: u64,
    next_update: u64,
    congested: bool,
}

/// Aggregate statistics over the measurement window `[0, episode)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowStats {
    /// Sum over window ticks and agent ports of queued bytes.
    pub agent_queue_sum: f64,
    pub ticks: u64,
    /// Bytes delivered to hosts inside the window.
    pub delivered_bytes: f64,
}

/// A running simulation over a fixed topology and trace.
#[derive(Debug, Clone)]
pub struct Simulation {
    topo: Topology,
    cfg: SimConfig,
    router: Router,
    ports: Vec<PortState>,
    fifo: Vec<VecDeque<Chunk>>,
    flows: Vec<Option<ActiveFlow>>,
    free: Vec<usize>,
    active: Vec<usize>,
    slot_of: Vec<Option<usize>>,
    trace: Vec<FlowArrival>,
    next_arrival: usize,
    completed: Vec<FlowState>,
    cnp: BinaryHeap<Reverse<(u64, u64)>>,
    now: u64,
    rng: ChaCha8Rng,
    injected: u64,
    delivered: u64,
    agent_links: Vec<usize>,
    window: WindowStats,
    max_total_queue: f64,
    /// Per-NIC injection requests `(units, active index)` for the current tick.
    demand: Vec<Vec<(u64, usize)>>,
    nics: Vec<usize>,
}

impl Simulation {
    /// Agent ports start with `initial_ecn`; host NICs never mark.
    pub fn new(
        topo: &Topology,
        trace: Vec<FlowArrival>,
        cfg: SimConfig,
        initial_ecn: EcnConfig,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        initial_ecn.validate()?;
        let ports = topo
            .links()
            .iter()
            .map(|l| {
                let ecn = topo.nodes()[l.src].kind.is_switch().then_some(initial_ecn);
                PortState::new(l.capacity, ecn)
            })
            .collect();
        let agent_links = topo.agents().iter().map(|a| a.link()).collect();
        let n_links = topo.links().len();
        let mut trace = trace;
        trace.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(Self {
            topo: topo.clone(),
            router: Router::default(),
            ports,
            fifo: vec![VecDeque::new(); n_links],
            flows: Vec::new(),
            free: Vec::new(),
            active: Vec::new(),
            slot_of: vec![None; trace.len()],
            next_arrival: 0,
            completed: Vec::with_capacity(trace.len()),
            cnp: BinaryHeap::new(),
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            injected: 0,
            delivered: 0,
            agent_links,
            window: WindowStats::default(),
            max_total_queue: 0.0,
            demand: vec![Vec::new(); n_links],
            nics: Vec::new(),
            trace,
            cfg,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Simulation clock, seconds.
    pub fn time(&self) -> f64 {
        self.now as f64 * self.cfg.tick
    }

    pub fn ticks(&self) -> u64 {
        self.now
    }

    pub fn port(&self, link: usize) -> &PortState {
        &self.ports[link]
    }

    pub fn ports(&self) -> &[PortState] {
        &self.ports
    }

    /// Link indices of the agent ports, in canonical agent order.
    pub fn agent_links(&self) -> &[usize] {
        &self.agent_links
    }

    pub fn completed(&self) -> &[FlowState] {
        &self.completed
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    pub fn active_flows(&self) -> usize {
        self.active.len()
    }

    /// Snapshot of all flows still in the network.
    pub fn active_states(&self) -> Vec<FlowState> {
        self.active.iter().filter_map(|&s| self.flows[s].as_ref()).map(|f| f.state.clone()).collect()
    }

    /// True once every trace flow has been admitted and fully delivered.
    pub fn is_drained(&self) -> bool {
        self.next_arrival == self.trace.len() && self.active.is_empty()
    }

    pub fn window_stats(&self) -> WindowStats {
        self.window
    }

    /// Largest total queued bytes seen at the end of any tick.
    pub fn max_total_queue(&self) -> f64 {
        self.max_total_queue
    }

    pub fn total_queued(&self) -> f64 {
        self.ports.iter().map(|p| p.queued).sum::<u64>() as f64 / UNITS
    }

    pub fn accounting(&self) -> ByteAccounting {
        let queued: u64 = self.ports.iter().map(|p| p.queued).sum();
        let in_flight: u64 = self
            .active
            .iter()
            .filter_map(|&s| self.flows[s].as_ref())
            .flat_map(|f| f.hops.iter())
            .map(|h| h.wire.iter().sum::<u64>())
            .sum();
        ByteAccounting {
            injected: self.injected as f64 / UNITS,
            delivered: self.delivered as f64 / UNITS,
            queued: queued as f64 / UNITS,
            in_flight: in_flight as f64 / UNITS,
        }
    }

    /// Sets the marking configuration of one switch port.
    pub fn set_ecn(&mut self, link: usize, c: EcnConfig) -> Result<(), SimError> {
        c.validate()?;
        self.topo.agent_of_link(link)?;
        apply_action(&mut self.ports[link], c);
        Ok(())
    }

    /// Applies one configuration per agent, in canonical agent order.
    pub fn apply_actions(&mut self, configs: &[EcnConfig]) -> Result<(), SimError> {
        if configs.len() != self.agent_links.len() {
            return Err(SimError::ActionCount { expected: self.agent_links.len(), got: configs.len() });
        }
        for (i, c) in configs.iter().enumerate() {
            c.validate()?;
            let link = self.agent_links[i];
            apply_action(&mut self.ports[link], *c);
        }
        Ok(())
    }

    /// Closes the current agent interval on every agent port.
    pub fn observe_agents(&mut self) -> Vec<Observation> {
        let interval = self.cfg.agent_interval;
        let scale = self.cfg.queue_scale;
        let links = self.agent_links.clone();
        links.iter().map(|&l| observe(&mut self.ports[l], interval, scale)).collect()
    }

    /// Advances one agent interval.
    pub fn run_interval(&mut self) -> Result<(), SimError> {
        for _ in 0..self.cfg.ticks_per_interval() {
            self.step()?;
        }
        Ok(())
    }

    fn admit(&mut self, id: usize) -> Result<(), SimError> {
        let a = &self.trace[id];
        let path = self.router.route(&self.topo, a.src, a.dst, id as u64)?;
        let links = self.topo.links();
        let line_rate = path.iter().map(|&l| links[l].capacity).fold(f64::INFINITY, f64::min);
        let one_way: f64 = path.iter().map(|&l| links[l].prop_delay).sum();
        let base_rtt = 2.0 * one_way;
        let tick = self.cfg.tick;
        let hops = path
            .iter()
            .map(|&l| {
                let d = ((links[l].prop_delay / tick).round() as usize).max(1);
                Hop { port: l, wire: VecDeque::from(vec![0; d]), served: 0 }
            })
            .collect();
        let update_period = ((base_rtt / tick).round() as u64).max(1);
        let last_delay = links[*path.last().expect("non-empty path")].prop_delay;
        let flow = ActiveFlow {
            state: FlowState {
                id: id as u64,
                src: a.src,
                dst: a.dst,
                size: a.size,
                remaining: a.size as f64,
                rate: RateState { rate: line_rate, alpha: 1.0, line_rate },
                inflight_cap: line_rate * base_rtt / 8.0,
                path,
                start: a.start,
                finish: None,
                tag: a.tag,
            },
            hops,
            size_units: a.size * UNITS as u64,
            injected: 0,
            delivered: 0,
            served_last: 0,
            acked: 0,
            acks: VecDeque::new(),
            window: (line_rate * base_rtt / 8.0 * UNITS).round() as u64,
            base_rtt,
            return_ticks: ((one_way / tick).round() as u64).max(1),
            tail_delay: last_delay + one_way,
            update_period,
            next_update: self.now + update_period,
            congested: false,
        };
        let slot = match self.free.pop() {
            Some(s) => {
                self.flows[s] = Some(flow);
                s
            }
            None => {
                self.flows.push(Some(flow));
                self.flows.len() - 1
            }
        };
        self.slot_of[id] = Some(slot);
        // trace order is id order, so `active` stays sorted by id
        self.active.push(slot);
        Ok(())
    }

    fn push_chunk(fifo: &mut VecDeque<Chunk>, port: &mut PortState, slot: usize, hop: usize, units: u64) {
        port.queued += units;
        if let Some(back) = fifo.back_mut() {
            if back.slot as usize == slot && back.hop as usize == hop {
                back.units += units;
                return;
            }
        }
        fifo.push_back(Chunk { slot: slot as u32, hop: hop as u8, units });
    }

    /// Advances the network by one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        let now = self.now;
        let tick = self.cfg.tick;
        let in_window = now < self.cfg.episode_ticks();

        // congestion notifications due now
        while let Some(&Reverse((due, id))) = self.cnp.peek() {
            if due > now {
                break;
            }
            self.cnp.pop();
            if let Some(slot) = self.slot_of[id as usize] {
                if let Some(f) = self.flows[slot].as_mut() {
                    f.congested = true;
                }
            }
        }

        // arrivals whose start falls before the end of this tick's start
        while self.next_arrival < self.trace.len() {
            let start_tick = (self.trace[self.next_arrival].start / tick - 1e-9).ceil().max(0.0) as u64;
            if start_tick > now {
                break;
            }
            self.admit(self.next_arrival)?;
            self.next_arrival += 1;
        }

        // acks, rate timers, wire arrivals and injection
        for i in 0..self.active.len() {
            let slot = self.active[i];
            let f = self.flows[slot].as_mut().expect("active slot");
            while let Some(&(due, units)) = f.acks.front() {
                if due > now {
                    break;
                }
                f.acked += units;
                f.acks.pop_front();
            }
            if now >= f.next_update {
                f.state.rate = rate_update(f.state.rate, f.congested, &self.cfg.rate);
                f.congested = false;
                f.next_update += f.update_period;
            }
            let n_hops = f.hops.len();
            for h in 0..n_hops {
                let units = f.hops[h].wire.pop_front().unwrap_or(0);
                if units == 0 {
                    continue;
                }
                if h + 1 < n_hops {
                    let port = f.hops[h + 1].port;
                    Self::push_chunk(&mut self.fifo[port], &mut self.ports[port], slot, h + 1, units);
                } else {
                    f.delivered += units;
                    self.delivered += units;
                    f.acks.push_back((now + f.return_ticks, units));
                    if in_window {
                        self.window.delivered_bytes += units as f64 / UNITS;
                    }
                }
            }
            let inflight = f.injected - f.acked;
            let headroom = f.window.saturating_sub(inflight);
            let by_rate = (f.state.rate.rate * tick / 8.0 * UNITS).round() as u64;
            let want = by_rate.min(f.size_units - f.injected).min(headroom);
            if want > 0 {
                let nic = f.hops[0].port;
                if self.demand[nic].is_empty() {
                    self.nics.push(nic);
                }
                self.demand[nic].push((want, i));
            }
        }

        // NIC arbitration: each sender NIC water-fills its line rate over its
        // flows, so injection never exceeds what the NIC serves this tick
        self.nics.sort_unstable();
        for k in 0..self.nics.len() {
            let nic = self.nics[k];
            let mut d = std::mem::take(&mut self.demand[nic]);
            d.sort_unstable();
            let mut budget = (self.ports[nic].capacity * tick / 8.0 * UNITS).round() as u64;
            for (j, &(want, i)) in d.iter().enumerate() {
                let x = want.min(budget / (d.len() - j) as u64);
                budget -= x;
                if x == 0 {
                    continue;
                }
                let slot = self.active[i];
                let f = self.flows[slot].as_mut().expect("active slot");
                f.injected += x;
                self.injected += x;
                f.state.remaining = (f.size_units - f.injected) as f64 / UNITS;
                Self::push_chunk(&mut self.fifo[nic], &mut self.ports[nic], slot, 0, x);
            }
            d.clear();
            self.demand[nic] = d;
        }
        self.nics.clear();

        // FIFO service
        for (p, fifo) in self.fifo.iter_mut().enumerate() {
            if fifo.is_empty() {
                continue;
            }
            let port = &mut self.ports[p];
            let mut budget = (port.capacity * tick / 8.0 * UNITS).round() as u64;
            while budget > 0 {
                let Some(front) = fifo.front_mut() else { break };
                let take = front.units.min(budget);
                front.units -= take;
                budget -= take;
                port.queued -= take;
                port.tx += take;
                let f = self.flows[front.slot as usize].as_mut().expect("chunk owner alive");
                f.hops[front.hop as usize].served += take;
                if front.units == 0 {
                    fifo.pop_front();
                }
            }
        }

        // wires, marking, completion
        let mtu_units = self.cfg.mtu * UNITS;
        let mut finished = Vec::new();
        for i in 0..self.active.len() {
            let slot = self.active[i];
            let f = self.flows[slot].as_mut().expect("active slot");
            let n_hops = f.hops.len();
            let mut marked = false;
            for h in 0..n_hops {
                let served = std::mem::take(&mut f.hops[h].served);
                f.hops[h].wire.push_back(served);
                if served == 0 {
                    continue;
                }
                let port = &mut self.ports[f.hops[h].port];
                let packets = (served as f64 / mtu_units).ceil();
                port.total_packets += packets as u64;
                if let Some(ecn) = port.ecn {
                    let p = mark_probability(&ecn, port.queued as f64 / UNITS);
                    if p > 0.0 {
                        port.marked += served as f64 * p;
                        port.marked_packets += packets * p;
                        if !marked {
                            let p_any = 1.0 - (1.0 - p).powf(packets);
                            marked = self.rng.gen::<f64>() < p_any;
                        }
                    }
                }
                if h + 1 == n_hops {
                    f.served_last += served;
                    if f.served_last == f.size_units && f.state.finish.is_none() {
                        let per_tick = port.capacity * tick / 8.0 * UNITS;
                        let frac = (served as f64 / per_tick).min(1.0);
                        f.state.finish = Some((now as f64 + frac) * tick + f.tail_delay);
                    }
                }
            }
            if marked {
                let queueing: f64 = f
                    .hops
                    .iter()
                    .map(|h| {
                        let p = &self.ports[h.port];
                        p.queued as f64 / UNITS * 8.0 / p.capacity
                    })
                    .sum();
                let due = now + ((f.base_rtt + queueing) / tick).ceil().max(1.0) as u64;
                self.cnp.push(Reverse((due, f.state.id)));
            }
            if f.delivered == f.size_units {
                finished.push(i);
            }
        }
        for &i in finished.iter().rev() {
            let slot = self.active.remove(i);
            let f = self.flows[slot].take().expect("active slot");
            self.slot_of[f.state.id as usize] = None;
            self.free.push(slot);
            self.completed.push(f.state);
        }

        let total: u64 = self.ports.iter().map(|p| p.queued).sum();
        let total = total as f64 / UNITS;
        self.max_total_queue = self.max_total_queue.max(total);
        if total > self.cfg.buffer_total {
            return Err(SimError::BufferOverflow {
                time: self.time(),
                queued: total,
                limit: self.cfg.buffer_total,
            });
        }
        if in_window {
            let q: u64 = self.agent_links.iter().map(|&l| self.ports[l].queued).sum();
            self.window.agent_queue_sum += q as f64 / UNITS;
            self.window.ticks += 1;
        }
        self.now += 1;
        Ok(())
    }
}
