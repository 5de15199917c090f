//! Scenario catalog, policy rollouts, metric aggregation and report
//! comparison.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{static_ecn, train_independent, IndependentAgents, IndependentOutcome, STATIC_P_MAX};
use crate::gnn::{self, agent_features, q_values, ActionTable, AgentGraph, GnnError, ModelCheckpoint, MpnnParams};
use crate::netsim::{fct_slowdown, EcnConfig, SimConfig, SimError, Simulation};
use crate::rl::{self, NetEnv, RlError, TrainConfig, TrainOutcome};
use crate::topo::{default_clos, BranchSpec, Change, NodeKind, Topology, TopologyError};
use crate::workload::{builtin_cdf, generate, load_cdf, FlowTag, IncastSpec, TrafficSpec, WorkloadError};

pub const REPORT_SCHEMA: u32 = 1;
pub const CONFIG_SCHEMA: u32 = 1;
/// Lower edge of the first closed size bucket and the growth factor.
const BUCKET_BASE: u64 = 1024;
const BUCKET_FACTOR: u64 = 4;
/// Buckets above `[0, 1 KiB)`: 1 KiB, 4 KiB, ..., 64 MiB, then open-ended.
const BUCKET_EDGES: usize = 9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("reports disagree on size buckets: {0}")]
    BucketMismatch(String),
    #[error("no report named {0:?}")]
    MissingReference(String),
    #[error("policy does not fit the scenario: {0}")]
    PolicyMismatch(String),
    #[error("bad scenario: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// How to derive a scenario's fabric from the default 24-host Clos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "lowercase")]
pub enum TopologyRecipe {
    Base,
    /// Remove the first `n` of leaf00-spine00, leaf02-spine01, leaf01-spine01, leaf03-spine00.
    Failures(usize),
    /// Attach a new core, two spines and six hosts.
    Branch,
    /// Grow to `n` hosts, adding them round-robin over the leaves.
    Hosts(usize),
}

const FAILED_CABLES: [(&str, &str); 4] =
    [("leaf00", "spine00"), ("leaf02", "spine01"), ("leaf01", "spine01"), ("leaf03", "spine00")];

impl TopologyRecipe {
    pub fn build(&self) -> Result<Topology, HarnessError> {
        let base = default_clos();
        match *self {
            TopologyRecipe::Base => Ok(base),
            TopologyRecipe::Failures(n) => {
                if n > FAILED_CABLES.len() {
                    return Err(HarnessError::BadScenario(format!("at most {} failures supported", FAILED_CABLES.len())));
                }
                let mut t = base;
                for (a, b) in &FAILED_CABLES[..n] {
                    t = t.mutate(&Change::RemoveLink { a: a.to_string(), b: b.to_string() })?;
                }
                Ok(t)
            }
            TopologyRecipe::Branch => Ok(base.mutate(&Change::AddBranch(BranchSpec::default()))?),
            TopologyRecipe::Hosts(n) => {
                let have = base.hosts().len();
                if n < have {
                    return Err(HarnessError::BadScenario(format!("cannot shrink {have} hosts to {n}")));
                }
                let leaves: Vec<String> = base.nodes_of(NodeKind::Leaf).iter().map(|&l| base.node_id(l).to_string()).collect();
                let mut t = base;
                for (i, leaf) in leaves.iter().enumerate() {
                    let count = (n - have) / leaves.len() + usize::from(i < (n - have) % leaves.len());
                    if count > 0 {
                        t = t.mutate(&Change::AddHosts { leaf: leaf.clone(), count })?;
                    }
                }
                Ok(t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub topology: TopologyRecipe,
    pub workload: String,
    pub load: f64,
    pub incast: bool,
    /// seconds
    pub duration: f64,
    pub seeds: Vec<u64>,
}

impl ScenarioSpec {
    fn new(name: &str, topology: TopologyRecipe, workload: &str, load: f64, incast: bool) -> Self {
        Self {
            name: name.to_string(),
            topology,
            workload: workload.to_string(),
            load,
            incast,
            duration: 25e-3,
            seeds: vec![1, 2, 3],
        }
    }

    pub fn traffic(&self, seed: u64) -> Result<TrafficSpec, HarnessError> {
        Ok(TrafficSpec {
            cdf: builtin_cdf(&self.workload)?,
            load: self.load,
            duration: self.duration,
            incast: self.incast.then(IncastSpec::default),
            seed,
        })
    }

    /// One of the six workload x incast cells at 60% load.
    pub fn is_workload_cell(&self) -> bool {
        self.topology == TopologyRecipe::Base && self.load == 0.6
    }
}

/// The evaluation grid: three workloads with and without incast at 60%
/// load, then load, failure, branch and host-count shifts on fb_hadoop with
/// incast.
pub fn scenario_catalog() -> Vec<ScenarioSpec> {
    use TopologyRecipe::*;
    let mut v = Vec::new();
    for w in crate::workload::WORKLOADS {
        v.push(ScenarioSpec::new(&format!("{w}-incast"), Base, w, 0.6, true));
        v.push(ScenarioSpec::new(&format!("{w}-noincast"), Base, w, 0.6, false));
    }
    v.push(ScenarioSpec::new("load70", Base, "fb_hadoop", 0.7, true));
    v.push(ScenarioSpec::new("load80", Base, "fb_hadoop", 0.8, true));
    v.push(ScenarioSpec::new("failures-1", Failures(1), "fb_hadoop", 0.6, true));
    v.push(ScenarioSpec::new("failures-2", Failures(2), "fb_hadoop", 0.6, true));
    v.push(ScenarioSpec::new("branch", Branch, "fb_hadoop", 0.6, true));
    v.push(ScenarioSpec::new("hosts-32", Hosts(32), "fb_hadoop", 0.6, true));
    v.push(ScenarioSpec::new("hosts-40", Hosts(40), "fb_hadoop", 0.6, true));
    v
}

pub fn scenario(name: &str) -> Result<ScenarioSpec, HarnessError> {
    scenario_catalog().into_iter().find(|s| s.name == name).ok_or_else(|| HarnessError::UnknownScenario(name.to_string()))
}

/// A controller that sets ECN configurations on the agent ports.
#[derive(Debug, Clone)]
pub enum Policy {
    GraphCc { params: MpnnParams, table: ActionTable },
    /// Independently trained per-port networks.
    AccLike { agents: IndependentAgents, table: ActionTable },
    /// Capacity-scaled fixed thresholds.
    Static { p_max: f64 },
}

impl Policy {
    pub fn label(&self) -> &'static str {
        match self {
            Policy::GraphCc { .. } => "graphcc",
            Policy::AccLike { .. } => "acc-like",
            Policy::Static { .. } => "static",
        }
    }

    pub fn static_default() -> Self {
        Policy::Static { p_max: STATIC_P_MAX }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self, HarnessError> {
        let (params, table) = ck.params()?;
        Ok(Policy::GraphCc { params, table })
    }

    /// Greedy configurations for the next interval and the number of
    /// inter-agent messages it took; `None` keeps the current ones.
    fn decide(&self, g: &AgentGraph, sim: &Simulation) -> Result<Option<(Vec<EcnConfig>, u64)>, HarnessError> {
        match self {
            Policy::Static { .. } => Ok(None),
            Policy::GraphCc { params, table } => {
                let q = q_values(params, g, &agent_features(sim))?;
                let messages = (params.rounds * g.edge_count()) as u64;
                Ok(Some((table.resolve(&gnn::greedy_actions(&q)?)?, messages)))
            }
            Policy::AccLike { agents, table } => {
                let q = agents.q_values(&agent_features(sim))?;
                Ok(Some((table.resolve(&gnn::greedy_actions(&q)?)?, 0)))
            }
        }
    }

    fn check_fits(&self, g: &AgentGraph) -> Result<(), HarnessError> {
        if let Policy::AccLike { agents, .. } = self {
            if agents.nets.len() != g.len() {
                return Err(HarnessError::PolicyMismatch(format!(
                    "{} per-agent networks for {} agents",
                    agents.nets.len(),
                    g.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub sim: SimConfig,
    /// Leave incast flows out of the FCT statistics.
    pub exclude_incast: bool,
    pub port_log: bool,
    /// Drain budget after the episode, in episode lengths.
    pub drain_factor: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { sim: SimConfig::default(), exclude_incast: false, port_log: false, drain_factor: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    /// bytes, inclusive
    pub lo: u64,
    /// bytes, exclusive; `None` for the open-ended top bucket
    pub hi: Option<u64>,
    pub count: usize,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub policy: String,
    pub seeds: Vec<u64>,
    pub buckets: Vec<BucketStats>,
    pub mean_slowdown: f64,
    /// bits/s per host, over the measurement window
    pub mean_throughput: f64,
    /// bytes per agent port, over the measurement window
    pub mean_queue: f64,
    pub total_flows: usize,
    pub completed: usize,
    pub unfinished: usize,
    pub excluded_incast: bool,
    /// Agent intervals simulated, summed over seeds.
    pub intervals: u64,
    pub messages: u64,
    /// Agent-interval configuration changes.
    pub ecn_changes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    /// Not a CSV column; the CLI writes one file per seed.
    #[serde(skip)]
    pub seed: u64,
    pub flow_id: u64,
    pub size: u64,
    pub start: f64,
    pub finish: f64,
    pub slowdown: f64,
    pub tag: FlowTag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortLogRow {
    #[serde(skip)]
    pub seed: u64,
    pub t: f64,
    pub port: String,
    pub u: f64,
    pub q_bytes: f64,
    pub ecn_rate: f64,
    pub kmin: f64,
    pub kmax: f64,
    pub pmax: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunArtifacts {
    pub flows: Vec<FlowRecord>,
    pub port_log: Vec<PortLogRow>,
}

/// Bucket edges `[0, 1K, 4K, ..., 64M]`.
pub fn bucket_edges() -> Vec<u64> {
    let mut e = vec![0];
    let mut b = BUCKET_BASE;
    for _ in 0..BUCKET_EDGES {
        e.push(b);
        b *= BUCKET_FACTOR;
    }
    e
}

pub fn bucket_of(size: u64, edges: &[u64]) -> usize {
    edges.partition_point(|&e| e <= size) - 1
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

fn bucket_stats(flows: &[(u64, f64)]) -> Vec<BucketStats> {
    let edges = bucket_edges();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); edges.len()];
    for &(size, s) in flows {
        per[bucket_of(size, &edges)].push(s);
    }
    per.iter_mut()
        .enumerate()
        .map(|(i, v)| {
            v.sort_by(f64::total_cmp);
            BucketStats {
                lo: edges[i],
                hi: edges.get(i + 1).copied(),
                count: v.len(),
                median: percentile(v, 0.5),
                p95: percentile(v, 0.95),
                p99: percentile(v, 0.99),
            }
        })
        .collect()
}

/// Rolls `policy` out over `scenario` for every seed: the episode plus drain
/// time until all flows finish or the drain budget runs out.
pub fn run(
    scenario: &ScenarioSpec,
    policy: &Policy,
    seeds: &[u64],
    opts: &RunOptions,
) -> Result<(MetricsReport, RunArtifacts), HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::BadScenario("no seeds".into()));
    }
    let topo = scenario.topology.build()?;
    let g = AgentGraph::from_topology(&topo)?;
    policy.check_fits(&g)?;
    let n_hosts = topo.hosts().len() as f64;
    let mut art = RunArtifacts::default();
    let mut pooled: Vec<(u64, f64)> = Vec::new();
    let (mut thr, mut queue) = (0.0, 0.0);
    let (mut total, mut completed, mut messages, mut changes, mut intervals) = (0usize, 0usize, 0u64, 0u64, 0u64);
    for &seed in seeds {
        let trace = generate(&topo, &scenario.traffic(seed)?)?;
        total += trace.len();
        let cfg = SimConfig { seed, episode: scenario.duration, ..opts.sim.clone() };
        let mut sim = Simulation::new(&topo, trace, cfg.clone(), EcnConfig { k_min: 100e3, k_max: 400e3, p_max: 0.25 })?;
        if let Policy::Static { p_max } = policy {
            let configs: Vec<EcnConfig> = sim.agent_links().iter().map(|&l| static_ecn(topo.links()[l].capacity, *p_max)).collect();
            sim.apply_actions(&configs)?;
        }
        let steps = cfg.steps_per_episode();
        let mut current: Vec<EcnConfig> = sim.agent_links().iter().map(|&l| sim.port(l).ecn.expect("agent port")).collect();
        for step in 0..steps * (1 + opts.drain_factor) {
            if step >= steps && sim.is_drained() {
                break;
            }
            if let Some((configs, m)) = policy.decide(&g, &sim)? {
                // the initial install is not a change
                if step > 0 {
                    changes += configs.iter().zip(&current).filter(|(a, b)| a != b).count() as u64;
                }
                messages += m;
                sim.apply_actions(&configs)?;
                current = configs;
            }
            sim.run_interval()?;
            intervals += 1;
            let obs = sim.observe_agents();
            if opts.port_log {
                for (i, o) in obs.iter().enumerate() {
                    let l = sim.agent_links()[i];
                    art.port_log.push(PortLogRow {
                        seed,
                        t: sim.time(),
                        port: topo.link_label(l),
                        u: o.utilization,
                        q_bytes: sim.port(l).queue(),
                        ecn_rate: o.ecn_rate,
                        kmin: current[i].k_min,
                        kmax: current[i].k_max,
                        pmax: current[i].p_max,
                    });
                }
            }
        }
        let unfinished = sim.trace_len() - sim.completed().len();
        if unfinished > 0 {
            log::warn!("{}: seed {seed}: {unfinished} flows unfinished after drain", scenario.name);
        }
        completed += sim.completed().len();
        for f in sim.completed() {
            let s = fct_slowdown(f, &topo)?;
            art.flows.push(FlowRecord {
                seed,
                flow_id: f.id,
                size: f.size,
                start: f.start,
                finish: f.finish.expect("completed"),
                slowdown: s,
                tag: f.tag,
            });
            if !(opts.exclude_incast && f.tag == FlowTag::Incast) {
                pooled.push((f.size, s));
            }
        }
        let ws = sim.window_stats();
        thr += ws.delivered_bytes * 8.0 / scenario.duration / n_hosts;
        queue += ws.agent_queue_sum / (ws.ticks.max(1) as f64 * g.len() as f64);
    }
    let k = seeds.len() as f64;
    let mean_slowdown = if pooled.is_empty() { 0.0 } else { pooled.iter().map(|p| p.1).sum::<f64>() / pooled.len() as f64 };
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA,
        scenario: scenario.name.clone(),
        policy: policy.label().to_string(),
        seeds: seeds.to_vec(),
        buckets: bucket_stats(&pooled),
        mean_slowdown,
        mean_throughput: thr / k,
        mean_queue: queue / k,
        total_flows: total,
        completed,
        unfinished: total - completed,
        excluded_incast: opts.exclude_incast,
        intervals,
        messages,
        ecn_changes: changes,
    };
    Ok((report, art))
}

pub fn write_report_csv<W: Write>(r: &MetricsReport, out: W) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Row<'a> {
        schema_version: u32,
        scenario: &'a str,
        policy: &'a str,
        bucket_lo: u64,
        bucket_hi: Option<u64>,
        count: usize,
        median: Option<f64>,
        p95: Option<f64>,
        p99: Option<f64>,
    }
    let mut w = csv::Writer::from_writer(out);
    for b in &r.buckets {
        w.serialize(Row {
            schema_version: r.schema_version,
            scenario: &r.scenario,
            policy: &r.policy,
            bucket_lo: b.lo,
            bucket_hi: b.hi,
            count: b.count,
            median: b.median,
            p95: b.p95,
            p99: b.p99,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flows_csv<W: Write>(flows: &[FlowRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for f in flows {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_port_log_csv<W: Write>(rows: &[PortLogRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRatio {
    pub lo: u64,
    pub hi: Option<u64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    /// Per bucket: statistic of this report over the reference's.
    pub buckets: Vec<BucketRatio>,
    /// Relative differences in percent.
    pub slowdown_delta: f64,
    pub throughput_delta: f64,
    pub queue_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

/// `(other - reference) / reference` in percent.
pub fn relative_delta(reference: f64, other: f64) -> f64 {
    if reference == 0.0 {
        if other == 0.0 {
            0.0
        } else {
            f64::INFINITY * other.signum()
        }
    } else {
        (other - reference) / reference * 100.0
    }
}

/// Signed percentage with one decimal, e.g. `+20.0%`.
pub fn format_delta(pct: f64) -> String {
    format!("{pct:+.1}%")
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        _ => None,
    }
}

/// Normalizes every report against the one named `reference`.
pub fn compare(reports: &[(String, MetricsReport)], reference: &str) -> Result<Comparison, HarnessError> {
    let (_, base) = reports
        .iter()
        .find(|(n, _)| n == reference)
        .ok_or_else(|| HarnessError::MissingReference(reference.to_string()))?;
    let edges = |r: &MetricsReport| r.buckets.iter().map(|b| (b.lo, b.hi)).collect::<Vec<_>>();
    let rows = reports
        .iter()
        .map(|(name, r)| {
            if edges(r) != edges(base) {
                return Err(HarnessError::BucketMismatch(format!("{name} vs {reference}")));
            }
            Ok(ComparisonRow {
                name: name.clone(),
                buckets: r
                    .buckets
                    .iter()
                    .zip(&base.buckets)
                    .map(|(o, b)| BucketRatio {
                        lo: o.lo,
                        hi: o.hi,
                        median: ratio(o.median, b.median),
                        p95: ratio(o.p95, b.p95),
                        p99: ratio(o.p99, b.p99),
                    })
                    .collect(),
                slowdown_delta: relative_delta(base.mean_slowdown, r.mean_slowdown),
                throughput_delta: relative_delta(base.mean_throughput, r.mean_throughput),
                queue_delta: relative_delta(base.mean_queue, r.mean_queue),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison { schema_version: REPORT_SCHEMA, reference: reference.to_string(), rows })
}

/// Long-format CSV: `policy,metric,bucket_lo,bucket_hi,value`.
pub fn write_comparison_csv<W: Write>(c: &Comparison, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "metric", "bucket_lo", "bucket_hi", "value"])?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let optf = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &c.rows {
        for b in &r.buckets {
            for (m, v) in [("median_ratio", b.median), ("p95_ratio", b.p95), ("p99_ratio", b.p99)] {
                w.write_record([r.name.as_str(), m, &b.lo.to_string(), &opt(b.hi), &optf(v)])?;
            }
        }
        for (m, v) in [("mean_slowdown_delta", r.slowdown_delta), ("mean_throughput_delta", r.throughput_delta), ("mean_queue_delta", r.queue_delta)] {
            w.write_record([r.name.as_str(), m, "", "", &format_delta(v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Traffic used for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    pub workload: String,
    /// Overrides `workload` with a CDF file.
    pub cdf_path: Option<PathBuf>,
    pub load: f64,
    pub incast: Option<IncastSpec>,
    /// Episode `e` uses trace seed `seed + e`.
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self { workload: "fb_hadoop".into(), cdf_path: None, load: 0.6, incast: Some(IncastSpec::default()), seed: 10_000 }
    }
}

/// Per-field replacements applied to catalog scenarios.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioOverrides {
    pub load: Option<f64>,
    pub incast: Option<bool>,
    /// seconds
    pub duration: Option<f64>,
    pub seeds: Option<Vec<u64>>,
}

impl ScenarioOverrides {
    pub fn apply(&self, mut s: ScenarioSpec) -> ScenarioSpec {
        if let Some(l) = self.load {
            s.load = l;
        }
        if let Some(i) = self.incast {
            s.incast = i;
        }
        if let Some(d) = self.duration {
            s.duration = d;
        }
        if let Some(seeds) = &self.seeds {
            s.seeds = seeds.clone();
        }
        s
    }
}

/// Everything a training or evaluation run reads from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub traffic: TrafficConfig,
    pub topology: TopologyRecipe,
    pub eval_seeds: Vec<u64>,
    pub static_p_max: f64,
    pub exclude_incast: bool,
    pub scenario_overrides: ScenarioOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            traffic: TrafficConfig::default(),
            topology: TopologyRecipe::Base,
            eval_seeds: vec![1, 2, 3],
            static_p_max: STATIC_P_MAX,
            exclude_incast: false,
            scenario_overrides: ScenarioOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(s)?;
        if c.schema_version != CONFIG_SCHEMA {
            return Err(HarnessError::BadScenario(format!("unsupported config schema {}", c.schema_version)));
        }
        c.sim.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// A catalog scenario with this config's overrides applied.
    pub fn scenario(&self, name: &str) -> Result<ScenarioSpec, HarnessError> {
        let s = self.scenario_overrides.apply(scenario(name)?);
        if !(s.load > 0.0 && s.duration > 0.0) || s.seeds.is_empty() {
            return Err(HarnessError::BadScenario(format!("{name}: overrides leave an empty scenario")));
        }
        Ok(s)
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { sim: self.sim.clone(), exclude_incast: self.exclude_incast, ..RunOptions::default() }
    }

    fn training_env(&self, topology: &TopologyRecipe, traffic: TrafficSpec) -> Result<NetEnv, HarnessError> {
        Ok(NetEnv::new(topology.build()?, traffic, self.sim.clone(), self.train.reward)?)
    }

    fn training_traffic(&self) -> Result<TrafficSpec, HarnessError> {
        let cdf = match &self.traffic.cdf_path {
            Some(p) => load_cdf(p)?,
            None => builtin_cdf(&self.traffic.workload)?,
        };
        Ok(TrafficSpec { cdf, load: self.traffic.load, duration: self.sim.episode, incast: self.traffic.incast, seed: self.traffic.seed })
    }
}

/// Trains the message-passing model on the configured setup.
pub fn train_graphcc(cfg: &ExperimentConfig) -> Result<(TrainOutcome, ModelCheckpoint), HarnessError> {
    let mut env = cfg.training_env(&cfg.topology, cfg.training_traffic()?)?;
    let out = rl::train(&mut env, &cfg.train)?;
    let ck = ModelCheckpoint::new(&out.params, env.table(), cfg.sim.queue_scale, cfg.train.seed)?;
    Ok((out, ck))
}

/// Trains ACC-like agents on `scenario`'s own fabric and traffic mix.
pub fn train_acc(cfg: &ExperimentConfig, scenario: &ScenarioSpec) -> Result<(IndependentOutcome, ActionTable), HarnessError> {
    let mut traffic = scenario.traffic(cfg.traffic.seed)?;
    traffic.duration = cfg.sim.episode;
    let mut env = cfg.training_env(&scenario.topology, traffic)?;
    let out = train_independent(&mut env, &cfg.train)?;
    Ok((out, env.table().clone()))
}
