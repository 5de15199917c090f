//! Flow arrival traces: heavy-tailed background traffic with Poisson arrivals
//! plus periodic N:1 incast bursts.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topo::Topology;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cdf has no points")]
    Empty,
    #[error("cdf must end at cumulative probability 1.0, got {0}")]
    Unterminated(f64),
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("load must be in (0, 1), got {0}")]
    BadLoad(f64),
    #[error("incast fanout {fanout} must be at least 2 and below the host count {hosts}")]
    Fanout { fanout: usize, hosts: usize },
    #[error("topology needs at least two hosts")]
    TooFewHosts,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Piecewise-linear flow size distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSizeCdf {
    points: Vec<(f64, f64)>,
}

impl FlowSizeCdf {
    /// Validates `(size_bytes, cum_prob)` points.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, WorkloadError> {
        for (i, &(size, p)) in points.iter().enumerate() {
            check_point(i + 1, i.checked_sub(1).map(|j| points[j]), size, p)?;
        }
        let last = points.last().ok_or(WorkloadError::Empty)?.1;
        if last != 1.0 {
            return Err(WorkloadError::Unterminated(last));
        }
        Ok(Self { points })
    }

    /// Parses the text format: one `size_bytes cum_prob` pair per line. Blank
    /// lines and `#` comments are skipped; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut fields = body.split_whitespace();
            let mut num = |what: &str| -> Result<f64, WorkloadError> {
                let f = fields.next().ok_or_else(|| WorkloadError::Parse { line, msg: format!("missing {what}") })?;
                f.parse::<f64>().map_err(|e| WorkloadError::Parse { line, msg: format!("{what} `{f}`: {e}") })
            };
            let size = num("size")?;
            let p = num("cum_prob")?;
            if fields.next().is_some() {
                return Err(WorkloadError::Parse { line, msg: "expected two fields".into() });
            }
            check_point(line, points.last().copied(), size, p)?;
            points.push((size, p));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Mean of the distribution (sizes uniform within each segment, atom at the first point).
    pub fn mean(&self) -> f64 {
        let (s0, p0) = self.points[0];
        let mut mean = s0 * p0;
        for w in self.points.windows(2) {
            let ((a, pa), (b, pb)) = (w[0], w[1]);
            mean += (pb - pa) * (a + b) / 2.0;
        }
        mean
    }

    /// Cumulative probability at `size`.
    pub fn cdf(&self, size: f64) -> f64 {
        if size < self.points[0].0 {
            return 0.0;
        }
        for w in self.points.windows(2) {
            let ((a, pa), (b, pb)) = (w[0], w[1]);
            if size < b {
                return pa + (pb - pa) * (size - a) / (b - a);
            }
        }
        1.0
    }

    /// Inverse CDF with linear interpolation between bracketing points.
    pub fn quantile(&self, u: f64) -> f64 {
        let (s0, p0) = self.points[0];
        if u <= p0 {
            return s0;
        }
        for w in self.points.windows(2) {
            let ((a, pa), (b, pb)) = (w[0], w[1]);
            if u <= pb && pb > pa {
                return a + (u - pa) / (pb - pa) * (b - a);
            }
        }
        self.points.last().map(|p| p.0).unwrap_or(s0)
    }
}

fn check_point(line: usize, prev: Option<(f64, f64)>, size: f64, p: f64) -> Result<(), WorkloadError> {
    let err = |msg: String| Err(WorkloadError::Parse { line, msg });
    if !size.is_finite() || size < 1.0 {
        return err(format!("size {size} must be at least 1 byte"));
    }
    if !(0.0..=1.0).contains(&p) {
        return err(format!("cumulative probability {p} outside [0, 1]"));
    }
    if let Some((ps, pp)) = prev {
        if size <= ps {
            return err(format!("sizes must be strictly increasing ({size} after {ps})"));
        }
        if p < pp {
            return err(format!("cumulative probability decreases ({p} after {pp})"));
        }
    }
    Ok(())
}

pub fn load_cdf(path: &Path) -> Result<FlowSizeCdf, WorkloadError> {
    FlowSizeCdf::parse(&std::fs::read_to_string(path)?)
}

/// Inverse-transform sample, rounded to whole bytes.
pub fn sample_size(cdf: &FlowSizeCdf, u: f64) -> u64 {
    cdf.quantile(u).round().max(1.0) as u64
}

/// Built-in workloads shipped with the crate.
pub const WORKLOADS: [&str; 3] = ["fb_hadoop", "websearch", "alistorage"];

pub fn builtin_cdf(name: &str) -> Result<FlowSizeCdf, WorkloadError> {
    let text = match name {
        "fb_hadoop" => include_str!("../data/fb_hadoop.cdf"),
        "websearch" => include_str!("../data/websearch.cdf"),
        "alistorage" => include_str!("../data/alistorage.cdf"),
        other => return Err(WorkloadError::UnknownWorkload(other.to_string())),
    };
    FlowSizeCdf::parse(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncastSpec {
    pub fanout: usize,
    /// seconds between events
    pub period: f64,
    pub flow_size: u64,
}

impl Default for IncastSpec {
    fn default() -> Self {
        Self { fanout: 16, period: 1e-3, flow_size: 64_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub cdf: FlowSizeCdf,
    /// fraction of aggregate host-link capacity
    pub load: f64,
    /// seconds
    pub duration: f64,
    pub incast: Option<IncastSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowTag {
    Background,
    Incast,
}

impl fmt::Display for FlowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowTag::Background => "background",
            FlowTag::Incast => "incast",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArrival {
    /// seconds
    pub start: f64,
    /// host node index
    pub src: usize,
    pub dst: usize,
    /// bytes
    pub size: u64,
    pub tag: FlowTag,
}

/// Background arrival rate in flows per second.
pub fn arrival_rate(t: &Topology, spec: &TrafficSpec) -> f64 {
    let capacity: f64 = t.hosts().iter().map(|&h| t.host_capacity(h)).sum();
    spec.load * capacity / (8.0 * spec.cdf.mean())
}

/// Generates a trace sorted by start time; fully determined by `spec.seed`.
///
/// Background and incast traffic draw from separate random streams, so
/// toggling incasts leaves the background flows unchanged.
pub fn generate(t: &Topology, spec: &TrafficSpec) -> Result<Vec<FlowArrival>, WorkloadError> {
    let hosts = t.hosts();
    if hosts.len() < 2 {
        return Err(WorkloadError::TooFewHosts);
    }
    if !(spec.load > 0.0 && spec.load < 1.0) {
        return Err(WorkloadError::BadLoad(spec.load));
    }
    if let Some(inc) = &spec.incast {
        if inc.fanout < 2 || inc.fanout >= hosts.len() {
            return Err(WorkloadError::Fanout { fanout: inc.fanout, hosts: hosts.len() });
        }
    }

    let mut flows = Vec::new();
    let lambda = arrival_rate(t, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut now = 0.0;
    loop {
        let u: f64 = rng.gen();
        now += -(1.0 - u).ln() / lambda;
        if now >= spec.duration {
            break;
        }
        let s = rng.gen_range(0..hosts.len());
        let mut d = rng.gen_range(0..hosts.len() - 1);
        if d >= s {
            d += 1;
        }
        let size = sample_size(&spec.cdf, rng.gen());
        flows.push(FlowArrival { start: now, src: hosts[s], dst: hosts[d], size, tag: FlowTag::Background });
    }

    if let Some(inc) = &spec.incast {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1ca5_7000_0000_0001);
        let mut k = 0usize;
        loop {
            let at = k as f64 * inc.period;
            if at >= spec.duration {
                break;
            }
            let victim = k % hosts.len();
            for i in index::sample(&mut rng, hosts.len() - 1, inc.fanout).into_iter() {
                let sender = if i >= victim { i + 1 } else { i };
                flows.push(FlowArrival {
                    start: at,
                    src: hosts[sender],
                    dst: hosts[victim],
                    size: inc.flow_size,
                    tag: FlowTag::Incast,
                });
            }
            k += 1;
        }
    }
    flows.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(flows)
}

/// Offered background load: background bytes over the aggregate host capacity.
pub fn offered_load(t: &Topology, flows: &[FlowArrival], duration: f64) -> f64 {
    let capacity: f64 = t.hosts().iter().map(|&h| t.host_capacity(h)).sum();
    let bytes: f64 = flows.iter().filter(|f| f.tag == FlowTag::Background).map(|f| f.size as f64).sum();
    bytes * 8.0 / (duration * capacity)
}

#[derive(Serialize)]
struct TraceRow<'a> {
    start_s: f64,
    src: &'a str,
    dst: &'a str,
    size_bytes: u64,
    tag: FlowTag,
}

/// Writes `start_s,src,dst,size_bytes,tag` rows.
pub fn write_trace_csv<W: Write>(t: &Topology, flows: &[FlowArrival], out: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    for f in flows {
        w.serialize(TraceRow {
            start_s: f.start,
            src: t.node_id(f.src),
            dst: t.node_id(f.dst),
            size_bytes: f.size,
            tag: f.tag,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topo::default_clos;

    fn two_point() -> FlowSizeCdf {
        FlowSizeCdf::parse("1000 0.5\n10000 1.0").unwrap()
    }

    #[test]
    fn parse_two_points() {
        assert_eq!(two_point().points(), &[(1000.0, 0.5), (10000.0, 1.0)]);
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = FlowSizeCdf::parse("100 0.1\n1000 1.2\n").unwrap_err();
        assert!(matches!(e, WorkloadError::Parse { line: 2, .. }), "{e}");
        let e = FlowSizeCdf::parse("# header\n1000 0.2\n500 1.0").unwrap_err();
        assert!(matches!(e, WorkloadError::Parse { line: 3, .. }), "{e}");
        let e = FlowSizeCdf::parse("100 0.5\n200 0.4\n300 1.0").unwrap_err();
        assert!(matches!(e, WorkloadError::Parse { line: 2, .. }), "{e}");
        assert!(matches!(FlowSizeCdf::parse("100 0.5"), Err(WorkloadError::Unterminated(_))));
        assert!(matches!(FlowSizeCdf::parse(""), Err(WorkloadError::Empty)));
        assert!(matches!(FlowSizeCdf::parse("0.5 1.0"), Err(WorkloadError::Parse { line: 1, .. })));
    }

    #[test]
    fn inverse_transform() {
        let c = two_point();
        assert_eq!(sample_size(&c, 0.5), 1000);
        assert_eq!(sample_size(&c, 0.75), 5500);
        assert_eq!(sample_size(&c, 0.1), 1000);
        assert_eq!(sample_size(&c, 1.0), 10000);
        assert_eq!(c.mean(), 0.5 * 1000.0 + 0.5 * 5500.0);
    }

    #[test]
    fn builtin_cdfs_load() {
        for w in WORKLOADS {
            let c = builtin_cdf(w).unwrap();
            assert!(c.mean() > 1e4, "{w}");
        }
        assert!(builtin_cdf("websearch").unwrap().mean() > builtin_cdf("fb_hadoop").unwrap().mean());
        assert!(builtin_cdf("nope").is_err());
    }

    fn spec(load: f64, duration: f64, incast: Option<IncastSpec>, seed: u64) -> TrafficSpec {
        TrafficSpec { cdf: builtin_cdf("fb_hadoop").unwrap(), load, duration, incast, seed }
    }

    #[test]
    fn arrival_rate_formula() {
        let t = default_clos();
        let mut s = spec(0.6, 0.025, None, 1);
        s.cdf = FlowSizeCdf::new(vec![(100_000.0, 1.0)]).unwrap();
        assert!((arrival_rate(&t, &s) - 450_000.0).abs() < 1e-6);
        let n = generate(&t, &s).unwrap().len() as f64;
        let expected = 450_000.0 * 0.025;
        assert!((n - expected).abs() < 4.0 * expected.sqrt(), "{n}");
    }

    #[test]
    fn incast_events() {
        let t = default_clos();
        let flows = generate(&t, &spec(0.6, 0.025, Some(IncastSpec::default()), 3)).unwrap();
        let incast: Vec<_> = flows.iter().filter(|f| f.tag == FlowTag::Incast).collect();
        assert_eq!(incast.len(), 25 * 16);
        for k in 0..25 {
            let ev: Vec<_> = incast.iter().filter(|f| (f.start - k as f64 * 1e-3).abs() < 1e-12).collect();
            assert_eq!(ev.len(), 16);
            let mut senders: Vec<usize> = ev.iter().map(|f| f.src).collect();
            senders.sort();
            senders.dedup();
            assert_eq!(senders.len(), 16);
            assert!(ev.iter().all(|f| f.dst == ev[0].dst && f.src != f.dst && f.size == 64_000));
        }
    }

    #[test]
    fn trace_invariants_and_determinism() {
        let t = default_clos();
        let s = spec(0.6, 0.01, Some(IncastSpec::default()), 9);
        let a = generate(&t, &s).unwrap();
        let b = generate(&t, &s).unwrap();
        assert_eq!(a, b);
        let hosts = t.hosts();
        for w in a.windows(2) {
            assert!(w[0].start <= w[1].start);
        }
        for f in &a {
            assert!(f.start >= 0.0 && f.start < 0.01);
            assert!(f.src != f.dst && f.size >= 1);
            assert!(hosts.contains(&f.src) && hosts.contains(&f.dst));
        }
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_trace_csv(&t, &a, &mut csv_a).unwrap();
        write_trace_csv(&t, &b, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(String::from_utf8(csv_a).unwrap().starts_with("start_s,src,dst,size_bytes,tag\n"));
    }

    #[test]
    fn incast_does_not_perturb_background() {
        let t = default_clos();
        let on = generate(&t, &spec(0.6, 0.01, Some(IncastSpec::default()), 4)).unwrap();
        let off = generate(&t, &spec(0.6, 0.01, None, 4)).unwrap();
        let bg: Vec<_> = on.into_iter().filter(|f| f.tag == FlowTag::Background).collect();
        assert_eq!(bg, off);
    }

    #[test]
    fn rejects_bad_specs() {
        let t = default_clos();
        let inc = IncastSpec { fanout: 24, ..Default::default() };
        assert!(matches!(generate(&t, &spec(0.6, 0.01, Some(inc), 1)), Err(WorkloadError::Fanout { .. })));
        assert!(matches!(generate(&t, &spec(1.0, 0.01, None, 1)), Err(WorkloadError::BadLoad(_))));
    }
}
