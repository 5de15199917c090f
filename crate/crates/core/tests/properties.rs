use std::collections::VecDeque;

use dcnlab::gnn::{build_action_table, port_features, AgentGraph};
use dcnlab::harness::{bucket_edges, bucket_of, percentile};
use dcnlab::netsim::{mark_probability, PortState};
use dcnlab::rl::{reward, RewardWeights};
use dcnlab::topo::{Change, NodeKind};
use dcnlab::workload::{builtin_cdf, generate, FlowTag, IncastSpec, WORKLOADS};
use dcnlab::{build_clos, EcnConfig, FlowArrival, SimConfig, Simulation, Topology, TrafficSpec};
use proptest::prelude::*;

fn fabric() -> impl Strategy<Value = Topology> {
    (1usize..5, 1usize..5, 1usize..4, 1u32..5).prop_map(|(h, l, s, c)| {
        build_clos(h, l, s, 10e9 * c as f64, 40e9, 1e-6).unwrap()
    })
}

fn connected(t: &Topology) -> bool {
    let mut seen = vec![false; t.nodes().len()];
    let mut q = VecDeque::from([0]);
    seen[0] = true;
    while let Some(n) = q.pop_front() {
        for &l in t.out_links(n) {
            let d = t.links()[l].dst;
            if !seen[d] {
                seen[d] = true;
                q.push_back(d);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn ecn() -> impl Strategy<Value = EcnConfig> {
    (1.0f64..1e6, 0.0f64..1e6, 0.001f64..=1.0).prop_map(|(k, extra, p)| EcnConfig::new(k, k + extra, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agents_are_switch_egress_links(t in fabric()) {
        let expected: usize = (0..t.nodes().len())
            .filter(|&n| t.nodes()[n].kind.is_switch())
            .map(|n| t.out_links(n).len())
            .sum();
        prop_assert_eq!(t.agents().len(), expected);
        for a in t.agents() {
            prop_assert!(t.nodes()[t.links()[a.link()].src].kind.is_switch());
        }
    }

    #[test]
    fn neighborhoods_are_dual(t in fabric()) {
        for &u in t.agents() {
            for v in t.ingress_neighbors(u).unwrap() {
                prop_assert!(t.egress_neighbors(v).unwrap().contains(&u));
            }
            for v in t.egress_neighbors(u).unwrap() {
                prop_assert!(t.ingress_neighbors(v).unwrap().contains(&u));
            }
        }
        let g = AgentGraph::from_topology(&t).unwrap();
        for v in 0..g.len() {
            for &u in g.ingress(v) {
                prop_assert!(g.egress(u).contains(&v));
            }
        }
    }

    #[test]
    fn ecmp_is_a_pure_function(t in fabric(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>(), key in any::<u64>()) {
        let hosts = t.hosts();
        let (src, dst) = (hosts[a.index(hosts.len())], hosts[b.index(hosts.len())]);
        prop_assume!(src != dst);
        let p = t.ecmp_route(src, dst, key).unwrap();
        prop_assert_eq!(&p, &t.clone().ecmp_route(src, dst, key).unwrap());
        prop_assert_eq!(t.links()[p[0]].src, src);
        prop_assert_eq!(t.links()[*p.last().unwrap()].dst, dst);
        for w in p.windows(2) {
            prop_assert_eq!(t.links()[w[0]].dst, t.links()[w[1]].src);
        }
    }

    #[test]
    fn link_removal_never_disconnects(t in fabric(), pick in any::<prop::sample::Index>()) {
        let l = t.links()[pick.index(t.links().len())];
        let change = Change::RemoveLink { a: t.node_id(l.src).into(), b: t.node_id(l.dst).into() };
        if let Ok(m) = t.mutate(&change) {
            prop_assert!(connected(&m));
            prop_assert_eq!(m.links().len() + 2, t.links().len());
        }
    }

    #[test]
    fn red_is_bounded_and_monotone(c in ecn(), q1 in 0.0f64..2e6, q2 in 0.0f64..2e6) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (plo, phi) = (mark_probability(&c, lo), mark_probability(&c, hi));
        prop_assert!((0.0..=1.0).contains(&plo) && (0.0..=1.0).contains(&phi));
        prop_assert!(plo <= phi);
        prop_assert_eq!(mark_probability(&c, c.k_min * 0.999), 0.0);
        prop_assert_eq!(mark_probability(&c, c.k_max), 1.0);
        if c.k_max > c.k_min {
            prop_assert!(mark_probability(&c, c.k_min + 0.999 * (c.k_max - c.k_min)) <= c.p_max);
        }
    }

    #[test]
    fn rewards_stay_in_unit_interval(q in -1.0f64..3.0, u in -1.0f64..3.0, w1 in 0.0f64..=1.0) {
        let w = RewardWeights { w1, w2: 1.0 - w1 };
        let (r, clamped) = reward(q, u, &w);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        prop_assert_eq!(clamped, !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&u));
    }

    #[test]
    fn fresh_port_features_are_zero_or_unit(cap in 1e9f64..400e9, c in ecn()) {
        let p = PortState::new(cap, Some(c));
        for x in port_features(&p) {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn every_size_lands_in_exactly_one_bucket(size in 0u64..u64::MAX / 2) {
        let e = bucket_edges();
        let b = bucket_of(size, &e);
        prop_assert!(e[b] <= size);
        prop_assert!(b + 1 == e.len() || size < e[b + 1]);
    }

    #[test]
    fn percentiles_are_ordered(mut xs in prop::collection::vec(0.0f64..1e4, 1..200)) {
        xs.sort_by(f64::total_cmp);
        let (m, p95, p99) = (percentile(&xs, 0.5).unwrap(), percentile(&xs, 0.95).unwrap(), percentile(&xs, 0.99).unwrap());
        prop_assert!(m <= p95 && p95 <= p99);
        prop_assert!(xs.contains(&m) && xs.contains(&p99));
    }

    #[test]
    fn traces_respect_their_spec(
        t in fabric(),
        w in 0usize..WORKLOADS.len(),
        load in 0.1f64..0.9,
        fanout in 2usize..8,
        seed in any::<u64>(),
    ) {
        let n_hosts = t.hosts().len();
        prop_assume!(n_hosts > fanout);
        let spec = TrafficSpec {
            cdf: builtin_cdf(WORKLOADS[w]).unwrap(),
            load,
            duration: 2e-3,
            incast: Some(IncastSpec { fanout, period: 5e-4, flow_size: 8000 }),
            seed,
        };
        let flows = generate(&t, &spec).unwrap();
        prop_assert!(flows.windows(2).all(|p| p[0].start <= p[1].start));
        for f in &flows {
            prop_assert!((0.0..spec.duration).contains(&f.start));
            prop_assert!(f.src != f.dst && f.size >= 1);
            prop_assert_eq!(t.nodes()[f.src].kind, NodeKind::Host);
            prop_assert_eq!(t.nodes()[f.dst].kind, NodeKind::Host);
        }
        // incast events share a start time and a destination; their senders are distinct
        let mut incast: Vec<&FlowArrival> = flows.iter().filter(|f| f.tag == FlowTag::Incast).collect();
        incast.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.src.cmp(&b.src)));
        for ev in incast.chunk_by(|a, b| a.start == b.start) {
            prop_assert!(ev.windows(2).all(|p| p[0].src != p[1].src));
        }
    }

    #[test]
    fn action_table_is_a_stable_bijection(i in 0usize..120) {
        let a = build_action_table();
        let b = build_action_table();
        prop_assert_eq!(a.len(), 120);
        let c = a.get(i).unwrap();
        prop_assert_eq!(a.index_of(&c), Some(i));
        prop_assert_eq!(b.get(i), Some(c));
    }
}

fn small_trace() -> impl Strategy<Value = Vec<FlowArrival>> {
    prop::collection::vec((0.0f64..300e-6, 0usize..4, 1usize..4, 1u64..200_000), 1..12).prop_map(|v| {
        // host indices on a 2x2 fabric; offsets keep src != dst
        let mut flows: Vec<FlowArrival> = v
            .into_iter()
            .map(|(start, s, off, size)| FlowArrival { start, src: s, dst: (s + off) % 4, size, tag: FlowTag::Background })
            .collect();
        flows.sort_by(|a, b| a.start.total_cmp(&b.start));
        flows
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_conserves_and_respects_capacity(trace in small_trace(), c in ecn()) {
        let t = build_clos(2, 2, 2, 10e9, 10e9, 1e-6).unwrap();
        let hosts = t.hosts();
        let trace: Vec<FlowArrival> =
            trace.into_iter().map(|f| FlowArrival { src: hosts[f.src], dst: hosts[f.dst], ..f }).collect();
        let cfg = SimConfig { episode: 1e-3, buffer_total: 400e3, ..SimConfig::default() };
        let tick = cfg.tick;
        let buffer = cfg.buffer_total;
        let mut sim = Simulation::new(&t, trace, cfg, c).unwrap();
        let mut twin = sim.clone();
        for _ in 0..sim.config().episode_ticks() {
            let before: Vec<f64> = sim.ports().iter().map(PortState::tx_bytes).collect();
            sim.step().unwrap();
            for (l, p) in sim.ports().iter().enumerate() {
                let sent = p.tx_bytes() - before[l];
                prop_assert!(sent <= t.links()[l].capacity * tick / 8.0 * (1.0 + 1e-9), "link {} sent {}", l, sent);
            }
            prop_assert!(sim.total_queued() <= buffer * (1.0 + 1e-9));
            prop_assert!(sim.accounting().relative_error() <= 1e-6);
        }
        for _ in 0..sim.config().steps_per_episode() {
            twin.run_interval().unwrap();
        }
        prop_assert_eq!(sim.completed(), twin.completed());
    }
}

#[test]
fn agent_ids_round_trip_through_links() {
    let t = build_clos(3, 3, 2, 25e9, 100e9, 1e-6).unwrap();
    for (i, &a) in t.agents().iter().enumerate() {
        assert_eq!(t.agent_index(a).unwrap(), i);
        assert_eq!(t.agent_of_link(a.link()).unwrap(), a);
    }
    assert!(t.agent_of_link(t.out_links(t.hosts()[0])[0]).is_err());
}
