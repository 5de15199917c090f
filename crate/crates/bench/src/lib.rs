//! Fixtures shared by the benchmarks.

use dcnlab::baselines::static_ecn;
use dcnlab::gnn::{AgentGraph, Features};
use dcnlab::harness::scenario;
use dcnlab::topo::default_clos;
use dcnlab::workload::generate;
use dcnlab::{MpnnParams, SimConfig, Simulation, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_ACTIONS: usize = 120;

/// Default fabric with a 60% fb_hadoop trace, advanced `warm` intervals so
/// queues are populated.
pub fn loaded_sim(warm: usize) -> Simulation {
    let topo = default_clos();
    let trace = generate(&topo, &scenario("fb_hadoop-incast").unwrap().traffic(1).unwrap()).unwrap();
    let mut sim = Simulation::new(&topo, trace, SimConfig::default(), static_ecn(25e9, 0.25)).unwrap();
    for _ in 0..warm {
        sim.run_interval().unwrap();
    }
    sim
}

pub fn fabric() -> (Topology, AgentGraph) {
    let topo = default_clos();
    let g = AgentGraph::from_topology(&topo).unwrap();
    (topo, g)
}

pub fn model(rounds: usize, seed: u64) -> MpnnParams {
    MpnnParams::init(N_ACTIONS, rounds, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_features(n: usize, seed: u64) -> Vec<Features> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.gen::<f64>())).collect()
}
