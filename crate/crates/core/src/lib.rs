//! Flow-level datacenter congestion-control laboratory.
//!
//! The crate bundles a Clos topology model ([`topo`]), heavy-tailed traffic
//! generation ([`workload`]), a fluid DCQCN-style simulator with RED/ECN
//! marking ([`netsim`]), small dense networks with manual backpropagation
//! ([`nn`]), the message-passing ECN agent ([`gnn`]), its Q-learning trainer
//! ([`rl`]), comparison baselines ([`baselines`]) and the experiment harness
//! ([`harness`]).

pub mod topo;
pub mod workload;
pub mod netsim;
pub mod nn;
pub mod gnn;
pub mod rl;
pub mod baselines;
pub mod harness;

pub use netsim::{EcnConfig, SimConfig, Simulation};
pub use topo::{build_clos, AgentId, Topology};
pub use workload::{FlowArrival, FlowSizeCdf, TrafficSpec};
pub use gnn::{ActionTable, MpnnParams, ModelCheckpoint};
pub use harness::{MetricsReport, Policy, RunOptions, ScenarioSpec};
pub use rl::TrainConfig;
