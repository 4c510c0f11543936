//! Single-commodity dynamical flow networks: cell topologies, demand and
//! supply functions, routing policies, simulation, monotonicity and
//! equilibrium analysis, and resilience margins.

pub mod analysis;
pub mod dynamics;
pub mod flowfuncs;
pub mod netfile;
pub mod policies;
pub mod resilience;
pub mod topology;

pub use dynamics::{DetectorConfig, Model, SimConfig, Verdict};
pub use flowfuncs::{Demand, Supply};
pub use netfile::{load_model, NetworkFile};
pub use policies::{ConvexCost, ConvexCostSet, LogitParams, Policy, RoutingMatrix};
pub use topology::Topology;
