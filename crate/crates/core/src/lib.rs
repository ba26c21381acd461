//! Agentic fog simulation: fog agents playing an exact potential game over
//! cache placement and request forwarding, with Greedy and centralized
//! baselines, a slotted engine and an experiment harness.

pub mod agent;
pub mod baselines;
pub mod coordination;
pub mod engine;
pub mod execution;
pub mod metrics;
pub mod objective;
pub mod orchestrator;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod shared_memory;
pub mod sweep;
pub mod topology;
pub mod verify;
pub mod workload;

pub use engine::{run, verify_exact_potential, FrozenRun, RunOutput};
pub use metrics::{Event, MetricsReport, RunRecord};
pub use scalar::Scalar;
pub use scenario::{Controller, Scenario};

/// The simulator's concrete scalar.
pub type Real = f64;
pub type FogGraph = topology::FogGraph<Real>;
pub type DemandMatrix = workload::DemandMatrix<Real>;
pub type ObjectiveParams = objective::ObjectiveParams<Real>;
pub type ObjectiveValue = objective::ObjectiveValue<Real>;
