//! Scenario files: every knob of a run in one JSON document.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::baselines::IlpConfig;
use crate::coordination::CoordinationConfig;
use crate::metrics::MetricsConfig;
use crate::objective::{ObjectiveError, ObjectiveParams, ObjectiveWeights};
use crate::orchestrator::OrchestratorConfig;
use crate::scalar::Scalar;
use crate::shared_memory::MemoryConfig;
use crate::topology::{MeshParams, NodeId, TopologyError};
use crate::workload::{Catalog, DemandProfile, Phase, WorkloadError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Agentic,
    Greedy,
    Ilp,
}

impl Controller {
    pub const ALL: [Controller; 3] = [Controller::Agentic, Controller::Greedy, Controller::Ilp];

    pub fn name(self) -> &'static str {
        match self {
            Controller::Agentic => "agentic",
            Controller::Greedy => "greedy",
            Controller::Ilp => "ilp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c_store: f64,
    pub c_serve: f64,
    pub rho_max: f64,
    pub cloud_delay: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            c_store: 0.1,
            c_serve: 0.01,
            rho_max: 0.8,
            cloud_delay: 50.0,
        }
    }
}

impl ObjectiveSection {
    pub fn weights<S: Scalar>(&self) -> ObjectiveWeights<S> {
        ObjectiveWeights::new(self.alpha, self.beta, self.gamma)
    }

    pub fn params<S: Scalar>(&self) -> ObjectiveParams<S> {
        ObjectiveParams {
            weights: self.weights(),
            c_store: S::lit(self.c_store),
            c_serve: S::lit(self.c_serve),
            rho_max: S::lit(self.rho_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub slot: u64,
    pub node: NodeId,
}

/// Kill `fraction` of the alive nodes at `slot`, chosen from the failure stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFailures {
    pub slot: u64,
    pub fraction: f64,
    #[serde(default)]
    pub preserve_connectivity: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailurePlan {
    pub scheduled: Vec<FailureEvent>,
    pub random: Option<RandomFailures>,
}

impl FailurePlan {
    pub fn is_empty(&self) -> bool {
        self.scheduled.is_empty() && self.random.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon: u64,
    pub controller: Controller,
    pub topology: MeshParams,
    pub workload: DemandProfile,
    pub objective: ObjectiveSection,
    pub agent: AgentConfig,
    pub memory: MemoryConfig,
    pub coordination: CoordinationConfig,
    pub orchestrator: OrchestratorConfig,
    pub baselines: IlpConfig,
    pub failures: FailurePlan,
    pub metrics: MetricsConfig,
}

impl Default for Scenario {
    /// 20 nodes, 2000 slots, low/medium/high demand phases with popularity
    /// rotations between ILP re-solves.
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            horizon: 2000,
            controller: Controller::Agentic,
            topology: MeshParams::default(),
            workload: DemandProfile {
                phases: vec![
                    Phase {
                        start: 0,
                        base_rate: 3.0,
                        node_multipliers: Vec::new(),
                        popularity_shift: 0,
                    },
                    Phase {
                        start: 675,
                        base_rate: 6.0,
                        node_multipliers: Vec::new(),
                        popularity_shift: 10,
                    },
                    Phase {
                        start: 1325,
                        base_rate: 10.0,
                        node_multipliers: Vec::new(),
                        popularity_shift: 20,
                    },
                ],
                catalog: Catalog::default(),
            },
            objective: ObjectiveSection::default(),
            agent: AgentConfig::default(),
            memory: MemoryConfig::default(),
            coordination: CoordinationConfig::default(),
            orchestrator: OrchestratorConfig::default(),
            baselines: IlpConfig::default(),
            failures: FailurePlan::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), ScenarioError> {
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Invalid(msg()))
    }
}

fn probability(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Mesh parameters with the objective's cloud delay applied.
    pub fn mesh(&self) -> MeshParams {
        MeshParams {
            cloud_delay: self.objective.cloud_delay,
            ..self.topology.clone()
        }
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.topology.nodes;
        self.mesh().validate()?;
        self.workload.validate(n)?;
        self.objective.params::<f64>().validate()?;
        check(self.objective.cloud_delay > 0.0, || {
            "cloud_delay must be positive".into()
        })?;
        let a = &self.agent;
        check(probability(a.epsilon_explore), || {
            "agent.epsilon_explore must lie in [0, 1]".into()
        })?;
        check(probability(a.activation_prob), || {
            "agent.activation_prob must lie in [0, 1]".into()
        })?;
        check(
            a.epsilon_switch >= 0.0 && a.epsilon_switch.is_finite(),
            || "agent.epsilon_switch must be finite and nonnegative".into(),
        )?;
        check(a.prior.is_finite(), || "agent.prior must be finite".into())?;
        check(
            a.demand_smoothing > 0.0 && a.demand_smoothing <= 1.0,
            || "agent.demand_smoothing must lie in (0, 1]".into(),
        )?;
        check(a.drift_threshold > 0.0, || {
            "agent.drift_threshold must be positive".into()
        })?;
        check(a.candidate_contents != Some(0), || {
            "agent.candidate_contents must be positive".into()
        })?;
        check(self.coordination.interval > 0, || {
            "coordination.interval must be positive".into()
        })?;
        check(self.coordination.overload_margin >= 0.0, || {
            "coordination.overload_margin must be nonnegative".into()
        })?;
        let o = &self.orchestrator;
        check(o.period > 0, || {
            "orchestrator.period must be positive".into()
        })?;
        check(o.bound_width >= 0.0 && o.bound_width < 1.0, || {
            "orchestrator.bound_width must lie in [0, 1)".into()
        })?;
        check(self.baselines.period > 0, || {
            "baselines.period must be positive".into()
        })?;
        check(self.baselines.contents_per_node != Some(0), || {
            "baselines.contents_per_node must be positive".into()
        })?;
        check(self.memory.digest_window > 0, || {
            "memory.digest_window must be positive".into()
        })?;
        for f in &self.failures.scheduled {
            check(f.node < n, || {
                format!("failure plan names node {} of {n}", f.node)
            })?;
        }
        if let Some(r) = &self.failures.random {
            check(probability(r.fraction), || {
                "failures.random.fraction must lie in [0, 1]".into()
            })?;
        }
        let m = &self.metrics;
        check(
            probability(m.warmup_fraction) && m.warmup_fraction < 1.0,
            || "metrics.warmup_fraction must lie in [0, 1)".into(),
        )?;
        check(m.window > 0 && m.hold > 0 && m.band > 0.0, || {
            "metrics window, hold and band must be positive".into()
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let s = Scenario::default();
        s.validate().unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        assert_eq!(s.hash().len(), 16);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let s = Scenario::from_json(
            r#"{"seed": 9, "controller": "greedy", "topology": {"nodes": 12}}"#,
        )
        .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.controller, Controller::Greedy);
        assert_eq!(s.topology.nodes, 12);
        assert_eq!(s.agent, AgentConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(Scenario::from_json(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn bad_references_rejected() {
        let mut s = Scenario::default();
        s.failures
            .scheduled
            .push(FailureEvent { slot: 3, node: 99 });
        assert!(s.validate().is_err());
        let mut s = Scenario::default();
        s.workload.phases[1].node_multipliers = vec![1.0; 3];
        assert!(s.validate().is_err());
        let mut s = Scenario::default();
        s.objective.alpha = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Scenario::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
