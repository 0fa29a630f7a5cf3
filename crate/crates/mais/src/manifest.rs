//! Run manifest: the resolved config plus everything drawn or tuned during
//! the run. Feeding a manifest back to `run --config` reproduces the outputs.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub replicas: Vec<ReplicaRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemRecord>,
    /// Files written next to the manifest.
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica: u64,
    pub seed: u64,
    pub methods: Vec<MethodRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub label: String,
    pub dynamics: String,
    pub mode: String,
    /// Step size used in the sampling phase.
    pub step: f64,
    pub tuned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_source: Option<String>,
    pub burn_in_accept: f64,
    pub sample_accept: f64,
    pub status: String,
}

/// Simulated problem instance (ODE inverse problem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub data_seed: u64,
    pub truth: Option<Vec<f64>>,
    pub file: String,
}

impl Manifest {
    pub fn new(mut config: ExperimentConfig) -> Self {
        config.experiment.out = None;
        Self {
            tool: format!("mais {}", env!("CARGO_PKG_VERSION")),
            config,
            replicas: Vec::new(),
            problem: None,
            files: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}
