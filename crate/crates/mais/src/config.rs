//! Experiment configuration: TOML with sections, or the `config` member of a
//! run manifest. Command-line flags are applied on top with [`Overrides`].

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mais_core::dynamics::DynamicsSpec;
use mais_core::metropolis::{BlockPartition, KernelMode, ScanOrder};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "exp1-bimodal")]
    Bimodal,
    #[serde(rename = "exp2-gauss4d")]
    Gauss4d,
    #[serde(rename = "exp3-odeip")]
    OdeIp,
    #[serde(rename = "bias-lab")]
    BiasLab,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [Self::Bimodal, Self::Gauss4d, Self::OdeIp, Self::BiasLab];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bimodal => "exp1-bimodal",
            Self::Gauss4d => "exp2-gauss4d",
            Self::OdeIp => "exp3-odeip",
            Self::BiasLab => "bias-lab",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment '{s}' (expected one of exp1-bimodal, exp2-gauss4d, exp3-odeip, bias-lab)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: ExperimentId,
    pub seed: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Output directory; never written into manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Ensemble size M.
    pub ensemble: usize,
    pub iterations: usize,
    pub burn_in: usize,
    /// Largest lag for the autocorrelation output.
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
}

fn default_max_lag() -> usize {
    500
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            ensemble: 2,
            iterations: 0,
            burn_in: 0,
            max_lag: default_max_lag(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSection {
    pub target_rate: f64,
    pub epoch_len: usize,
    pub gain: f64,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            target_rate: 0.5,
            epoch_len: 50,
            gain: 3.0,
        }
    }
}

/// How the initial ensemble is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Experiment default: prior for exp1 and exp3, target for exp2.
    #[default]
    Default,
    Prior,
    Target,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimodalProblem {
    pub sigma: f64,
    pub m0: f64,
    pub bins: usize,
    pub range: [f64; 2],
}

impl Default for BimodalProblem {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            m0: 0.8,
            bins: 80,
            range: [-2.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussProblem {
    pub variances: Vec<f64>,
}

impl Default for GaussProblem {
    fn default() -> Self {
        Self {
            variances: vec![1.0, 0.1, 0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeProblem {
    pub mesh_exponent: u32,
    pub observations: usize,
    pub basis_terms: usize,
    pub tau: f64,
    pub noise_std: f64,
    pub data_seed: u64,
    /// Load a pinned problem instance instead of assembling one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ip_file: Option<PathBuf>,
}

impl Default for OdeProblem {
    fn default() -> Self {
        Self {
            mesh_exponent: 6,
            observations: 64,
            basis_terms: 10,
            tau: 2.0,
            noise_std: 0.01,
            data_seed: 0,
            ip_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasProblem {
    /// Odd, so that 0, 1/2 and 1 are nodes.
    pub nodes: usize,
}

impl Default for BiasProblem {
    fn default() -> Self {
        Self { nodes: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub init: InitKind,
    pub bimodal: BimodalProblem,
    pub gauss: GaussProblem,
    pub ode: OdeProblem,
    pub bias: BiasProblem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsName {
    Pmala,
    Aldi,
    Cbs,
    Svgd,
    EksDf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeName {
    #[serde(rename = "ew")]
    EnsembleWise,
    #[serde(rename = "pw")]
    Sequential,
    #[serde(rename = "pw-random")]
    SequentialRandom,
    #[serde(rename = "bw")]
    BlockWise,
    #[serde(rename = "bw-random")]
    BlockWiseRandom,
    #[serde(rename = "sim")]
    Simultaneous,
    #[serde(rename = "ula")]
    Unadjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub label: String,
    pub dynamics: DynamicsName,
    pub mode: ModeName,
    /// Initial (or fixed) step size.
    pub step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Tune `step` during burn-in.
    #[serde(default)]
    pub tune: bool,
    /// Reuse the sampling step size of an earlier method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_from: Option<String>,
}

impl MethodConfig {
    pub fn new(label: &str, dynamics: DynamicsName, mode: ModeName, step: f64) -> Self {
        Self {
            label: label.to_string(),
            dynamics,
            mode,
            step,
            gamma: None,
            bandwidth: None,
            block_size: None,
            tune: false,
            step_from: None,
        }
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn bandwidth(mut self, s: f64) -> Self {
        self.bandwidth = Some(s);
        self
    }

    pub fn blocks(mut self, b: usize) -> Self {
        self.block_size = Some(b);
        self
    }

    pub fn tuned(mut self) -> Self {
        self.tune = true;
        self
    }

    pub fn step_from(mut self, label: &str) -> Self {
        self.step_from = Some(label.to_string());
        self
    }

    pub fn kernel_mode(&self, m: usize) -> AppResult<KernelMode> {
        let partition = || -> AppResult<BlockPartition> {
            let b = self.block_size.ok_or_else(|| {
                AppError::config(format!(
                    "method '{}': block-wise mode needs block_size",
                    self.label
                ))
            })?;
            if b == 0 || !m.is_multiple_of(b) {
                return Err(AppError::config(format!(
                    "method '{}': block_size {b} does not divide M = {m}",
                    self.label
                )));
            }
            Ok(BlockPartition::uniform(m, b)?)
        };
        Ok(match self.mode {
            ModeName::EnsembleWise => KernelMode::EnsembleWise,
            ModeName::Sequential => KernelMode::SequentialPW(ScanOrder::Deterministic),
            ModeName::SequentialRandom => KernelMode::SequentialPW(ScanOrder::RandomPermutation),
            ModeName::BlockWise => KernelMode::BlockWise(partition()?, ScanOrder::Deterministic),
            ModeName::BlockWiseRandom => {
                KernelMode::BlockWise(partition()?, ScanOrder::RandomPermutation)
            }
            ModeName::Simultaneous => KernelMode::SimultaneousPW,
            ModeName::Unadjusted => KernelMode::Unadjusted,
        })
    }

    /// Number of proposal evaluations that can run concurrently in one sweep.
    /// Particle-wise pMALA is `M` independent chains.
    pub fn parallel_width(&self, m: usize) -> AppResult<usize> {
        if self.dynamics == DynamicsName::Pmala {
            return Ok(m);
        }
        Ok(self.kernel_mode(m)?.parallel_width(m))
    }

    /// Dynamics without an EKS problem; EKS-DF is resolved by the experiment.
    pub fn dynamics_spec(&self) -> AppResult<DynamicsSpec> {
        let gamma = self.gamma.unwrap_or(0.0);
        let spec = match self.dynamics {
            DynamicsName::Pmala => DynamicsSpec::pmala(self.step),
            DynamicsName::Aldi => DynamicsSpec::aldi(gamma, self.step),
            DynamicsName::Cbs => DynamicsSpec::cbs(gamma, self.step),
            DynamicsName::Svgd => {
                let s = self.bandwidth.ok_or_else(|| {
                    AppError::config(format!("method '{}': svgd needs bandwidth", self.label))
                })?;
                DynamicsSpec::svgd(s, self.step)
            }
            DynamicsName::EksDf => {
                return Err(AppError::config(format!(
                    "method '{}': eks-df is only available for the ODE inverse problem",
                    self.label
                )))
            }
        };
        spec.map_err(|e| AppError::config(format!("method '{}': {e}", self.label)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: RunSection,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default, rename = "method", skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MethodConfig>,
}

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out: Option<PathBuf>,
    pub ensemble: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> AppResult<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| AppError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> AppResult<String> {
        toml::to_string(self).map_err(|e| AppError::config(e.to_string()))
    }

    /// Reads TOML, or the `config` member of a JSON run manifest.
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: crate::manifest::Manifest = serde_json::from_str(&text)
                .map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
            manifest.config.validate()?;
            Ok(manifest.config)
        } else {
            Self::from_toml_str(&text).map_err(|e| match e {
                AppError::Config(m) => AppError::config(format!("{}: {m}", path.display())),
                other => other,
            })
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> AppResult<()> {
        if let Some(v) = o.seed {
            self.experiment.seed = v;
        }
        if let Some(v) = o.replicas {
            self.experiment.replicas = v;
        }
        if let Some(v) = &o.out {
            self.experiment.out = Some(v.clone());
        }
        if let Some(v) = o.ensemble {
            self.chain.ensemble = v;
        }
        if let Some(v) = o.iterations {
            self.chain.iterations = v;
        }
        if let Some(v) = o.burn_in {
            self.chain.burn_in = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> AppResult<()> {
        if self.experiment.replicas == 0 {
            return Err(AppError::config("replicas must be at least 1"));
        }
        if self.experiment.id == ExperimentId::BiasLab {
            let n = self.problem.bias.nodes;
            if n < 3 || n.is_multiple_of(2) {
                return Err(AppError::config(
                    "bias-lab node count must be odd and at least 3",
                ));
            }
            return Ok(());
        }
        let m = self.chain.ensemble;
        if m == 0 {
            return Err(AppError::config("ensemble size must be at least 1"));
        }
        if self.chain.iterations < 2 {
            return Err(AppError::config("need at least two sampling iterations"));
        }
        if self.methods.is_empty() {
            return Err(AppError::config("no [[method]] entries"));
        }
        let t = &self.tuning;
        if !(t.target_rate > 0.05 && t.target_rate < 0.95) || t.epoch_len == 0 || !(t.gain > 0.0) {
            return Err(AppError::config(
                "tuning needs target_rate in (0.05, 0.95), epoch_len >= 1, gain > 0",
            ));
        }
        let mut seen = HashSet::new();
        for meth in &self.methods {
            if !seen.insert(meth.label.as_str()) {
                return Err(AppError::config(format!(
                    "duplicate method label '{}'",
                    meth.label
                )));
            }
            if !(meth.step > 0.0 && meth.step.is_finite()) {
                return Err(AppError::config(format!(
                    "method '{}': step must be positive",
                    meth.label
                )));
            }
            meth.kernel_mode(m)?;
            if meth.dynamics != DynamicsName::EksDf || self.experiment.id != ExperimentId::OdeIp {
                meth.dynamics_spec()?;
            }
            if meth.dynamics == DynamicsName::Svgd
                && !matches!(meth.mode, ModeName::EnsembleWise | ModeName::Unadjusted)
            {
                return Err(AppError::config(format!(
                    "method '{}': svgd couples all particles and needs mode ew or ula",
                    meth.label
                )));
            }
            if meth.tune {
                if meth.step_from.is_some() {
                    return Err(AppError::config(format!(
                        "method '{}': tune and step_from are exclusive",
                        meth.label
                    )));
                }
                if self.chain.burn_in < self.tuning.epoch_len {
                    return Err(AppError::config(format!(
                        "method '{}': tuning needs burn_in >= epoch_len",
                        meth.label
                    )));
                }
            }
            if let Some(src) = &meth.step_from {
                if !seen.contains(src.as_str()) || src == &meth.label {
                    return Err(AppError::config(format!(
                        "method '{}': step_from '{src}' must name an earlier method",
                        meth.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Built-in desk-scale configuration for an experiment.
    pub fn default_for(id: ExperimentId) -> Self {
        use DynamicsName::*;
        use ModeName::*;
        let (chain, methods, replicas) = match id {
            ExperimentId::Bimodal => (
                ChainSection {
                    ensemble: 10,
                    iterations: 10_000,
                    burn_in: 1_000,
                    max_lag: 500,
                },
                vec![
                    MethodConfig::new("aldi-ew", Aldi, EnsembleWise, 0.0725).gamma(0.0),
                    MethodConfig::new("aldi-ula", Aldi, Unadjusted, 0.0725).gamma(0.0),
                    MethodConfig::new("svgd-ew", Svgd, EnsembleWise, 1e-4).bandwidth(0.01),
                    MethodConfig::new("svgd-ula", Svgd, Unadjusted, 1e-4).bandwidth(0.01),
                    MethodConfig::new("cbs-ew", Cbs, EnsembleWise, 0.05).gamma(0.0),
                    MethodConfig::new("cbs-ula", Cbs, Unadjusted, 0.05).gamma(0.0),
                ],
                1,
            ),
            ExperimentId::Gauss4d => (
                ChainSection {
                    ensemble: 100,
                    iterations: 10_000,
                    burn_in: 1_000,
                    max_lag: 500,
                },
                vec![
                    MethodConfig::new("aldi-ew", Aldi, EnsembleWise, 0.05)
                        .gamma(0.001)
                        .tuned(),
                    MethodConfig::new("aldi-bw50", Aldi, BlockWise, 0.05)
                        .gamma(0.001)
                        .blocks(50)
                        .step_from("aldi-ew"),
                    MethodConfig::new("aldi-bw25", Aldi, BlockWise, 0.05)
                        .gamma(0.001)
                        .blocks(25)
                        .step_from("aldi-ew"),
                    MethodConfig::new("aldi-pw", Aldi, Sequential, 0.05)
                        .gamma(0.001)
                        .step_from("aldi-ew"),
                    MethodConfig::new("aldi-ew-g0.1", Aldi, EnsembleWise, 0.05)
                        .gamma(0.1)
                        .tuned(),
                    MethodConfig::new("aldi-ew-g1", Aldi, EnsembleWise, 0.01)
                        .gamma(1.0)
                        .tuned(),
                    MethodConfig::new("pmala", Pmala, Sequential, 0.002).tuned(),
                ],
                10,
            ),
            ExperimentId::OdeIp => (
                ChainSection {
                    ensemble: 100,
                    iterations: 10_000,
                    burn_in: 1_000,
                    max_lag: 500,
                },
                vec![
                    MethodConfig::new("aldi-ew", Aldi, EnsembleWise, 0.01)
                        .gamma(0.01)
                        .tuned(),
                    MethodConfig::new("aldi-pw", Aldi, Sequential, 0.01)
                        .gamma(0.01)
                        .step_from("aldi-ew"),
                    MethodConfig::new("aldi-ew-g0.1", Aldi, EnsembleWise, 0.01)
                        .gamma(0.1)
                        .tuned(),
                    MethodConfig::new("aldi-pw-g0.1", Aldi, Sequential, 0.01)
                        .gamma(0.1)
                        .step_from("aldi-ew-g0.1"),
                    MethodConfig::new("aldi-ew-g1", Aldi, EnsembleWise, 1e-4)
                        .gamma(1.0)
                        .tuned(),
                    MethodConfig::new("aldi-pw-g1", Aldi, Sequential, 1e-4)
                        .gamma(1.0)
                        .step_from("aldi-ew-g1"),
                    MethodConfig::new("pmala", Pmala, Sequential, 1e-4).tuned(),
                ],
                10,
            ),
            ExperimentId::BiasLab => (ChainSection::default(), Vec::new(), 1),
        };
        Self {
            experiment: RunSection {
                id,
                seed: 2024,
                replicas,
                out: None,
            },
            chain,
            tuning: TuningSection::default(),
            problem: ProblemSection::default(),
            methods,
        }
    }

    /// Index of a method by label.
    pub fn method_index(&self, label: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.label == label)
    }
}

/// Worker count: explicit flag, then `MAIS_WORKERS`, then available cores.
pub fn resolve_workers(flag: Option<usize>) -> AppResult<usize> {
    if let Some(w) = flag {
        return if w == 0 {
            Err(AppError::config("workers must be at least 1"))
        } else {
            Ok(w)
        };
    }
    if let Ok(v) = std::env::var(crate::WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(AppError::config(format!(
                "{} must be a positive integer, got '{v}'",
                crate::WORKERS_ENV
            ))),
        };
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}
