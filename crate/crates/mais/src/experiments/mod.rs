//! The experiments. Each one computes an in-memory result (used by the
//! acceptance checks) and knows how to write it as CSV files plus manifest.

pub mod bias;
pub mod bimodal;
pub mod gauss4d;
pub mod odeip;

use std::path::Path;

use mais_core::diagnostics::{
    autocorrelation, efficiency_cost, replica_mse, running_mean, series_stats,
};
use mais_core::dynamics::{DynamicsSpec, Ensemble};
use mais_core::metropolis::{
    run_chain_with, ChainConfig, KernelMode, Recorder, TuneConfig, TuneEpoch,
};
use mais_core::targets::Target;
use mais_core::Error;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentId, ModeName};
use crate::error::{AppError, AppResult};
use crate::manifest::{Manifest, MethodRecord, ReplicaRecord};
use crate::output::{Cell, OutputDir, Table};

/// Extra diagnostics column: name and value per (replica, method).
pub type ExtraColumn<'a> = (&'static str, &'a dyn Fn(usize, usize) -> f64);

/// Core counts for the cost table.
pub const CORE_GRID: [usize; 4] = [1, 20, 50, 100];

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// An unadjusted chain left the region where its proposal is defined.
    Diverged {
        iteration: usize,
        reason: String,
    },
}

impl RunStatus {
    pub fn label(&self) -> String {
        match self {
            RunStatus::Completed => "completed".into(),
            RunStatus::Diverged { iteration, reason } => {
                format!("diverged at iteration {iteration}: {reason}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub step: f64,
    pub tuned: bool,
    pub step_source: Option<String>,
    pub status: RunStatus,
    pub burn_in_accept: f64,
    pub sample_accept: f64,
    /// One series per recorder; empty when the chain diverged.
    pub series: Vec<Vec<f64>>,
    pub tune_trace: Vec<TuneEpoch>,
}

#[derive(Debug, Clone)]
pub struct ReplicaRun {
    pub replica: u64,
    pub methods: Vec<MethodRun>,
}

/// Dynamics and kernel mode per method, resolved once per experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub specs: Vec<DynamicsSpec>,
    pub modes: Vec<KernelMode>,
}

impl Resolved {
    pub fn new(cfg: &ExperimentConfig) -> AppResult<Self> {
        let m = cfg.chain.ensemble;
        let specs = cfg
            .methods
            .iter()
            .map(|meth| meth.dynamics_spec())
            .collect::<AppResult<_>>()?;
        let modes = cfg
            .methods
            .iter()
            .map(|meth| meth.kernel_mode(m))
            .collect::<AppResult<_>>()?;
        Ok(Self { specs, modes })
    }
}

/// Runs every configured method from the same initial ensemble. Methods with
/// `step_from` wait for the sampling step size of the named method.
pub fn run_replica(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    target: &dyn Target,
    init: &Ensemble,
    recorders: &[Recorder<'_>],
    replica: u64,
    visit: &mut dyn FnMut(usize, &Ensemble),
) -> AppResult<ReplicaRun> {
    let mut runs: Vec<MethodRun> = Vec::with_capacity(cfg.methods.len());
    for (k, meth) in cfg.methods.iter().enumerate() {
        let mut spec = resolved.specs[k].clone();
        if let Some(src) = &meth.step_from {
            let src_run = runs.iter().find(|r| &r.label == src).expect("validated");
            spec = spec.with_step(src_run.step);
        }
        let tune = meth.tune.then_some(TuneConfig {
            target_rate: cfg.tuning.target_rate,
            epoch_len: cfg.tuning.epoch_len,
            gain: cfg.tuning.gain,
        });
        let chain = ChainConfig {
            replica,
            tune,
            ..ChainConfig::new(
                resolved.modes[k].clone(),
                spec.clone(),
                cfg.chain.iterations,
                cfg.chain.burn_in,
                cfg.experiment.seed,
            )
        };
        let mut seen = 0usize;
        let result = run_chain_with(&chain, target, init.clone(), recorders, &mut |e| {
            seen += 1;
            visit(k, e)
        });
        let run = match result {
            Ok(out) => MethodRun {
                label: meth.label.clone(),
                step: out.step,
                tuned: meth.tune,
                step_source: meth.step_from.clone(),
                status: RunStatus::Completed,
                burn_in_accept: out.burn_in_accept.rate(),
                sample_accept: out.sample_accept.rate(),
                series: out.series,
                tune_trace: out.tune_trace,
            },
            Err(e) if meth.mode == ModeName::Unadjusted && is_divergence(&e) => MethodRun {
                label: meth.label.clone(),
                step: spec.step,
                tuned: false,
                step_source: meth.step_from.clone(),
                status: RunStatus::Diverged {
                    iteration: seen,
                    reason: e.to_string(),
                },
                burn_in_accept: 1.0,
                sample_accept: 1.0,
                series: Vec::new(),
                tune_trace: Vec::new(),
            },
            Err(e) => {
                return Err(AppError::config_or_numerical(
                    e,
                    &format!("replica {replica}, method '{}'", meth.label),
                ))
            }
        };
        runs.push(run);
    }
    Ok(ReplicaRun {
        replica,
        methods: runs,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NotPositiveDefinite { .. }
            | Error::NotPsd { .. }
            | Error::AllWeightsZero
            | Error::NoConvergence { .. }
    )
}

impl AppError {
    fn config_or_numerical(e: Error, context: &str) -> AppError {
        match e {
            Error::UnsupportedMode(_)
            | Error::InvalidArgument(_)
            | Error::NoGradient
            | Error::DimensionMismatch { .. } => AppError::config(format!("{context}: {e}")),
            other => AppError::Numerical(format!("{context}: {other}")),
        }
    }
}

/// Runs `f` for every replica on a pool of `workers` threads; results come
/// back in replica order.
pub fn for_replicas<R: Send>(
    replicas: usize,
    workers: usize,
    f: impl Fn(u64) -> AppResult<R> + Sync,
) -> AppResult<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AppError::config(format!("worker pool: {e}")))?;
    pool.install(|| (0..replicas as u64).into_par_iter().map(&f).collect())
}

/// Statistics of the primary quantity for one method in one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityStats {
    pub estimate: f64,
    pub int_ac: f64,
    pub int_ac_lag: usize,
    pub truncated: bool,
    pub std_error: f64,
}

impl QuantityStats {
    fn missing() -> Self {
        Self {
            estimate: f64::NAN,
            int_ac: f64::NAN,
            int_ac_lag: 0,
            truncated: false,
            std_error: f64::NAN,
        }
    }
}

pub fn quantity_stats(series: &[f64]) -> QuantityStats {
    if series.is_empty() {
        return QuantityStats::missing();
    }
    match series_stats(series, series.len() / 2) {
        Ok(s) => QuantityStats {
            estimate: s.mean,
            int_ac: s.int_ac.value,
            int_ac_lag: s.int_ac.lag,
            truncated: s.int_ac.truncated,
            std_error: s.std_error(series),
        },
        // a chain that never moved
        Err(_) => QuantityStats {
            estimate: mais_core::diagnostics::mean(series),
            int_ac: f64::INFINITY,
            int_ac_lag: 0,
            truncated: true,
            std_error: f64::INFINITY,
        },
    }
}

/// Everything the chain experiments have in common.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub config: ExperimentConfig,
    pub replicas: Vec<ReplicaRun>,
    /// `stats[r][k]`: primary quantity for replica `r`, method `k`.
    pub stats: Vec<Vec<QuantityStats>>,
    /// Reference value of the primary quantity.
    pub reference: f64,
    pub quantity: &'static str,
}

impl ChainResult {
    pub fn new(
        config: ExperimentConfig,
        replicas: Vec<ReplicaRun>,
        reference: f64,
        quantity: &'static str,
    ) -> Self {
        let stats = replicas
            .iter()
            .map(|r| {
                r.methods
                    .iter()
                    .map(|m| {
                        m.series
                            .first()
                            .map_or_else(QuantityStats::missing, |s| quantity_stats(s))
                    })
                    .collect()
            })
            .collect();
        Self {
            config,
            replicas,
            stats,
            reference,
            quantity,
        }
    }

    pub fn method_index(&self, label: &str) -> Option<usize> {
        self.config.method_index(label)
    }

    /// Replica average of a per-(replica, method) value.
    pub fn replica_mean(&self, k: usize, f: impl Fn(&QuantityStats, &MethodRun) -> f64) -> f64 {
        let n = self.replicas.len() as f64;
        self.replicas
            .iter()
            .zip(&self.stats)
            .map(|(r, s)| f(&s[k], &r.methods[k]))
            .sum::<f64>()
            / n
    }

    pub fn mean_int_ac(&self, k: usize) -> f64 {
        self.replica_mean(k, |s, _| s.int_ac)
    }

    pub fn mean_estimate(&self, k: usize) -> f64 {
        self.replica_mean(k, |s, _| s.estimate)
    }

    pub fn mean_accept(&self, k: usize) -> f64 {
        self.replica_mean(k, |_, m| m.sample_accept)
    }

    pub fn manifest(&self) -> Manifest {
        let mut man = Manifest::new(self.config.clone());
        for r in &self.replicas {
            man.replicas.push(ReplicaRecord {
                replica: r.replica,
                seed: self.config.experiment.seed,
                methods: r
                    .methods
                    .iter()
                    .zip(&self.config.methods)
                    .map(|(run, meth)| MethodRecord {
                        label: run.label.clone(),
                        dynamics: format!("{:?}", meth.dynamics).to_lowercase(),
                        mode: mode_label(meth.mode).to_string(),
                        step: run.step,
                        tuned: run.tuned,
                        step_source: run.step_source.clone(),
                        burn_in_accept: run.burn_in_accept,
                        sample_accept: run.sample_accept,
                        status: run.status.label(),
                    })
                    .collect(),
            });
        }
        man
    }

    /// diagnostics.csv: one row per replica and method.
    pub fn diagnostics_table(&self, extra: &[ExtraColumn<'_>]) -> Table {
        let mut header = vec![
            "replica",
            "method",
            "dynamics",
            "mode",
            "parallel_width",
            "step",
            "tuned",
            "burn_in_accept",
            "sample_accept",
            "status",
            "estimate",
            "std_error",
            "int_ac",
            "int_ac_lag",
            "truncated",
        ];
        header.extend(extra.iter().map(|(h, _)| *h));
        let mut t = Table::new(&header);
        let m = self.config.chain.ensemble;
        for (ri, (r, stats)) in self.replicas.iter().zip(&self.stats).enumerate() {
            for (k, (run, s)) in r.methods.iter().zip(stats).enumerate() {
                let meth = &self.config.methods[k];
                let mut row: Vec<Cell> = vec![
                    r.replica.into(),
                    run.label.clone().into(),
                    format!("{:?}", meth.dynamics).to_lowercase().into(),
                    mode_label(meth.mode).into(),
                    meth.parallel_width(m).unwrap_or(1).into(),
                    run.step.into(),
                    run.tuned.into(),
                    run.burn_in_accept.into(),
                    run.sample_accept.into(),
                    run.status.label().into(),
                    s.estimate.into(),
                    s.std_error.into(),
                    s.int_ac.into(),
                    s.int_ac_lag.into(),
                    s.truncated.into(),
                ];
                row.extend(extra.iter().map(|(_, f)| Cell::Float(f(ri, k))));
                t.push(row);
            }
        }
        t
    }

    /// estimates.csv: replica-averaged instantaneous value and running estimate.
    pub fn estimates_table(&self) -> Table {
        let mut t = Table::new(&[
            "method",
            "iteration",
            "value",
            "running_estimate",
            "reference",
        ]);
        let n = self.config.chain.iterations;
        for (k, meth) in self.config.methods.iter().enumerate() {
            let series: Vec<&Vec<f64>> = self
                .replicas
                .iter()
                .filter_map(|r| r.methods[k].series.first())
                .collect();
            if series.is_empty() {
                continue;
            }
            let running: Vec<Vec<f64>> = series.iter().map(|s| running_mean(s)).collect();
            let w = 1.0 / series.len() as f64;
            for i in 0..n {
                let v = series.iter().map(|s| s[i]).sum::<f64>() * w;
                let rm = running.iter().map(|s| s[i]).sum::<f64>() * w;
                t.push(vec![
                    meth.label.clone().into(),
                    (i + 1).into(),
                    v.into(),
                    rm.into(),
                    self.reference.into(),
                ]);
            }
        }
        t
    }

    /// autocorr.csv: replica-averaged autocorrelation up to `max_lag`.
    pub fn autocorr_table(&self) -> Table {
        let mut t = Table::new(&["method", "lag", "rho"]);
        let lag = self
            .config
            .chain
            .max_lag
            .min(self.config.chain.iterations.saturating_sub(2));
        for (k, meth) in self.config.methods.iter().enumerate() {
            let rhos: Vec<Vec<f64>> = self
                .replicas
                .iter()
                .filter_map(|r| r.methods[k].series.first())
                .filter_map(|s| autocorrelation(s, lag).ok())
                .collect();
            if rhos.is_empty() {
                continue;
            }
            for l in 0..=lag {
                let v = rhos.iter().map(|r| r[l]).sum::<f64>() / rhos.len() as f64;
                t.push(vec![meth.label.clone().into(), l.into(), v.into()]);
            }
        }
        t
    }

    /// cost.csv: `int_ac · N · M / min(cores, width)` over the core grid,
    /// using the replica-mean int_ac.
    pub fn cost_table(&self) -> Table {
        let mut t = Table::new(&[
            "method",
            "parallel_width",
            "int_ac",
            "int_ac_n_m",
            "cores",
            "cost",
        ]);
        let (n, m) = (self.config.chain.iterations, self.config.chain.ensemble);
        for (k, meth) in self.config.methods.iter().enumerate() {
            let width = meth.parallel_width(m).unwrap_or(1);
            let tau = self.mean_int_ac(k);
            for cores in CORE_GRID {
                t.push(vec![
                    meth.label.clone().into(),
                    width.into(),
                    tau.into(),
                    (tau * (n * m) as f64).into(),
                    cores.into(),
                    efficiency_cost(tau, n, m, width, cores).into(),
                ]);
            }
        }
        t
    }

    /// summary.csv: one row per method.
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&[
            "method",
            "mean_step",
            "mean_accept",
            "mean_estimate",
            "reference",
            "mse",
            "mean_int_ac",
            "diverged_replicas",
        ]);
        for (k, meth) in self.config.methods.iter().enumerate() {
            let estimates: Vec<f64> = self.stats.iter().map(|s| s[k].estimate).collect();
            let mse = replica_mse(&estimates, self.reference).unwrap_or(f64::NAN);
            let diverged = self
                .replicas
                .iter()
                .filter(|r| r.methods[k].status != RunStatus::Completed)
                .count();
            t.push(vec![
                meth.label.clone().into(),
                self.replica_mean(k, |_, r| r.step).into(),
                self.mean_accept(k).into(),
                self.mean_estimate(k).into(),
                self.reference.into(),
                mse.into(),
                self.mean_int_ac(k).into(),
                diverged.into(),
            ]);
        }
        t
    }

    /// tuning.csv: the tuner trace of every tuned method.
    pub fn tuning_table(&self) -> Table {
        let mut t = Table::new(&["replica", "method", "epoch", "step", "rate", "saturated"]);
        for r in &self.replicas {
            for run in r.methods.iter().filter(|m| m.tuned) {
                for (e, ep) in run.tune_trace.iter().enumerate() {
                    t.push(vec![
                        r.replica.into(),
                        run.label.clone().into(),
                        (e + 1).into(),
                        ep.step.into(),
                        ep.rate.into(),
                        ep.saturated.into(),
                    ]);
                }
            }
        }
        t
    }

    /// The tables every chain experiment writes.
    pub fn common_tables(&self) -> Vec<(&'static str, Table)> {
        vec![
            ("estimates.csv", self.estimates_table()),
            ("autocorr.csv", self.autocorr_table()),
            ("cost.csv", self.cost_table()),
            ("summary.csv", self.summary_table()),
            ("tuning.csv", self.tuning_table()),
        ]
    }
}

pub fn mode_label(m: ModeName) -> &'static str {
    match m {
        ModeName::EnsembleWise => "ew",
        ModeName::Sequential => "pw",
        ModeName::SequentialRandom => "pw-random",
        ModeName::BlockWise => "bw",
        ModeName::BlockWiseRandom => "bw-random",
        ModeName::Simultaneous => "sim",
        ModeName::Unadjusted => "ula",
    }
}

/// Result of any experiment.
#[derive(Debug, Clone)]
pub enum ExperimentResult {
    Bimodal(bimodal::BimodalResult),
    Gauss4d(gauss4d::GaussResult),
    OdeIp(odeip::OdeResult),
    BiasLab(bias::BiasLabResult),
}

impl ExperimentResult {
    pub fn files(&self) -> AppResult<Vec<(String, Vec<u8>)>> {
        match self {
            ExperimentResult::Bimodal(r) => r.files(),
            ExperimentResult::Gauss4d(r) => r.files(),
            ExperimentResult::OdeIp(r) => r.files(),
            ExperimentResult::BiasLab(r) => r.files(),
        }
    }

    /// One-line summary per method/example for the console.
    pub fn summary_lines(&self) -> Vec<String> {
        match self {
            ExperimentResult::Bimodal(r) => r.summary_lines(),
            ExperimentResult::Gauss4d(r) => chain_summary_lines(&r.chain),
            ExperimentResult::OdeIp(r) => chain_summary_lines(&r.chain),
            ExperimentResult::BiasLab(r) => r.summary_lines(),
        }
    }
}

pub fn chain_summary_lines(c: &ChainResult) -> Vec<String> {
    (0..c.config.methods.len())
        .map(|k| {
            format!(
                "{:<14} h={:<11.4e} accept={:.3} {}={:.4} (ref {:.4}) int_ac={:.2}",
                c.config.methods[k].label,
                c.replica_mean(k, |_, r| r.step),
                c.mean_accept(k),
                c.quantity,
                c.mean_estimate(k),
                c.reference,
                c.mean_int_ac(k)
            )
        })
        .collect()
}

/// Computes an experiment in memory.
pub fn compute(cfg: &ExperimentConfig, workers: usize) -> AppResult<ExperimentResult> {
    cfg.validate()?;
    Ok(match cfg.experiment.id {
        ExperimentId::Bimodal => ExperimentResult::Bimodal(bimodal::run(cfg, workers)?),
        ExperimentId::Gauss4d => ExperimentResult::Gauss4d(gauss4d::run(cfg, workers)?),
        ExperimentId::OdeIp => ExperimentResult::OdeIp(odeip::run(cfg, workers)?),
        ExperimentId::BiasLab => ExperimentResult::BiasLab(bias::run(cfg)?),
    })
}

/// Writes all artifacts of a computed experiment; on failure nothing is left behind.
pub fn write(result: &ExperimentResult, dir: &Path) -> AppResult<Vec<String>> {
    let files = result.files()?;
    let mut out = OutputDir::create(dir)?;
    let mut names = Vec::new();
    for (name, bytes) in &files {
        if let Err(e) = out.write_bytes(name, bytes) {
            out.rollback();
            return Err(e);
        }
        names.push(name.clone());
    }
    Ok(names)
}

/// Computes and writes an experiment.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    workers: usize,
    dir: &Path,
) -> AppResult<ExperimentResult> {
    let result = compute(cfg, workers)?;
    write(&result, dir)?;
    Ok(result)
}

/// Serializes tables plus a manifest listing them.
pub(crate) fn bundle(
    mut manifest: Manifest,
    tables: Vec<(&'static str, Table)>,
    extra: Vec<(String, Vec<u8>)>,
) -> AppResult<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for (name, t) in tables {
        files.push((name.to_string(), t.to_bytes()?));
    }
    files.extend(extra);
    manifest.files = files.iter().map(|(n, _)| n.clone()).collect();
    files.push(("manifest.json".to_string(), manifest.to_json().into_bytes()));
    Ok(files)
}
