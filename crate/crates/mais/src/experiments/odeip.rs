//! Linear inverse problem for the right-hand side of `-p'' + p = θ`: quantile
//! estimation under the exact Gaussian posterior, componentwise posterior
//! means, and the pointwise posterior of `θ` on the grid.

use std::sync::Arc;

use mais_core::diagnostics::chi2_quantile;
use mais_core::dynamics::{DynamicsSpec, Ensemble};
use mais_core::linalg::SpdFactor;
use mais_core::metropolis::Recorder;
use mais_core::rng::{Purpose, StreamKey};
use mais_core::targets::{
    assemble_ode_posterior, basis_function, posterior_factor, LinearGaussianIp, OdeIpConfig,
    TargetModel,
};

use super::{
    bundle, for_replicas, quantity_stats, run_replica, ChainResult, QuantityStats, Resolved,
};
use crate::config::{DynamicsName, ExperimentConfig, InitKind};
use crate::error::{AppError, AppResult};
use crate::manifest::ProblemRecord;
use crate::output::Table;

type BoxedRecorder = Box<dyn Fn(&Ensemble) -> f64 + Sync>;

#[derive(Debug, Clone)]
pub struct OdeResult {
    pub chain: ChainResult,
    pub ip: Arc<LinearGaussianIp>,
    /// `components[k][j]`: replica-pooled statistics of coordinate `j` under method `k`.
    pub components: Vec<Vec<ComponentStats>>,
    /// Interior grid nodes where `θ` is reported.
    pub grid: Vec<f64>,
    /// `theta[k]` = (pointwise mean, pointwise std) over all iterations, particles and replicas.
    pub theta: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentStats {
    pub mean: f64,
    pub std_error: f64,
    pub z: f64,
    pub int_ac: f64,
}

pub fn build_problem(cfg: &ExperimentConfig) -> AppResult<LinearGaussianIp> {
    let o = &cfg.problem.ode;
    match &o.ip_file {
        Some(path) => crate::ipfile::load(path),
        None => assemble_ode_posterior(&OdeIpConfig {
            mesh_exponent: o.mesh_exponent,
            observations: o.observations,
            basis_terms: o.basis_terms,
            tau: o.tau,
            noise_std: o.noise_std,
            seed: o.data_seed,
            zero_data: false,
        })
        .map_err(|e| AppError::config(format!("ODE problem: {e}"))),
    }
}

/// `(x - m*)ᵀ C*⁻¹ (x - m*) <= threshold`, as a fraction of particles.
pub fn centered_quantile_fraction(
    e: &Ensemble,
    mean: &[f64],
    factor: &SpdFactor,
    threshold: f64,
) -> f64 {
    let mut r = vec![0.0; mean.len()];
    let inside = (0..e.m())
        .filter(|&i| {
            for ((ri, x), m) in r.iter_mut().zip(e.particle(i)).zip(mean) {
                *ri = x - m;
            }
            factor.whitened_norm_sq(&r) <= threshold
        })
        .count();
    inside as f64 / e.m() as f64
}

/// Accumulated first and second moments over visited ensembles.
#[derive(Debug, Clone)]
struct Moments {
    count: u64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; d],
            outer: vec![0.0; d * d],
        }
    }

    fn add(&mut self, e: &Ensemble) {
        let d = e.d();
        for i in 0..e.m() {
            let x = e.particle(i);
            for a in 0..d {
                self.sum[a] += x[a];
                for b in 0..d {
                    self.outer[a * d + b] += x[a] * x[b];
                }
            }
            self.count += 1;
        }
    }

    fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        self.sum.iter_mut().zip(&o.sum).for_each(|(a, b)| *a += b);
        self.outer
            .iter_mut()
            .zip(&o.outer)
            .for_each(|(a, b)| *a += b);
    }
}

fn resolve(cfg: &ExperimentConfig, ip: &LinearGaussianIp) -> AppResult<Resolved> {
    let m = cfg.chain.ensemble;
    let mut specs = Vec::with_capacity(cfg.methods.len());
    for meth in &cfg.methods {
        specs.push(if meth.dynamics == DynamicsName::EksDf {
            DynamicsSpec::eks_df(meth.gamma.unwrap_or(0.0), ip.eks_problem(true)?, meth.step)
                .map_err(|e| AppError::config(format!("method '{}': {e}", meth.label)))?
        } else {
            meth.dynamics_spec()?
        });
    }
    let modes = cfg
        .methods
        .iter()
        .map(|meth| meth.kernel_mode(m))
        .collect::<AppResult<_>>()?;
    Ok(Resolved { specs, modes })
}

pub fn run(cfg: &ExperimentConfig, workers: usize) -> AppResult<OdeResult> {
    let ip = Arc::new(build_problem(cfg)?);
    let d = ip.dim();
    let target = TargetModel::linear_ip(ip.clone());
    let resolved = resolve(cfg, &ip)?;
    let factor = posterior_factor(&ip)?;
    let threshold = chi2_quantile(0.5, d)?;
    let mstar = ip.posterior_mean().to_vec();
    let (mean0, sd0): (Vec<f64>, Vec<f64>) = match cfg.problem.init {
        InitKind::Default | InitKind::Prior => (
            vec![0.0; d],
            ip.prior_var().iter().map(|v| v.sqrt()).collect(),
        ),
        InitKind::Target => (
            mstar.clone(),
            (0..d).map(|j| ip.posterior_cov()[(j, j)].sqrt()).collect(),
        ),
        InitKind::StandardNormal => (vec![0.0; d], vec![1.0; d]),
    };

    let f = |e: &Ensemble| centered_quantile_fraction(e, &mstar, &factor, threshold);
    let coords: Vec<BoxedRecorder> = (0..d)
        .map(|j| {
            Box::new(move |e: &Ensemble| {
                (0..e.m()).map(|i| e.particle(i)[j]).sum::<f64>() / e.m() as f64
            }) as Box<dyn Fn(&Ensemble) -> f64 + Sync>
        })
        .collect();
    let mut recorders: Vec<Recorder<'_>> = vec![&f];
    recorders.extend(coords.iter().map(|b| b.as_ref() as Recorder<'_>));

    let n_methods = cfg.methods.len();
    let replicas = for_replicas(cfg.experiment.replicas, workers, |r| {
        let init = Ensemble::gaussian(
            cfg.chain.ensemble,
            &mean0,
            &sd0,
            StreamKey::new(cfg.experiment.seed, Purpose::Initialization).replica(r),
        )?;
        let mut moments = vec![Moments::new(d); n_methods];
        let run = run_replica(
            cfg,
            &resolved,
            &target,
            &init,
            &recorders,
            r,
            &mut |k, e| moments[k].add(e),
        )?;
        Ok((run, moments))
    })?;

    // pooled in replica order so the sums do not depend on scheduling
    let mut moments = vec![Moments::new(d); n_methods];
    let mut runs = Vec::with_capacity(replicas.len());
    for (run, m) in replicas {
        for (acc, x) in moments.iter_mut().zip(&m) {
            acc.merge(x);
        }
        runs.push(run);
    }

    let components = (0..n_methods)
        .map(|k| {
            (0..d)
                .map(|j| {
                    let per: Vec<QuantityStats> = runs
                        .iter()
                        .filter_map(|r| r.methods[k].series.get(1 + j))
                        .map(|s| quantity_stats(s))
                        .collect();
                    let n = per.len() as f64;
                    let mean = per.iter().map(|s| s.estimate).sum::<f64>() / n;
                    let std_error = per
                        .iter()
                        .map(|s| s.std_error * s.std_error)
                        .sum::<f64>()
                        .sqrt()
                        / n;
                    let int_ac = per.iter().map(|s| s.int_ac).sum::<f64>() / n;
                    ComponentStats {
                        mean,
                        std_error,
                        z: (mean - mstar[j]) / std_error,
                        int_ac,
                    }
                })
                .collect()
        })
        .collect();

    let n_cells = 1usize << cfg.problem.ode.mesh_exponent;
    let grid: Vec<f64> = (1..n_cells).map(|j| j as f64 / n_cells as f64).collect();
    let phi: Vec<Vec<f64>> = grid
        .iter()
        .map(|&s| (1..=d).map(|i| basis_function(i, s)).collect())
        .collect();
    let theta = moments
        .iter()
        .map(|mo| {
            let c = mo.count.max(1) as f64;
            let mean: Vec<f64> = phi
                .iter()
                .map(|p| p.iter().zip(&mo.sum).map(|(a, s)| a * s / c).sum())
                .collect();
            let std = phi
                .iter()
                .zip(&mean)
                .map(|(p, mu)| {
                    let second: f64 = (0..d)
                        .map(|a| {
                            (0..d)
                                .map(|b| p[a] * p[b] * mo.outer[a * d + b] / c)
                                .sum::<f64>()
                        })
                        .sum();
                    (second - mu * mu).max(0.0).sqrt()
                })
                .collect();
            (mean, std)
        })
        .collect();

    Ok(OdeResult {
        chain: ChainResult::new(cfg.clone(), runs, 0.5, "P"),
        ip,
        components,
        grid,
        theta,
    })
}

impl OdeResult {
    /// Pointwise mean and std of `θ = Σ x_i φ_i` under the exact posterior.
    pub fn reference_theta(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.ip.dim();
        let m = self.ip.posterior_mean();
        let c = self.ip.posterior_cov();
        self.grid
            .iter()
            .map(|&s| {
                let p: Vec<f64> = (1..=d).map(|i| basis_function(i, s)).collect();
                let mean: f64 = p.iter().zip(m).map(|(a, b)| a * b).sum();
                let var: f64 = (0..d)
                    .map(|a| (0..d).map(|b| p[a] * c[(a, b)] * p[b]).sum::<f64>())
                    .sum();
                (mean, var.max(0.0).sqrt())
            })
            .unzip()
    }

    pub fn posterior_table(&self) -> Table {
        let (rm, rs) = self.reference_theta();
        let mut t = Table::new(&[
            "method",
            "s",
            "mean",
            "std",
            "reference_mean",
            "reference_std",
        ]);
        for (k, meth) in self.chain.config.methods.iter().enumerate() {
            let (mean, std) = &self.theta[k];
            for (j, &s) in self.grid.iter().enumerate() {
                t.push(vec![
                    meth.label.clone().into(),
                    s.into(),
                    mean[j].into(),
                    std[j].into(),
                    rm[j].into(),
                    rs[j].into(),
                ]);
            }
        }
        t
    }

    pub fn components_table(&self) -> Table {
        let mut t = Table::new(&[
            "method",
            "component",
            "chain_mean",
            "std_error",
            "int_ac",
            "reference_mean",
            "reference_sd",
            "z",
        ]);
        let c = self.ip.posterior_cov();
        for (k, meth) in self.chain.config.methods.iter().enumerate() {
            for (j, s) in self.components[k].iter().enumerate() {
                t.push(vec![
                    meth.label.clone().into(),
                    (j + 1).into(),
                    s.mean.into(),
                    s.std_error.into(),
                    s.int_ac.into(),
                    self.ip.posterior_mean()[j].into(),
                    c[(j, j)].sqrt().into(),
                    s.z.into(),
                ]);
            }
        }
        t
    }

    pub fn files(&self) -> AppResult<Vec<(String, Vec<u8>)>> {
        let mut manifest = self.chain.manifest();
        let o = &self.chain.config.problem.ode;
        manifest.problem = Some(ProblemRecord {
            data_seed: o.data_seed,
            truth: self.ip.truth().map(|t| t.to_vec()),
            file: "problem.txt".into(),
        });
        let mut tables = vec![
            ("diagnostics.csv", self.chain.diagnostics_table(&[])),
            ("posterior.csv", self.posterior_table()),
            ("components.csv", self.components_table()),
        ];
        tables.extend(self.chain.common_tables());
        bundle(
            manifest,
            tables,
            vec![(
                "problem.txt".into(),
                crate::ipfile::to_text(&self.ip).into_bytes(),
            )],
        )
    }
}
