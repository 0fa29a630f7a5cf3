//! One-dimensional bimodal target: accumulated particle histograms of
//! Metropolized and unadjusted dynamics against a quadrature reference.

use std::sync::Mutex;

use mais_core::dynamics::Ensemble;
use mais_core::rng::{Purpose, StreamKey};
use mais_core::targets::{Target, TargetModel};

use super::{bundle, for_replicas, run_replica, ChainResult, Resolved, RunStatus};
use crate::config::{ExperimentConfig, InitKind};
use crate::error::{AppError, AppResult};
use crate::output::Table;

/// Half-width of the window used to normalize the reference density.
const REFERENCE_HALF_WIDTH: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct BimodalResult {
    pub chain: ChainResult,
    pub edges: Vec<f64>,
    /// `counts[k][b]` summed over replicas.
    pub counts: Vec<Vec<u64>>,
    /// Samples outside the histogram window (including those lost to divergence).
    pub outside: Vec<u64>,
    /// Samples each method would have produced: `R · N · M`.
    pub total: u64,
    pub reference_bins: Vec<f64>,
    pub reference_outside: f64,
    pub tv: Vec<f64>,
}

/// Composite Simpson rule with `n` (even) intervals.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Probability of each bin and of the rest of `[-3, 3]` under the target
/// normalized on `[-3, 3]`, plus its mean.
pub fn reference(target: &TargetModel, edges: &[f64]) -> (Vec<f64>, f64, f64) {
    let density = |x: f64| target.log_density(&[x]).exp();
    let z = simpson(
        &density,
        -REFERENCE_HALF_WIDTH,
        REFERENCE_HALF_WIDTH,
        120_000,
    );
    let bins: Vec<f64> = edges
        .windows(2)
        .map(|w| simpson(&density, w[0], w[1], 400) / z)
        .collect();
    let outside = (1.0 - bins.iter().sum::<f64>()).max(0.0);
    let mean = simpson(
        &|x| x * density(x),
        -REFERENCE_HALF_WIDTH,
        REFERENCE_HALF_WIDTH,
        120_000,
    ) / z;
    (bins, outside, mean)
}

/// `½ (Σ_b |p̂_b - p_b| + |p̂_out - p_out|)`.
pub fn total_variation(
    counts: &[u64],
    outside: u64,
    total: u64,
    reference_bins: &[f64],
    reference_outside: f64,
) -> f64 {
    let t = total as f64;
    let inner: f64 = counts
        .iter()
        .zip(reference_bins)
        .map(|(&c, p)| (c as f64 / t - p).abs())
        .sum();
    0.5 * (inner + (outside as f64 / t - reference_outside).abs())
}

pub fn run(cfg: &ExperimentConfig, workers: usize) -> AppResult<BimodalResult> {
    let p = &cfg.problem.bimodal;
    if !(p.sigma > 0.0) || p.bins == 0 || !(p.range[1] > p.range[0]) {
        return Err(AppError::config(
            "bimodal problem needs sigma > 0, bins >= 1 and range[1] > range[0]",
        ));
    }
    let target = TargetModel::bimodal(p.sigma, p.m0);
    let resolved = Resolved::new(cfg)?;
    let (lo, hi) = (p.range[0], p.range[1]);
    let width = (hi - lo) / p.bins as f64;
    let edges: Vec<f64> = (0..=p.bins).map(|b| lo + b as f64 * width).collect();
    let (mean0, sd0) = match cfg.problem.init {
        InitKind::Default | InitKind::Prior => (p.m0, 1.0),
        InitKind::StandardNormal => (0.0, 1.0),
        InitKind::Target => {
            return Err(AppError::config(
                "exp1-bimodal cannot draw its initial ensemble from the target",
            ))
        }
    };
    let m = cfg.chain.ensemble;
    let n_methods = cfg.methods.len();
    let mean_x = |e: &Ensemble| (0..e.m()).map(|i| e.particle(i)[0]).sum::<f64>() / e.m() as f64;
    let recorders: [mais_core::metropolis::Recorder<'_>; 1] = [&mean_x];

    let hist = Mutex::new((vec![vec![0u64; p.bins]; n_methods], vec![0u64; n_methods]));
    let replicas = for_replicas(cfg.experiment.replicas, workers, |r| {
        let init = Ensemble::gaussian(
            m,
            &[mean0],
            &[sd0],
            StreamKey::new(cfg.experiment.seed, Purpose::Initialization).replica(r),
        )?;
        let mut counts = vec![vec![0u64; p.bins]; n_methods];
        let mut outside = vec![0u64; n_methods];
        let mut visit = |k: usize, e: &Ensemble| {
            for i in 0..e.m() {
                let x = e.particle(i)[0];
                if x >= lo && x < hi {
                    let b = (((x - lo) / width) as usize).min(p.bins - 1);
                    counts[k][b] += 1;
                } else {
                    outside[k] += 1;
                }
            }
        };
        let run = run_replica(cfg, &resolved, &target, &init, &recorders, r, &mut visit)?;
        // samples a diverged chain never produced count as outside the window
        let expected = (cfg.chain.iterations * m) as u64;
        for (k, _) in run.methods.iter().enumerate() {
            let seen = counts[k].iter().sum::<u64>() + outside[k];
            outside[k] += expected - seen;
        }
        let mut h = hist.lock().expect("histogram lock");
        for k in 0..n_methods {
            for (a, c) in h.0[k].iter_mut().zip(&counts[k]) {
                *a += c;
            }
            h.1[k] += outside[k];
        }
        Ok(run)
    })?;
    let (counts, outside) = hist.into_inner().expect("histogram lock");
    let total = (cfg.experiment.replicas * cfg.chain.iterations * m) as u64;
    let (reference_bins, reference_outside, reference_mean) = reference(&target, &edges);
    let tv = (0..n_methods)
        .map(|k| {
            total_variation(
                &counts[k],
                outside[k],
                total,
                &reference_bins,
                reference_outside,
            )
        })
        .collect();
    Ok(BimodalResult {
        chain: ChainResult::new(cfg.clone(), replicas, reference_mean, "mean_x"),
        edges,
        counts,
        outside,
        total,
        reference_bins,
        reference_outside,
        tv,
    })
}

impl BimodalResult {
    pub fn tv_of(&self, label: &str) -> Option<f64> {
        self.chain.method_index(label).map(|k| self.tv[k])
    }

    pub fn histogram_table(&self) -> Table {
        let mut t = Table::new(&[
            "method",
            "bin_left",
            "bin_right",
            "density",
            "reference_density",
        ]);
        let total = self.total as f64;
        for (k, meth) in self.chain.config.methods.iter().enumerate() {
            for (b, w) in self.edges.windows(2).enumerate() {
                let width = w[1] - w[0];
                t.push(vec![
                    meth.label.clone().into(),
                    w[0].into(),
                    w[1].into(),
                    (self.counts[k][b] as f64 / total / width).into(),
                    (self.reference_bins[b] / width).into(),
                ]);
            }
        }
        t
    }

    pub fn files(&self) -> AppResult<Vec<(String, Vec<u8>)>> {
        let outside_frac: Vec<f64> = self
            .outside
            .iter()
            .map(|&o| o as f64 / self.total as f64)
            .collect();
        let tv = |_r: usize, k: usize| self.tv[k];
        let out = |_r: usize, k: usize| outside_frac[k];
        let mut tables = vec![
            (
                "diagnostics.csv",
                self.chain
                    .diagnostics_table(&[("tv_all_replicas", &tv), ("outside_fraction", &out)]),
            ),
            ("histogram.csv", self.histogram_table()),
        ];
        tables.extend(self.chain.common_tables());
        bundle(self.chain.manifest(), tables, Vec::new())
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let c = &self.chain;
        (0..c.config.methods.len())
            .map(|k| {
                let diverged = c
                    .replicas
                    .iter()
                    .any(|r| r.methods[k].status != RunStatus::Completed);
                format!(
                    "{:<10} h={:<9.3e} accept={:.3} tv={:.4}{}",
                    c.config.methods[k].label,
                    c.replica_mean(k, |_, r| r.step),
                    c.mean_accept(k),
                    self.tv[k],
                    if diverged { " (diverged)" } else { "" }
                )
            })
            .collect()
    }
}
