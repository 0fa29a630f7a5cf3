//! Anisotropic Gaussian: the probability that `xᵀC⁻¹x` stays below the
//! χ²(d) median, estimated by the fraction of particles below it.

use mais_core::diagnostics::chi2_quantile;
use mais_core::dynamics::Ensemble;
use mais_core::rng::{Purpose, StreamKey};
use mais_core::targets::TargetModel;

use super::{bundle, for_replicas, run_replica, ChainResult, Resolved};
use crate::config::{ExperimentConfig, InitKind};
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone)]
pub struct GaussResult {
    pub chain: ChainResult,
    pub threshold: f64,
}

/// Fraction of particles with `Σ_j x_j² / v_j <= threshold`.
pub fn quantile_fraction(e: &Ensemble, variances: &[f64], threshold: f64) -> f64 {
    let inside = (0..e.m())
        .filter(|&i| {
            let x = e.particle(i);
            x.iter().zip(variances).map(|(a, v)| a * a / v).sum::<f64>() <= threshold
        })
        .count();
    inside as f64 / e.m() as f64
}

pub fn run(cfg: &ExperimentConfig, workers: usize) -> AppResult<GaussResult> {
    let vars = cfg.problem.gauss.variances.clone();
    if vars.is_empty() || vars.iter().any(|&v| !(v > 0.0)) {
        return Err(AppError::config("gauss variances must be positive"));
    }
    let d = vars.len();
    let target = TargetModel::diag_gaussian(vars.clone());
    let resolved = Resolved::new(cfg)?;
    let threshold = chi2_quantile(0.5, d)?;
    let sd: Vec<f64> = match cfg.problem.init {
        InitKind::Default | InitKind::Target => vars.iter().map(|v| v.sqrt()).collect(),
        InitKind::StandardNormal | InitKind::Prior => vec![1.0; d],
    };
    let f = |e: &Ensemble| quantile_fraction(e, &vars, threshold);
    let recorders: [mais_core::metropolis::Recorder<'_>; 1] = [&f];
    let replicas = for_replicas(cfg.experiment.replicas, workers, |r| {
        let init = Ensemble::gaussian(
            cfg.chain.ensemble,
            &vec![0.0; d],
            &sd,
            StreamKey::new(cfg.experiment.seed, Purpose::Initialization).replica(r),
        )?;
        run_replica(
            cfg,
            &resolved,
            &target,
            &init,
            &recorders,
            r,
            &mut |_, _| {},
        )
    })?;
    Ok(GaussResult {
        chain: ChainResult::new(cfg.clone(), replicas, 0.5, "P"),
        threshold,
    })
}

impl GaussResult {
    pub fn files(&self) -> AppResult<Vec<(String, Vec<u8>)>> {
        let mut tables = vec![("diagnostics.csv", self.chain.diagnostics_table(&[]))];
        tables.extend(self.chain.common_tables());
        bundle(self.chain.manifest(), tables, Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_counts_particles_inside_the_ellipsoid() {
        let e = Ensemble::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
        // thresholds: 0, 4, 1
        assert_eq!(quantile_fraction(&e, &[1.0, 0.25], 0.5), 1.0 / 3.0);
        assert_eq!(quantile_fraction(&e, &[1.0, 0.25], 1.0), 2.0 / 3.0);
        assert_eq!(quantile_fraction(&e, &[1.0, 0.25], 4.0), 1.0);
    }
}
