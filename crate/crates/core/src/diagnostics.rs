//! Estimators, autocorrelation analysis and the parallel cost model.

use alloc::vec::Vec;

use crate::dynamics::Ensemble;
use crate::error::{Error, Result};

/// `(1/M) Σ F(x_i)`
pub fn ensemble_average(f: &dyn Fn(&[f64]) -> f64, e: &Ensemble) -> f64 {
    (0..e.m()).map(|i| f(e.particle(i))).sum::<f64>() / e.m() as f64
}

/// Per-iteration ensemble averages of `f` together with the running path average.
pub fn ensemble_estimator(
    f: &dyn Fn(&[f64]) -> f64,
    snapshots: &[Ensemble],
) -> (Vec<f64>, Vec<f64>) {
    let values: Vec<f64> = snapshots.iter().map(|e| ensemble_average(f, e)).collect();
    let running = running_mean(&values);
    (values, running)
}

pub fn running_mean(series: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    series
        .iter()
        .enumerate()
        .map(|(k, v)| {
            acc += v;
            acc / (k + 1) as f64
        })
        .collect()
}

pub fn mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

fn autocov(series: &[f64], mu: f64, k: usize) -> f64 {
    let n = series.len();
    let mut acc = 0.0;
    for i in 0..n - k {
        acc += (series[i] - mu) * (series[i + k] - mu);
    }
    acc / (n - k) as f64
}

/// `ρ_k = c_k / c_0` for `k = 0..=max_lag`, with `c_k = 1/(N-k) Σ (F_i - F̄)(F_{i+k} - F̄)`.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() < max_lag + 2 {
        return Err(Error::InvalidArgument(
            "series too short for the requested lag",
        ));
    }
    let mu = mean(series);
    let c0 = autocov(series, mu, 0);
    if !(c0 > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((0..=max_lag).map(|k| autocov(series, mu, k) / c0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratedAutocorr {
    pub value: f64,
    /// Last lag included in the sum.
    pub lag: usize,
    /// The positive sequence had not ended when the available lags ran out.
    pub truncated: bool,
}

/// Geyer's initial positive sequence: pair sums `Γ_t = ρ_{2t} + ρ_{2t+1}` are
/// accumulated while positive, and `τ = -1 + 2 Σ Γ_t`.
pub fn integrated_autocorr(rho: &[f64]) -> IntegratedAutocorr {
    let mut sum = 0.0f64;
    let mut t = 0;
    while 2 * t + 1 < rho.len() {
        let pair = rho[2 * t] + rho[2 * t + 1];
        if !(pair > 0.0) {
            return IntegratedAutocorr {
                value: (2.0 * sum - 1.0).max(0.0),
                lag: (2 * t).saturating_sub(1),
                truncated: false,
            };
        }
        sum += pair;
        t += 1;
    }
    IntegratedAutocorr {
        value: (2.0 * sum - 1.0).max(0.0),
        lag: (2 * t).saturating_sub(1),
        truncated: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub mean: f64,
    pub autocorr: Vec<f64>,
    pub int_ac: IntegratedAutocorr,
}

impl SeriesStats {
    /// Standard error of the mean, `sqrt(τ c_0 / N)`.
    pub fn std_error(&self, series: &[f64]) -> f64 {
        let c0 = autocov(series, self.mean, 0);
        libm::sqrt(self.int_ac.value * c0 / series.len() as f64)
    }
}

/// Autocorrelations computed lazily until the initial positive sequence ends
/// (or `max_lag`, or `N - 2`, is reached).
pub fn series_stats(series: &[f64], max_lag: usize) -> Result<SeriesStats> {
    let n = series.len();
    if n < 3 {
        return Err(Error::InvalidArgument("series too short"));
    }
    let cap = max_lag.min(n - 2);
    let mu = mean(series);
    let c0 = autocov(series, mu, 0);
    if !(c0 > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let mut rho = alloc::vec![1.0];
    loop {
        let k = rho.len();
        if k > cap {
            break;
        }
        rho.push(autocov(series, mu, k) / c0);
        if k % 2 == 1 && rho[k - 1] + rho[k] <= 0.0 {
            break;
        }
    }
    let int_ac = integrated_autocorr(&rho);
    Ok(SeriesStats {
        mean: mu,
        autocorr: rho,
        int_ac,
    })
}

/// `int_ac · N · M / min(cores, B)`
pub fn efficiency_cost(int_ac: f64, n: usize, m: usize, block: usize, cores: usize) -> f64 {
    int_ac * n as f64 * m as f64 / cores.min(block) as f64
}

/// `(1/R) Σ (estimate_r - truth)²`
pub fn replica_mse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument("need at least two replicas"));
    }
    Ok(estimates
        .iter()
        .map(|e| (e - truth) * (e - truth))
        .sum::<f64>()
        / estimates.len() as f64)
}

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * libm::log(x) - x - libm::lgamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum * libm::exp(log_prefix)).min(1.0)
    } else {
        // continued fraction for Q, modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (1.0 - libm::exp(log_prefix) * h).max(0.0)
    }
}

pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    regularized_gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Quantile of the χ² distribution by bisection on [`chi2_cdf`].
pub fn chi2_quantile(p: f64, dof: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || dof == 0 {
        return Err(Error::InvalidArgument("need p in (0,1) and dof >= 1"));
    }
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
