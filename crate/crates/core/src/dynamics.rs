//! Gaussian proposals built from interacting particle dynamics.
//!
//! Each dynamics defines a drift and a diffusion per particle that may depend
//! on the whole ensemble. [`block_proposal`] evaluates them for the particles
//! of one block against an evaluation ensemble (block values substituted into
//! the current ensemble); [`svgd_proposal`] builds the kernel-coupled proposal
//! which only exists for the whole ensemble.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    gaussian_logpdf, normalized_log_weights, spd_factor, sym_sqrt, SpdFactor, SymSqrt,
    JITTER_SCHEDULE, LN_2PI,
};
use crate::rng::StreamKey;
use crate::targets::{ForwardMap, Target};

/// `M` particles of dimension `d`, stored particle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl Ensemble {
    pub fn new(m: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument("ensemble needs M >= 1 and d >= 1"));
        }
        if data.len() != m * d {
            return Err(Error::DimensionMismatch {
                expected: m * d,
                found: data.len(),
            });
        }
        Ok(Self { m, d, data })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            data: alloc::vec![0.0; m * d],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), d, data)
    }

    /// Independent draws `x_i ~ N(mean, diag(sd²))`, particle `i` from `key.particle(i)`.
    pub fn gaussian(m: usize, mean: &[f64], sd: &[f64], key: StreamKey) -> Result<Self> {
        if mean.len() != sd.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: sd.len(),
            });
        }
        let d = mean.len();
        let mut data = Vec::with_capacity(m * d);
        for i in 0..m {
            let mut rng = key.particle(i as u64).rng();
            for (mu, s) in mean.iter().zip(sd) {
                data.push(mu + s * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self::new(m, d, data)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn set_particle(&mut self, i: usize, x: &[f64]) {
        self.particle_mut(i).copy_from_slice(x);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with the particles in `block` replaced by `values` (block-major, `|b|·d`).
    pub fn substituted(&self, block: &[usize], values: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, &i) in block.iter().enumerate() {
            out.set_particle(i, &values[k * self.d..(k + 1) * self.d]);
        }
        out
    }

    /// Values of the particles in `block`, block-major.
    pub fn gather(&self, block: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(block.len() * self.d);
        for &i in block {
            out.extend_from_slice(self.particle(i));
        }
        out
    }
}

/// Normalization of ensemble covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovNorm {
    /// Divide by `M`.
    #[default]
    Population,
    /// Divide by `M - 1` (falls back to `M` when `M = 1`).
    Sample,
}

impl CovNorm {
    fn divisor(self, m: usize) -> f64 {
        match self {
            CovNorm::Population => m as f64,
            CovNorm::Sample if m > 1 => (m - 1) as f64,
            CovNorm::Sample => 1.0,
        }
    }
}

/// Empirical mean and covariance with divisor `M`.
pub fn empirical_moments(e: &Ensemble) -> (Vec<f64>, DMatrix<f64>) {
    empirical_moments_with(e, CovNorm::Population)
}

pub fn empirical_moments_with(e: &Ensemble, norm: CovNorm) -> (Vec<f64>, DMatrix<f64>) {
    let (m, d) = (e.m(), e.d());
    let mut mean = alloc::vec![0.0; d];
    for i in 0..m {
        for (a, &x) in mean.iter_mut().zip(e.particle(i)) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..m {
        let x = e.particle(i);
        for a in 0..d {
            let ra = x[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += ra * (x[b] - mean[b]);
            }
        }
    }
    let div = norm.divisor(m);
    for a in 0..d {
        for b in 0..=a {
            let v = cov[(a, b)] / div;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Target-weighted mean and covariance; weights are `π(x_i)/Σπ(x_j)`.
pub fn weighted_moments(e: &Ensemble, log_weights: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let w = normalized_log_weights(log_weights)?;
    let d = e.d();
    let mut mean = alloc::vec![0.0; d];
    for (i, &wi) in w.iter().enumerate() {
        for (a, &x) in mean.iter_mut().zip(e.particle(i)) {
            *a += wi * x;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let x = e.particle(i);
        for a in 0..d {
            let ra = x[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += wi * ra * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    Ok((mean, cov))
}

/// Shifted first and second moment sums of an ensemble, so that moments of
/// an ensemble with a few particles replaced cost `O(|b| d²)`.
#[derive(Debug, Clone)]
pub struct MomentCache {
    m: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    outer: DMatrix<f64>,
}

impl MomentCache {
    pub fn new(e: &Ensemble) -> Self {
        let (m, d) = (e.m(), e.d());
        let shift = empirical_moments(e).0;
        let mut cache = Self {
            m,
            shift,
            sum: alloc::vec![0.0; d],
            outer: DMatrix::zeros(d, d),
        };
        for i in 0..m {
            cache.accumulate(e.particle(i), 1.0);
        }
        cache
    }

    fn accumulate(&mut self, x: &[f64], sign: f64) {
        let d = self.shift.len();
        for a in 0..d {
            let ra = x[a] - self.shift[a];
            self.sum[a] += sign * ra;
            for b in 0..=a {
                self.outer[(a, b)] += sign * ra * (x[b] - self.shift[b]);
            }
        }
    }

    /// Replaces one particle's contribution after an accepted move.
    pub fn replace(&mut self, old: &[f64], new: &[f64]) {
        self.accumulate(old, -1.0);
        self.accumulate(new, 1.0);
    }

    /// Moments of `e` with the particles of `block` replaced by `values`.
    pub fn substituted_moments(
        &self,
        e: &Ensemble,
        block: &[usize],
        values: &[f64],
        norm: CovNorm,
    ) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.shift.len();
        let mut work = self.clone();
        for (k, &i) in block.iter().enumerate() {
            work.replace(e.particle(i), &values[k * d..(k + 1) * d]);
        }
        let m = self.m as f64;
        let centered: Vec<f64> = work.sum.iter().map(|s| s / m).collect();
        let mean: Vec<f64> = centered
            .iter()
            .zip(&self.shift)
            .map(|(c, s)| c + s)
            .collect();
        let div = norm.divisor(self.m);
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..=a {
                let v = (work.outer[(a, b)] - m * centered[a] * centered[b]) / div;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        (mean, cov)
    }
}

/// Data for the derivative-free ensemble Kalman drift: forward map `G`,
/// noise covariance `Γ` (stored as its inverse) and data `y`.
#[derive(Clone)]
pub struct EksProblem {
    forward: Arc<dyn ForwardMap>,
    noise_precision: DMatrix<f64>,
    data: Vec<f64>,
}

impl fmt::Debug for EksProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EksProblem")
            .field("input_dim", &self.forward.input_dim())
            .field("output_dim", &self.forward.output_dim())
            .finish()
    }
}

impl EksProblem {
    pub fn new(
        forward: Arc<dyn ForwardMap>,
        noise_cov: &DMatrix<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        let k = forward.output_dim();
        if noise_cov.shape() != (k, k) || data.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: data.len(),
            });
        }
        let noise_precision = noise_cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { dim: k })?
            .inverse();
        Ok(Self {
            forward,
            noise_precision,
            data,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.output_dim()
    }
}

#[derive(Debug, Clone)]
pub enum DynamicsKind {
    Pmala,
    Aldi {
        gamma: f64,
    },
    EksDf {
        gamma: f64,
        problem: Arc<EksProblem>,
    },
    Cbs {
        gamma: f64,
    },
    Svgd {
        bandwidth: f64,
    },
}

impl DynamicsKind {
    pub fn name(&self) -> &'static str {
        match self {
            DynamicsKind::Pmala => "pmala",
            DynamicsKind::Aldi { .. } => "aldi",
            DynamicsKind::EksDf { .. } => "eks-df",
            DynamicsKind::Cbs { .. } => "cbs",
            DynamicsKind::Svgd { .. } => "svgd",
        }
    }

    /// Whether a particle's proposal factorizes over the particles of a block.
    pub fn is_particle_wise(&self) -> bool {
        !matches!(self, DynamicsKind::Svgd { .. })
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    pub kind: DynamicsKind,
    pub step: f64,
    pub cov_norm: CovNorm,
}

impl DynamicsSpec {
    pub fn new(kind: DynamicsKind, step: f64) -> Result<Self> {
        let spec = Self {
            kind,
            step,
            cov_norm: CovNorm::Population,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pmala(step: f64) -> Result<Self> {
        Self::new(DynamicsKind::Pmala, step)
    }

    pub fn aldi(gamma: f64, step: f64) -> Result<Self> {
        Self::new(DynamicsKind::Aldi { gamma }, step)
    }

    pub fn cbs(gamma: f64, step: f64) -> Result<Self> {
        Self::new(DynamicsKind::Cbs { gamma }, step)
    }

    pub fn svgd(bandwidth: f64, step: f64) -> Result<Self> {
        Self::new(DynamicsKind::Svgd { bandwidth }, step)
    }

    pub fn eks_df(gamma: f64, problem: EksProblem, step: f64) -> Result<Self> {
        Self::new(
            DynamicsKind::EksDf {
                gamma,
                problem: Arc::new(problem),
            },
            step,
        )
    }

    pub fn with_step(&self, step: f64) -> Self {
        Self {
            step,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidArgument(
                "step size must be positive and finite",
            ));
        }
        match &self.kind {
            DynamicsKind::Aldi { gamma }
            | DynamicsKind::Cbs { gamma }
            | DynamicsKind::EksDf { gamma, .. }
                if !(0.0..=1.0).contains(gamma) =>
            {
                Err(Error::InvalidArgument("gamma must lie in [0, 1]"))
            }
            DynamicsKind::Svgd { bandwidth } if !(*bandwidth > 0.0) => {
                Err(Error::InvalidArgument("kernel bandwidth must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Product proposal for the particles of one block: particle `block[k]` is
/// drawn from `N(means[k], scale · L Lᵀ)` with a factor shared across the block.
#[derive(Debug, Clone)]
pub struct BlockProposal {
    pub block: Vec<usize>,
    pub d: usize,
    /// Block-major, `|b|·d`.
    pub means: Vec<f64>,
    pub factor: SpdFactor,
    pub scale: f64,
}

impl BlockProposal {
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    /// `ln det` of the joint block covariance.
    pub fn joint_log_det(&self) -> f64 {
        self.block.len() as f64 * (self.d as f64 * libm::log(self.scale) + self.factor.log_det())
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let d = self.d;
        (0..self.block.len())
            .map(|k| {
                gaussian_logpdf(
                    &y[k * d..(k + 1) * d],
                    self.mean(k),
                    &self.factor,
                    self.scale,
                )
            })
            .sum()
    }

    /// Draws the block; particle `block[k]` uses the stream `key.particle(block[k])`.
    pub fn sample(&self, key: StreamKey) -> Vec<f64> {
        let d = self.d;
        let root = libm::sqrt(self.scale);
        let mut out = self.means.clone();
        let mut z = alloc::vec![0.0; d];
        for (k, &i) in self.block.iter().enumerate() {
            let mut rng = key.particle(i as u64).rng();
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            self.factor
                .apply_add(&z, root, &mut out[k * d..(k + 1) * d]);
        }
        out
    }
}

/// Kernel-coupled proposal over the whole ensemble with covariance
/// `scale · (K ⊗ I_d)` in particle-major order.
#[derive(Debug, Clone)]
pub struct FullCoupledProposal {
    pub m: usize,
    pub d: usize,
    pub mean: Vec<f64>,
    pub kernel_root: SymSqrt,
    pub scale: f64,
    pub jitter: f64,
}

impl FullCoupledProposal {
    pub fn joint_log_det(&self) -> f64 {
        self.d as f64 * (self.m as f64 * libm::log(self.scale) + self.kernel_root.log_det())
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let (m, d) = (self.m, self.d);
        let v = self.kernel_root.eigenvectors();
        let lambda = self.kernel_root.eigenvalues();
        let mut quad = 0.0;
        for c in 0..d {
            for j in 0..m {
                let proj: f64 = (0..m)
                    .map(|i| v[(i, j)] * (y[i * d + c] - self.mean[i * d + c]))
                    .sum();
                quad += proj * proj / lambda[j];
            }
        }
        -0.5 * ((m * d) as f64 * LN_2PI + self.joint_log_det() + quad / self.scale)
    }

    /// Draws `mean + sqrt(scale) R Z`; row `j` of `Z` comes from `key.particle(j)`.
    pub fn sample(&self, key: StreamKey) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        let mut z = alloc::vec![0.0; m * d];
        for j in 0..m {
            let mut rng = key.particle(j as u64).rng();
            for c in 0..d {
                z[j * d + c] = rng.sample(StandardNormal);
            }
        }
        let root = self.kernel_root.root();
        let s = libm::sqrt(self.scale);
        let mut out = self.mean.clone();
        for i in 0..m {
            for j in 0..m {
                let r = s * root[(i, j)];
                for c in 0..d {
                    out[i * d + c] += r * z[j * d + c];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Proposal {
    Block(BlockProposal),
    Coupled(FullCoupledProposal),
}

pub fn proposal_logpdf(p: &Proposal, y: &[f64]) -> f64 {
    match p {
        Proposal::Block(b) => b.logpdf(y),
        Proposal::Coupled(c) => c.logpdf(y),
    }
}

/// `γ I + (1 - γ) C`
fn inflate(c: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    let mut out = c * (1.0 - gamma);
    for i in 0..c.nrows() {
        out[(i, i)] += gamma;
    }
    out
}

/// Proposal for the particles of `block`, with drift and diffusion evaluated on
/// `e` with the block's particles replaced by `values` (block-major, `|b|·d`).
pub fn block_proposal(
    spec: &DynamicsSpec,
    target: &dyn Target,
    e: &Ensemble,
    block: &[usize],
    values: &[f64],
) -> Result<BlockProposal> {
    block_proposal_cached(spec, target, e, block, values, None)
}

/// As [`block_proposal`], reading the ensemble moments from `cache` when given.
/// The cache must describe `e`.
pub fn block_proposal_cached(
    spec: &DynamicsSpec,
    target: &dyn Target,
    e: &Ensemble,
    block: &[usize],
    values: &[f64],
    cache: Option<&MomentCache>,
) -> Result<BlockProposal> {
    let (m, d) = (e.m(), e.d());
    if values.len() != block.len() * d {
        return Err(Error::DimensionMismatch {
            expected: block.len() * d,
            found: values.len(),
        });
    }
    if block.iter().any(|&i| i >= m) {
        return Err(Error::InvalidArgument("block index out of range"));
    }
    let h = spec.step;
    let moments = |norm| match cache {
        Some(c) => c.substituted_moments(e, block, values, norm),
        None => empirical_moments_with(&e.substituted(block, values), norm),
    };
    let mut means = Vec::with_capacity(values.len());
    let (factor, scale) = match &spec.kind {
        DynamicsKind::Pmala => {
            for z in values.chunks(d) {
                let g = target.gradient(z)?;
                means.extend(z.iter().zip(&g).map(|(zi, gi)| zi + h * gi));
            }
            (SpdFactor::identity(d), 2.0 * h)
        }
        DynamicsKind::Aldi { gamma } => {
            let (mean, cov) = moments(spec.cov_norm);
            let a = inflate(&cov, *gamma);
            let correction = (1.0 - gamma) * (d + 1) as f64 / m as f64;
            for z in values.chunks(d) {
                let g = target.gradient(z)?;
                for r in 0..d {
                    let ag: f64 = (0..d).map(|c| a[(r, c)] * g[c]).sum();
                    means.push(z[r] + h * (ag + correction * (z[r] - mean[r])));
                }
            }
            (spd_factor(&a)?, 2.0 * h)
        }
        DynamicsKind::Cbs { gamma } => {
            let eval = e.substituted(block, values);
            let logw: Vec<f64> = (0..m)
                .map(|i| target.log_density(eval.particle(i)))
                .collect();
            let (mean_pi, cov_pi) = weighted_moments(&eval, &logw)?;
            for z in values.chunks(d) {
                means.extend(
                    z.iter()
                        .zip(&mean_pi)
                        .map(|(zi, mi)| (1.0 - h) * zi + h * mi),
                );
            }
            (spd_factor(&inflate(&cov_pi, *gamma))?, 4.0 * h)
        }
        DynamicsKind::EksDf { gamma, problem } => {
            if problem.input_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: problem.input_dim(),
                });
            }
            let eval = e.substituted(block, values);
            let (mean, cov) = moments(spec.cov_norm);
            let k = problem.output_dim();
            let gs: Vec<Vec<f64>> = (0..m)
                .map(|i| problem.forward.apply(eval.particle(i)))
                .collect();
            let mut mean_g = alloc::vec![0.0; k];
            for g in &gs {
                mean_g
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, v)| *a += v / m as f64);
            }
            // C^{xG}: d × k cross-covariance, γ-blended with the identity when square
            let div = spec.cov_norm.divisor(m);
            let mut cxg = DMatrix::zeros(d, k);
            for (i, g) in gs.iter().enumerate() {
                let x = eval.particle(i);
                for r in 0..d {
                    let dx = (x[r] - mean[r]) / div;
                    for c in 0..k {
                        cxg[(r, c)] += dx * (g[c] - mean_g[c]);
                    }
                }
            }
            if d == k {
                cxg = inflate(&cxg, *gamma);
            }
            let gain = cxg * &problem.noise_precision;
            for (kk, z) in values.chunks(d).enumerate() {
                let gz = &gs[block[kk]];
                for r in 0..d {
                    let drift: f64 = (0..k)
                        .map(|c| gain[(r, c)] * (gz[c] - problem.data[c]))
                        .sum();
                    means.push(z[r] - h * drift);
                }
            }
            (spd_factor(&inflate(&cov, *gamma))?, 2.0 * h)
        }
        DynamicsKind::Svgd { .. } => {
            return Err(Error::UnsupportedMode(
                "the SVGD proposal does not factorize over blocks",
            ))
        }
    };
    Ok(BlockProposal {
        block: block.to_vec(),
        d,
        means,
        factor,
        scale,
    })
}

/// `exp(-‖x-y‖²/(2s²))` and its gradient in `x`.
pub fn rbf_kernel(s: f64, x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = libm::exp(-sq / (2.0 * s * s));
    let grad = x
        .iter()
        .zip(y)
        .map(|(a, b)| -(a - b) / (s * s) * value)
        .collect();
    (value, grad)
}

/// Kernel-coupled proposal for the whole ensemble.
pub fn svgd_proposal(
    spec: &DynamicsSpec,
    target: &dyn Target,
    e: &Ensemble,
) -> Result<FullCoupledProposal> {
    let DynamicsKind::Svgd { bandwidth } = spec.kind else {
        return Err(Error::InvalidArgument("svgd_proposal needs an SVGD spec"));
    };
    let (m, d) = (e.m(), e.d());
    let h = spec.step;
    let grads: Vec<Vec<f64>> = (0..m)
        .map(|i| target.gradient(e.particle(i)))
        .collect::<Result<_>>()?;
    let mut kernel = DMatrix::zeros(m, m);
    let mut mean = e.as_slice().to_vec();
    for j in 0..m {
        let xj = e.particle(j);
        for i in 0..m {
            // ∇ in the second argument of K(x_j, x_i) equals ∇ in the first of K(x_i, x_j)
            let (k, grad_i) = rbf_kernel(bandwidth, e.particle(i), xj);
            kernel[(j, i)] = k;
            for c in 0..d {
                mean[j * d + c] += h / m as f64 * (k * grads[i][c] + grad_i[c]);
            }
        }
    }
    let mut jitter = 0.0;
    for &level in &JITTER_SCHEDULE {
        let mut kj = kernel.clone();
        for i in 0..m {
            kj[(i, i)] += level;
        }
        let root = sym_sqrt(&kj)?;
        let max = root.eigenvalues().iter().fold(0.0f64, |a, &b| a.max(b));
        if root.eigenvalues().iter().all(|&l| l > 1e-14 * max) {
            jitter = level;
            return Ok(FullCoupledProposal {
                m,
                d,
                mean,
                kernel_root: root,
                scale: 2.0 * h / m as f64,
                jitter,
            });
        }
    }
    let _ = jitter;
    Err(Error::NotPositiveDefinite { dim: m })
}

/// The proposal used by an ensemble-wise update.
pub fn ensemble_proposal(
    spec: &DynamicsSpec,
    target: &dyn Target,
    e: &Ensemble,
) -> Result<Proposal> {
    if spec.kind.is_particle_wise() {
        let block: Vec<usize> = (0..e.m()).collect();
        block_proposal(spec, target, e, &block, e.as_slice()).map(Proposal::Block)
    } else {
        svgd_proposal(spec, target, e).map(Proposal::Coupled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::targets::TargetModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(m: usize, d: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ensemble::new(m, d, data).unwrap()
    }

    #[test]
    fn moments_by_hand() {
        let e = Ensemble::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let (m, c) = empirical_moments(&e);
        assert_eq!(m, vec![0.0]);
        assert_eq!(c[(0, 0)], 1.0);
        let same = Ensemble::from_rows(&vec![vec![0.3, 2.0]; 4]).unwrap();
        assert!(empirical_moments(&same).1.iter().all(|&v| v.abs() < 1e-15));
        let (_, c) = empirical_moments_with(&e, CovNorm::Sample);
        assert_eq!(c[(0, 0)], 2.0);
    }

    #[test]
    fn weighted_moments_by_hand() {
        let e = Ensemble::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let (m, c) = weighted_moments(&e, &[3f64.ln(), 0.0]).unwrap();
        assert!((m[0] - 0.25).abs() < 1e-15);
        assert!((c[(0, 0)] - 0.1875).abs() < 1e-15);
        let (m, c) = weighted_moments(&e, &[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(m[0], 1.0);
        assert_eq!(c[(0, 0)], 0.0);
        let e = random_ensemble(7, 3, 1);
        let (m1, c1) = weighted_moments(&e, &[0.4; 7]).unwrap();
        let (m2, c2) = empirical_moments(&e);
        for a in 0..3 {
            assert!((m1[a] - m2[a]).abs() < 1e-14);
        }
        assert!((c1 - c2).abs().max() < 1e-14);
    }

    #[test]
    fn moment_cache_matches_direct_computation() {
        let e = random_ensemble(9, 3, 2);
        let cache = MomentCache::new(&e);
        let values = [0.5, -0.2, 3.0, 1.0, 1.0, 1.0];
        let block = [2, 7];
        let (m1, c1) = cache.substituted_moments(&e, &block, &values, CovNorm::Population);
        let (m2, c2) = empirical_moments(&e.substituted(&block, &values));
        for a in 0..3 {
            assert!((m1[a] - m2[a]).abs() < 1e-12);
        }
        assert!((c1 - c2).abs().max() < 1e-12);
    }

    #[test]
    fn aldi_with_full_inflation_is_pmala() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1, 0.01]);
        let e = random_ensemble(5, 3, 3);
        let block = [1, 3];
        let vals = e.gather(&block);
        let a = block_proposal(
            &DynamicsSpec::aldi(1.0, 0.01).unwrap(),
            &t,
            &e,
            &block,
            &vals,
        )
        .unwrap();
        let p = block_proposal(&DynamicsSpec::pmala(0.01).unwrap(), &t, &e, &block, &vals).unwrap();
        assert_eq!(a.means, p.means);
        assert_eq!(a.scale, p.scale);
        assert!(
            (a.factor.reconstruct() - p.factor.reconstruct())
                .abs()
                .max()
                == 0.0
        );
    }

    #[test]
    fn aldi_scalar_hand_evaluation() {
        // ensemble {-1, 0, 1}, N(0,1): C = 2/3, m = 0, gradient at 1 is -1
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let e = Ensemble::from_rows(&[vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        let h = 0.1;
        let p = block_proposal(&DynamicsSpec::aldi(0.0, h).unwrap(), &t, &e, &[2], &[1.0]).unwrap();
        let expected = 1.0 + h * (-(2.0 / 3.0) + (2.0 / 3.0) * (1.0 - 0.0));
        assert!((p.means[0] - expected).abs() < 1e-15);
        assert!((p.factor.reconstruct()[(0, 0)] * p.scale - 2.0 * h * 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cbs_unit_step_lands_on_weighted_mean() {
        let t = TargetModel::bimodal(0.1, 0.8);
        let e = Ensemble::from_rows(&[vec![-0.9], vec![0.2], vec![1.1]]).unwrap();
        let spec = DynamicsSpec::cbs(0.5, 1.0).unwrap();
        let p = block_proposal(&spec, &t, &e, &[0, 1, 2], e.as_slice()).unwrap();
        let logw: Vec<f64> = (0..3).map(|i| t.log_density(e.particle(i))).collect();
        let (mp, cp) = weighted_moments(&e, &logw).unwrap();
        for k in 0..3 {
            assert_eq!(p.means[k], mp[0]);
        }
        // covariance multiple is 4h
        assert_eq!(p.scale, 4.0);
        assert!((p.factor.reconstruct()[(0, 0)] - (0.5 + 0.5 * cp[(0, 0)])).abs() < 1e-14);
    }

    #[test]
    fn pmala_ignores_the_complement() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.5]);
        let e1 = random_ensemble(4, 2, 5);
        let mut e2 = random_ensemble(4, 2, 6);
        e2.set_particle(1, e1.particle(1));
        let spec = DynamicsSpec::pmala(0.2).unwrap();
        let v = e1.gather(&[1]);
        let p1 = block_proposal(&spec, &t, &e1, &[1], &v).unwrap();
        let p2 = block_proposal(&spec, &t, &e2, &[1], &v).unwrap();
        assert_eq!(p1.means, p2.means);
    }

    #[test]
    fn pmala_logpdf_closed_form() {
        let t = TargetModel::diag_gaussian(vec![1.0, 2.0]);
        let x = [0.3, -0.4];
        let y = [0.1, 0.2];
        let h = 0.25;
        let e = Ensemble::from_rows(&[x.to_vec()]).unwrap();
        let p = block_proposal(&DynamicsSpec::pmala(h).unwrap(), &t, &e, &[0], &x).unwrap();
        let g = [-x[0], -x[1] / 2.0];
        let sq: f64 = (0..2).map(|i| (y[i] - x[i] - h * g[i]).powi(2)).sum();
        let closed = -sq / (4.0 * h) - (4.0 * core::f64::consts::PI * h).ln();
        assert!((p.logpdf(&y) - closed).abs() < 1e-12);
    }

    #[test]
    fn block_logpdf_is_a_product_and_peaks_at_mean() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1]);
        let e = random_ensemble(6, 2, 8);
        let spec = DynamicsSpec::aldi(0.1, 0.05).unwrap();
        let v = e.gather(&[0, 4]);
        let p = block_proposal(&spec, &t, &e, &[0, 4], &v).unwrap();
        let y = [0.1, 0.2, -0.3, 0.4];
        let split: f64 = (0..2)
            .map(|k| gaussian_logpdf(&y[2 * k..2 * k + 2], p.mean(k), &p.factor, p.scale))
            .sum();
        assert!((p.logpdf(&y) - split).abs() < 1e-12);
        let peak = p.logpdf(&p.means);
        assert!((peak - (-0.5 * p.joint_log_det() - 2.0 * LN_2PI)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let yy: Vec<f64> = p
                .means
                .iter()
                .map(|m| m + 0.01 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(p.logpdf(&yy) <= peak);
        }
    }

    #[test]
    fn rbf_values() {
        let (v, g) = rbf_kernel(1.0, &[1.0], &[0.0]);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g[0] + v).abs() < 1e-15);
        let (v, g) = rbf_kernel(0.3, &[0.2, 0.1], &[0.2, 0.1]);
        assert_eq!(v, 1.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (a, ga) = rbf_kernel(0.7, &[0.1, -0.5], &[0.4, 0.3]);
        let (b, gb) = rbf_kernel(0.7, &[0.4, 0.3], &[0.1, -0.5]);
        assert_eq!(a, b);
        for i in 0..2 {
            assert!((ga[i] + gb[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_particle_svgd_is_an_unadjusted_langevin_step() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.5]);
        let e = Ensemble::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let h = 0.01;
        let p = svgd_proposal(&DynamicsSpec::svgd(0.5, h).unwrap(), &t, &e).unwrap();
        assert!((p.mean[0] - (0.4 - h * 0.4)).abs() < 1e-15);
        assert!((p.mean[1] - (-0.2 + h * 0.4)).abs() < 1e-15);
        assert!((p.scale - 2.0 * h).abs() < 1e-15);
    }

    #[test]
    fn svgd_structured_density_matches_dense_assembly() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.5]);
        let e = random_ensemble(3, 2, 9);
        let h = 0.05;
        let p = svgd_proposal(&DynamicsSpec::svgd(0.8, h).unwrap(), &t, &e).unwrap();
        let mut kern = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                kern[(i, j)] = rbf_kernel(0.8, e.particle(i), e.particle(j)).0;
            }
        }
        let dense = DMatrix::from_fn(6, 6, |r, c| {
            if r % 2 == c % 2 {
                2.0 * h / 3.0 * kern[(r / 2, c / 2)]
            } else {
                0.0
            }
        });
        let chol = dense.clone().cholesky().unwrap();
        let y = [0.1, 0.2, 0.3, -0.4, 0.5, 0.0];
        let r = nalgebra::DVector::from_fn(6, |i, _| y[i] - p.mean[i]);
        let quad = r.dot(&chol.solve(&r));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let dense_logpdf = -0.5 * (6.0 * LN_2PI + log_det + quad);
        assert!((p.joint_log_det() - log_det).abs() < 1e-10);
        assert!((p.logpdf(&y) - dense_logpdf).abs() < 1e-10);
    }

    #[test]
    fn svgd_sample_covariance_structure() {
        // zero noise row: with scale→tiny, draws collapse on the mean
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let e = random_ensemble(3, 1, 10);
        let p = svgd_proposal(&DynamicsSpec::svgd(1.0, 1e-300).unwrap(), &t, &e).unwrap();
        let y = p.sample(StreamKey::new(1, Purpose::ProposalNoise));
        for i in 0..3 {
            assert!((y[i] - p.mean[i]).abs() < 1e-140);
        }
    }

    #[test]
    fn eks_df_matches_aldi_drift_for_linear_maps() {
        use crate::targets::{assemble_ode_posterior, OdeIpConfig};
        let ip = Arc::new(
            assemble_ode_posterior(&OdeIpConfig {
                basis_terms: 3,
                ..OdeIpConfig::default()
            })
            .unwrap(),
        );
        let t = TargetModel::linear_ip(ip.clone());
        let e = random_ensemble(8, 3, 11);
        let all: Vec<usize> = (0..8).collect();
        let eks = DynamicsSpec::eks_df(0.0, ip.eks_problem(true).unwrap(), 1e-3).unwrap();
        let aldi = DynamicsSpec::aldi(0.0, 1e-3).unwrap();
        let pe = block_proposal(&eks, &t, &e, &all, e.as_slice()).unwrap();
        let pa = block_proposal(&aldi, &t, &e, &all, e.as_slice()).unwrap();
        // identical up to the (d+1)/M correction that only ALDI carries
        let (mean, _) = empirical_moments(&e);
        for k in 0..8 {
            for r in 0..3 {
                let corr = 1e-3 * 4.0 / 8.0 * (e.particle(k)[r] - mean[r]);
                let diff = pe.means[3 * k + r] - (pa.means[3 * k + r] - corr);
                assert!(
                    diff.abs() < 1e-9 * (1.0 + pa.means[3 * k + r].abs()),
                    "{diff}"
                );
            }
        }
    }

    #[test]
    fn svgd_rejected_by_block_proposal() {
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let e = random_ensemble(3, 1, 12);
        let spec = DynamicsSpec::svgd(1.0, 0.1).unwrap();
        assert!(matches!(
            block_proposal(&spec, &t, &e, &[0], &[0.0]),
            Err(Error::UnsupportedMode(_))
        ));
    }
}
