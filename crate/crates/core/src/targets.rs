//! Target densities and the discretized elliptic inverse problem.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::EksProblem;
use crate::error::{Error, Result};
use crate::linalg::spd_factor;
use crate::rng::{Purpose, StreamKey};

/// An unnormalized log-density on `R^d`.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    /// `ln π(x)` up to an additive constant; `-inf` off the support.
    fn log_density(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.log_density(x), self.gradient(x)?))
    }
}

#[derive(Debug, Clone)]
pub enum TargetKind {
    /// Posterior of `G(x) = x²` with noise `σ` and prior `N(m0, 1)`; one-dimensional.
    BimodalBip {
        sigma: f64,
        m0: f64,
    },
    /// Centered Gaussian with diagonal covariance; the mode has log-density 0.
    DiagGaussian {
        variances: Vec<f64>,
    },
    LinearIpPosterior(Arc<LinearGaussianIp>),
    /// Uniform on `[0,1]^d`.
    Uniform01,
    /// Product of `1/2 + 2 min(x, 1-x)` on `[0,1]^d`.
    Triangular,
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    dim: usize,
    kind: TargetKind,
}

impl TargetModel {
    pub fn bimodal(sigma: f64, m0: f64) -> Self {
        Self {
            dim: 1,
            kind: TargetKind::BimodalBip { sigma, m0 },
        }
    }

    pub fn diag_gaussian(variances: Vec<f64>) -> Self {
        Self {
            dim: variances.len(),
            kind: TargetKind::DiagGaussian { variances },
        }
    }

    pub fn linear_ip(ip: Arc<LinearGaussianIp>) -> Self {
        Self {
            dim: ip.dim(),
            kind: TargetKind::LinearIpPosterior(ip),
        }
    }

    pub fn uniform01(dim: usize) -> Self {
        Self {
            dim,
            kind: TargetKind::Uniform01,
        }
    }

    pub fn triangular(dim: usize) -> Self {
        Self {
            dim,
            kind: TargetKind::Triangular,
        }
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    pub fn has_gradient(&self) -> bool {
        !matches!(self.kind, TargetKind::Uniform01 | TargetKind::Triangular)
    }
}

/// Normalized triangular density on `[0,1]`.
pub fn triangular_density(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        0.5 + 2.0 * x.min(1.0 - x)
    } else {
        0.0
    }
}

impl Target for TargetModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            TargetKind::BimodalBip { sigma, m0 } => {
                let x = x[0];
                let misfit = x * x - 1.0;
                -misfit * misfit / (2.0 * sigma * sigma) - 0.5 * (x - m0) * (x - m0)
            }
            TargetKind::DiagGaussian { variances } => {
                -0.5 * x.iter().zip(variances).map(|(v, s)| v * v / s).sum::<f64>()
            }
            TargetKind::LinearIpPosterior(ip) => ip.log_density(x),
            TargetKind::Uniform01 => {
                if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            TargetKind::Triangular => x.iter().map(|&v| libm::log(triangular_density(v))).sum(),
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            TargetKind::BimodalBip { sigma, m0 } => {
                let x = x[0];
                Ok(alloc::vec![
                    -2.0 * x * (x * x - 1.0) / (sigma * sigma) - (x - m0)
                ])
            }
            TargetKind::DiagGaussian { variances } => {
                Ok(x.iter().zip(variances).map(|(v, s)| -v / s).collect())
            }
            TargetKind::LinearIpPosterior(ip) => Ok(ip.gradient(x)),
            TargetKind::Uniform01 | TargetKind::Triangular => Err(Error::NoGradient),
        }
    }
}

/// A forward map `G: R^d -> R^k` for derivative-free ensemble drifts.
pub trait ForwardMap: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct LinearForward {
    pub matrix: DMatrix<f64>,
}

impl ForwardMap for LinearForward {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (k, d) = self.matrix.shape();
        (0..k)
            .map(|i| (0..d).map(|j| self.matrix[(i, j)] * x[j]).sum())
            .collect()
    }
}

/// Linear-Gaussian inverse problem `y = A x + ξ`, `x ~ N(0, Γ0)`, `ξ ~ N(0, Γ)`,
/// together with its exact Gaussian posterior.
#[derive(Debug, Clone)]
pub struct LinearGaussianIp {
    forward: DMatrix<f64>,
    prior_var: Vec<f64>,
    noise_cov: DMatrix<f64>,
    data: Vec<f64>,
    posterior_mean: Vec<f64>,
    posterior_cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    linear_term: Vec<f64>,
    data_norm: f64,
    truth: Option<Vec<f64>>,
}

impl LinearGaussianIp {
    pub fn from_parts(
        forward: DMatrix<f64>,
        prior_var: Vec<f64>,
        noise_cov: DMatrix<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        let (k, d) = forward.shape();
        if prior_var.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: prior_var.len(),
            });
        }
        if noise_cov.shape() != (k, k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: noise_cov.nrows(),
            });
        }
        if data.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: data.len(),
            });
        }
        if prior_var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("prior variances must be positive"));
        }
        let gamma0 = DMatrix::from_diagonal(&DVector::from_column_slice(&prior_var));
        let y = DVector::from_column_slice(&data);

        // Kalman form: S = A Γ0 Aᵀ + Γ
        let a_g0 = &forward * &gamma0;
        let s = &a_g0 * forward.transpose() + &noise_cov;
        let s_chol = s
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { dim: k })?;
        let gain_t = s_chol.solve(&a_g0); // S⁻¹ A Γ0
        let posterior_mean = (a_g0.transpose() * s_chol.solve(&y)).as_slice().to_vec();
        let mut posterior_cov = &gamma0 - a_g0.transpose() * gain_t;
        posterior_cov = (&posterior_cov + posterior_cov.transpose()) * 0.5;

        // precision form used for evaluation: H = Aᵀ Γ⁻¹ A + Γ0⁻¹, b = Aᵀ Γ⁻¹ y
        let g_chol = noise_cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { dim: k })?;
        let ginv_a = g_chol.solve(&forward);
        let ginv_y = g_chol.solve(&y);
        let mut precision = forward.transpose() * &ginv_a;
        for i in 0..d {
            precision[(i, i)] += 1.0 / prior_var[i];
        }
        let linear_term = (forward.transpose() * &ginv_y).as_slice().to_vec();
        let data_norm = y.dot(&ginv_y);
        Ok(Self {
            forward,
            prior_var,
            noise_cov,
            data,
            posterior_mean,
            posterior_cov,
            precision,
            linear_term,
            data_norm,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn dim(&self) -> usize {
        self.forward.ncols()
    }

    pub fn observations(&self) -> usize {
        self.forward.nrows()
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn prior_var(&self) -> &[f64] {
        &self.prior_var
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn posterior_mean(&self) -> &[f64] {
        &self.posterior_mean
    }

    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.posterior_cov
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    /// `-½‖Γ^{-1/2}(y - A x)‖² - ½‖Γ0^{-1/2} x‖²`, evaluated through the precision form.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..d {
            let mut hx = 0.0;
            for j in 0..d {
                hx += self.precision[(i, j)] * x[j];
            }
            quad += x[i] * hx;
            lin += self.linear_term[i] * x[i];
        }
        -0.5 * quad + lin - 0.5 * self.data_norm
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.linear_term[i] - (0..d).map(|j| self.precision[(i, j)] * x[j]).sum::<f64>()
            })
            .collect()
    }

    /// Derivative-free drift data. With `include_prior` the prior is folded into
    /// the forward map as `x ↦ (A x, x)` with data `(y, 0)` and noise `diag(Γ, Γ0)`.
    pub fn eks_problem(&self, include_prior: bool) -> Result<EksProblem> {
        let (k, d) = self.forward.shape();
        if !include_prior {
            return EksProblem::new(
                Arc::new(LinearForward {
                    matrix: self.forward.clone(),
                }),
                &self.noise_cov,
                self.data.clone(),
            );
        }
        let mut g = DMatrix::zeros(k + d, d);
        g.view_mut((0, 0), (k, d)).copy_from(&self.forward);
        for i in 0..d {
            g[(k + i, i)] = 1.0;
        }
        let mut noise = DMatrix::zeros(k + d, k + d);
        noise.view_mut((0, 0), (k, k)).copy_from(&self.noise_cov);
        for i in 0..d {
            noise[(k + i, k + i)] = self.prior_var[i];
        }
        let mut data = self.data.clone();
        data.extend(core::iter::repeat_n(0.0, d));
        EksProblem::new(Arc::new(LinearForward { matrix: g }), &noise, data)
    }
}

/// Settings for the discretized problem `-p'' + p = θ` on `(0,1)`, `p(0) = p(1) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeIpConfig {
    /// Mesh size is `2^-mesh_exponent`.
    pub mesh_exponent: u32,
    pub observations: usize,
    pub basis_terms: usize,
    /// Prior variances are `i^(-2τ)`.
    pub tau: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Replace the simulated data by zeros.
    pub zero_data: bool,
}

impl Default for OdeIpConfig {
    fn default() -> Self {
        Self {
            mesh_exponent: 6,
            observations: 64,
            basis_terms: 10,
            tau: 2.0,
            noise_std: 0.01,
            seed: 0,
            zero_data: false,
        }
    }
}

/// `φ_i(s) = (√2/π) sin(iπs)`.
pub fn basis_function(i: usize, s: f64) -> f64 {
    core::f64::consts::SQRT_2 / core::f64::consts::PI
        * libm::sin(i as f64 * core::f64::consts::PI * s)
}

/// Solves the tridiagonal system `(1/δ²) tridiag(-1, 2, -1) p + p = rhs` on the interior nodes.
pub fn solve_elliptic(rhs: &[f64], mesh: f64) -> Vec<f64> {
    let n = rhs.len();
    let off = -1.0 / (mesh * mesh);
    let diag = 2.0 / (mesh * mesh) + 1.0;
    let mut c = alloc::vec![0.0; n];
    let mut p = alloc::vec![0.0; n];
    let mut denom = diag;
    c[0] = off / denom;
    p[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag - off * c[i - 1];
        c[i] = off / denom;
        p[i] = (rhs[i] - off * p[i - 1]) / denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        p[i] -= c[i] * p[i + 1];
    }
    p
}

/// Observed values at `s_k = k/K`, interpolating linearly between grid nodes
/// (including the zero boundary values).
fn observe(interior: &[f64], mesh: f64, observations: usize) -> Vec<f64> {
    let n_cells = interior.len() + 1;
    let node = |j: usize| {
        if j == 0 || j == n_cells {
            0.0
        } else {
            interior[j - 1]
        }
    };
    (1..=observations)
        .map(|k| {
            let t = k as f64 / observations as f64 / mesh;
            let j = (libm::floor(t) as usize).min(n_cells);
            let frac = t - j as f64;
            if frac.abs() < 1e-12 || j == n_cells {
                node(j)
            } else {
                (1.0 - frac) * node(j) + frac * node(j + 1)
            }
        })
        .collect()
}

/// Builds the forward matrix column by column, simulates data and computes the posterior.
pub fn assemble_ode_posterior(cfg: &OdeIpConfig) -> Result<LinearGaussianIp> {
    if cfg.mesh_exponent < 3 || cfg.mesh_exponent > 24 {
        return Err(Error::InvalidArgument("mesh exponent must lie in 3..=24"));
    }
    if cfg.observations == 0 || cfg.basis_terms == 0 {
        return Err(Error::InvalidArgument(
            "observation count and basis size must be positive",
        ));
    }
    if !(cfg.tau > 1.0) || !(cfg.noise_std > 0.0) {
        return Err(Error::InvalidArgument("need tau > 1 and noise_std > 0"));
    }
    let n_cells = 1usize << cfg.mesh_exponent;
    let mesh = 1.0 / n_cells as f64;
    let (k, d) = (cfg.observations, cfg.basis_terms);
    let mut forward = DMatrix::zeros(k, d);
    for i in 0..d {
        let rhs: Vec<f64> = (1..n_cells)
            .map(|j| basis_function(i + 1, j as f64 * mesh))
            .collect();
        let p = solve_elliptic(&rhs, mesh);
        for (row, v) in observe(&p, mesh, k).into_iter().enumerate() {
            forward[(row, i)] = v;
        }
    }
    let prior_var: Vec<f64> = (1..=d)
        .map(|i| libm::pow(i as f64, -2.0 * cfg.tau))
        .collect();
    let noise_cov = DMatrix::identity(k, k) * (cfg.noise_std * cfg.noise_std);

    let mut truth_rng = StreamKey::new(cfg.seed, Purpose::Data).particle(0).rng();
    let truth: Vec<f64> = prior_var
        .iter()
        .map(|&v| libm::sqrt(v) * truth_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let data = if cfg.zero_data {
        alloc::vec![0.0; k]
    } else {
        let mut noise_rng = StreamKey::new(cfg.seed, Purpose::Data).particle(1).rng();
        let clean = LinearForward {
            matrix: forward.clone(),
        }
        .apply(&truth);
        clean
            .into_iter()
            .map(|v| v + cfg.noise_std * noise_rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    Ok(LinearGaussianIp::from_parts(forward, prior_var, noise_cov, data)?.with_truth(truth))
}

/// Checks that a posterior covariance is dominated by the prior covariance:
/// returns the smallest eigenvalue of `Γ0 - C*`.
pub fn prior_dominance_margin(ip: &LinearGaussianIp) -> f64 {
    let d = ip.dim();
    let mut diff = -ip.posterior_cov().clone();
    for i in 0..d {
        diff[(i, i)] += ip.prior_var()[i];
    }
    nalgebra::SymmetricEigen::new(diff)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// `spd_factor` of the posterior covariance, for whitening chain output.
pub fn posterior_factor(ip: &LinearGaussianIp) -> Result<crate::linalg::SpdFactor> {
    spd_factor(ip.posterior_cov())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(target: &dyn Target, x: &[f64]) {
        let g = target.gradient(x).unwrap();
        let step = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += step;
            xm[i] -= step;
            let fd = (target.log_density(&xp) - target.log_density(&xm)) / (2.0 * step);
            let scale = g[i].abs().max(1.0);
            assert!(
                (fd - g[i]).abs() / scale < 1e-5,
                "coord {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn diag_gaussian_mode() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1, 0.01, 0.001]);
        let (v, g) = t.evaluate(&[0.0; 4]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bimodal_gradient_matches_finite_differences() {
        let t = TargetModel::bimodal(0.1, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..17 {
            let x: f64 = rng.random_range(-1.5..1.5);
            fd_check(&t, &[x]);
        }
    }

    #[test]
    fn triangular_and_uniform_values() {
        let t = TargetModel::triangular(1);
        assert!((t.log_density(&[0.5]) - 1.5f64.ln()).abs() < 1e-15);
        assert_eq!(t.log_density(&[1.2]), f64::NEG_INFINITY);
        assert_eq!(t.gradient(&[0.5]), Err(Error::NoGradient));
        let u = TargetModel::uniform01(2);
        assert_eq!(u.log_density(&[0.0, 1.0]), 0.0);
        assert_eq!(u.log_density(&[0.5, -0.1]), f64::NEG_INFINITY);
    }

    #[test]
    fn triangular_and_uniform_integrate_to_one() {
        // piecewise linear: the trapezoid rule is exact on a grid containing the kink
        let n = 1000;
        let h = 1.0 / n as f64;
        let t = TargetModel::triangular(1);
        let u = TargetModel::uniform01(1);
        let (mut st, mut su) = (0.0, 0.0);
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            st += w * t.log_density(&[i as f64 * h]).exp();
            su += w * u.log_density(&[i as f64 * h]).exp();
        }
        assert!((st * h - 1.0).abs() < 1e-10);
        assert!((su * h - 1.0).abs() < 1e-10);
    }

    #[test]
    fn prior_variances_with_tau_two() {
        let ip = assemble_ode_posterior(&OdeIpConfig::default()).unwrap();
        assert_eq!(ip.prior_var()[0], 1.0);
        assert!((ip.prior_var()[1] - 0.0625).abs() < 1e-15);
        assert!((ip.prior_var()[2] - 1.0 / 81.0).abs() < 1e-15);
    }

    #[test]
    fn zero_data_gives_zero_mean() {
        let cfg = OdeIpConfig {
            zero_data: true,
            ..OdeIpConfig::default()
        };
        let ip = assemble_ode_posterior(&cfg).unwrap();
        assert!(ip.posterior_mean().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_column_matches_continuous_solution() {
        let ip = assemble_ode_posterior(&OdeIpConfig::default()).unwrap();
        let pi = core::f64::consts::PI;
        let mut max_err = 0.0f64;
        for k in 0..64 {
            let s = (k + 1) as f64 / 64.0;
            let exact = 2f64.sqrt() / pi / (1.0 + pi * pi) * (pi * s).sin();
            max_err = max_err.max((ip.forward()[(k, 0)] - exact).abs());
        }
        assert!(max_err < 5e-3, "{max_err}");
    }

    #[test]
    fn tridiagonal_solver_matches_dense_solve() {
        let rhs: Vec<f64> = (0..7).map(|i| (i as f64).sin() + 0.3).collect();
        let mesh = 0.125;
        let p = solve_elliptic(&rhs, mesh);
        let n = rhs.len();
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0 / (mesh * mesh) + 1.0
            } else if i.abs_diff(j) == 1 {
                -1.0 / (mesh * mesh)
            } else {
                0.0
            }
        });
        let dense = a.lu().solve(&DVector::from_vec(rhs)).unwrap();
        for i in 0..n {
            assert!((p[i] - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_formulas_and_prior_dominance() {
        let ip = assemble_ode_posterior(&OdeIpConfig {
            basis_terms: 5,
            ..OdeIpConfig::default()
        })
        .unwrap();
        assert!(prior_dominance_margin(&ip) > -1e-10);
        // information form: C* = (Aᵀ Γ⁻¹ A + Γ0⁻¹)⁻¹, m* = C* Aᵀ Γ⁻¹ y
        let a = ip.forward();
        let ginv = ip.noise_cov().clone().try_inverse().unwrap();
        let mut h = a.transpose() * &ginv * a;
        for i in 0..5 {
            h[(i, i)] += 1.0 / ip.prior_var()[i];
        }
        let c = h.try_inverse().unwrap();
        let m = &c * a.transpose() * &ginv * DVector::from_column_slice(ip.data());
        let c_err = (&c - ip.posterior_cov()).norm() / c.norm();
        let m_err = (m - DVector::from_column_slice(ip.posterior_mean())).norm()
            / DVector::from_column_slice(ip.posterior_mean()).norm();
        assert!(c_err < 1e-10, "{c_err}");
        assert!(m_err < 1e-10, "{m_err}");
    }
}
