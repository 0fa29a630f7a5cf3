//! Dense symmetric linear algebra and Gaussian primitives.
//!
//! Every sampler in the crate builds its proposals from the two factor types
//! here: [`SpdFactor`] for block-diagonal particle covariances and [`SymSqrt`]
//! for the kernel matrix that couples particles in the SVGD proposal.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter levels tried in order; each is multiplied by `trace(S)/d`.
pub const JITTER_SCHEDULE: [f64; 5] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6];

/// Eigenvalues above `-PSD_TOLERANCE * ||K||` are clamped to zero by [`sym_sqrt`].
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl SpdFactor {
    pub fn identity(dim: usize) -> Self {
        Self {
            lower: DMatrix::identity(dim, dim),
            log_det: 0.0,
            jitter: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `ln det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Absolute jitter `ε` that was added to the diagonal before factoring.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L Lᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Writes `out += scale_root * L z`.
    pub fn apply_add(&self, z: &[f64], scale_root: f64, out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.lower[(i, j)] * z[j];
            }
            out[i] += scale_root * acc;
        }
    }

    /// `‖L⁻¹ r‖²` by forward substitution.
    pub fn whitened_norm_sq(&self, r: &[f64]) -> f64 {
        let n = self.dim();
        let mut w = [0.0f64; 16];
        let mut heap;
        let w: &mut [f64] = if n <= w.len() {
            &mut w[..n]
        } else {
            heap = alloc::vec![0.0; n];
            &mut heap
        };
        let mut total = 0.0;
        for i in 0..n {
            let mut acc = r[i];
            for j in 0..i {
                acc -= self.lower[(i, j)] * w[j];
            }
            w[i] = acc / self.lower[(i, i)];
            total += w[i] * w[i];
        }
        total
    }
}

/// Cholesky factor of `s`, escalating through [`JITTER_SCHEDULE`] on failure.
pub fn spd_factor(s: &DMatrix<f64>) -> Result<SpdFactor> {
    spd_factor_with(s, &JITTER_SCHEDULE)
}

/// Cholesky factor of `s + ε I` for the first `ε = level * trace(s)/d` that factors.
pub fn spd_factor_with(s: &DMatrix<f64>, schedule: &[f64]) -> Result<SpdFactor> {
    let d = s.nrows();
    if d == 0 || s.ncols() != d {
        return Err(Error::InvalidArgument(
            "spd_factor needs a non-empty square matrix",
        ));
    }
    let unit = s.trace() / d as f64;
    for &level in schedule {
        let eps = level * unit;
        if level > 0.0 && !(eps > 0.0) {
            continue;
        }
        if let Some(lower) = cholesky_lower(s, eps) {
            let log_det = 2.0 * (0..d).map(|i| libm::log(lower[(i, i)])).sum::<f64>();
            return Ok(SpdFactor {
                lower,
                log_det,
                jitter: eps,
            });
        }
    }
    Err(Error::NotPositiveDefinite { dim: d })
}

fn cholesky_lower(s: &DMatrix<f64>, eps: f64) -> Option<DMatrix<f64>> {
    let d = s.nrows();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut diag = s[(j, j)] + eps;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let pivot = libm::sqrt(diag);
        l[(j, j)] = pivot;
        for i in (j + 1)..d {
            let mut acc = s[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / pivot;
        }
    }
    Some(l)
}

/// Symmetric square root of a positive semi-definite matrix, with its eigensystem.
#[derive(Debug, Clone)]
pub struct SymSqrt {
    root: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SymSqrt {
    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    pub fn root(&self) -> &DMatrix<f64> {
        &self.root
    }

    /// Clamped eigenvalues of the original matrix.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// `ln det K`, `-inf` when an eigenvalue was clamped to zero.
    pub fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|&l| libm::log(l)).sum()
    }
}

/// Symmetric root `R` with `R R = K`, via an eigendecomposition.
pub fn sym_sqrt(k: &DMatrix<f64>) -> Result<SymSqrt> {
    let n = k.nrows();
    if n == 0 || k.ncols() != n {
        return Err(Error::InvalidArgument(
            "sym_sqrt needs a non-empty square matrix",
        ));
    }
    let eig = SymmetricEigen::new(k.clone());
    let norm = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    if min < -PSD_TOLERANCE * norm {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let v = eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &l) in eigenvalues.iter().enumerate() {
        let r = libm::sqrt(l);
        for i in 0..n {
            scaled[(i, j)] *= r;
        }
    }
    let root = &scaled * v.transpose();
    Ok(SymSqrt {
        root,
        eigenvalues,
        eigenvectors: v,
    })
}

/// Log-density of `N(mean, scale · L Lᵀ)` at `x`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], factor: &SpdFactor, scale: f64) -> f64 {
    let n = factor.dim();
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(mean.len(), n);
    let mut r = [0.0f64; 16];
    let mut heap;
    let r: &mut [f64] = if n <= r.len() {
        &mut r[..n]
    } else {
        heap = alloc::vec![0.0; n];
        &mut heap
    };
    for i in 0..n {
        r[i] = x[i] - mean[i];
    }
    let quad = factor.whitened_norm_sq(r) / scale;
    -0.5 * (n as f64 * (LN_2PI + libm::log(scale)) + factor.log_det() + quad)
}

/// Draws `mean + sqrt(scale) · L z` with `z` standard normal from `rng`.
pub fn gaussian_sample<R: Rng + ?Sized>(
    mean: &[f64],
    factor: &SpdFactor,
    scale: f64,
    rng: &mut R,
) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut out = mean.to_vec();
    factor.apply_add(&z, libm::sqrt(scale), &mut out);
    out
}

/// `ln Σ exp(ℓᵢ)`; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(values.iter().map(|&v| libm::exp(v - max)).sum::<f64>())
}

/// Weights `exp(ℓᵢ - logsumexp(ℓ))`.
pub fn normalized_log_weights(log_values: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_values);
    if lse == f64::NEG_INFINITY || lse.is_nan() {
        return Err(Error::AllWeightsZero);
    }
    Ok(log_values.iter().map(|&v| libm::exp(v - lse)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_factor() {
        let f = spd_factor(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(f.log_det(), 0.0);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn diagonal_factor() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let f = spd_factor(&s).unwrap();
        assert_eq!(f.lower()[(0, 0)], 2.0);
        assert_eq!(f.lower()[(1, 1)], 3.0);
        assert_eq!(f.lower()[(1, 0)], 0.0);
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn gram_matrix_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(5, &mut rng);
        let s = a.transpose() * &a;
        let f = spd_factor(&s).unwrap();
        let err = frob(&(f.reconstruct() - &s)) / frob(&s);
        assert!(err < 1e-12, "relative error {err}");
    }

    #[test]
    fn singular_matrix_gets_jitter_zero_matrix_fails() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = spd_factor(&s).unwrap();
        assert!(f.jitter() > 0.0);
        assert_eq!(
            spd_factor(&DMatrix::zeros(3, 3)),
            Err(Error::NotPositiveDefinite { dim: 3 })
        );
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_factor(&indefinite).is_err());
    }

    #[test]
    fn sym_sqrt_trivial_cases() {
        let r = sym_sqrt(&DMatrix::identity(3, 3)).unwrap();
        assert!(frob(&(r.root() - DMatrix::<f64>::identity(3, 3))) < 1e-14);
        let r = sym_sqrt(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((r.root()[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn sym_sqrt_matches_closed_form_two_by_two() {
        // eigenpairs (1.5, (1,1)/√2) and (0.5, (1,-1)/√2)
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let a = 0.5 * (1.5f64.sqrt() + 0.5f64.sqrt());
        let b = 0.5 * (1.5f64.sqrt() - 0.5f64.sqrt());
        let expected = DMatrix::from_row_slice(2, 2, &[a, b, b, a]);
        let r = sym_sqrt(&k).unwrap();
        assert!(frob(&(r.root() - &expected)) < 1e-12);
        assert!(frob(&(r.root() * r.root() - &k)) < 1e-10);
    }

    #[test]
    fn sym_sqrt_random_psd_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = 1 + trial % 20;
            let rank = 1 + (trial * 7) % n.max(1);
            let a = DMatrix::from_fn(rank, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let k = a.transpose() * &a;
            let r = sym_sqrt(&k).unwrap();
            let err = frob(&(r.root() * r.root() - &k)) / frob(&k);
            assert!(err < 1e-8, "trial {trial}: {err}");
        }
    }

    #[test]
    fn sym_sqrt_rejects_indefinite() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(sym_sqrt(&k), Err(Error::NotPsd { .. })));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-13]);
        let r = sym_sqrt(&tiny).unwrap();
        assert_eq!(
            r.eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min),
            0.0
        );
    }

    #[test]
    fn standard_normal_logpdf_at_zero() {
        let v = gaussian_logpdf(&[0.0], &[0.0], &SpdFactor::identity(1), 1.0);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn logpdf_translation_invariance() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let f = spd_factor(&s).unwrap();
        let x = [0.25, -1.5];
        let m = [0.5, 0.75];
        let base = gaussian_logpdf(&x, &m, &f, 0.125);
        // dyadic shifts keep the differences exact
        let c = [4.0, -8.0];
        let shifted = gaussian_logpdf(
            &[x[0] + c[0], x[1] + c[1]],
            &[m[0] + c[0], m[1] + c[1]],
            &f,
            0.125,
        );
        assert_eq!(base, shifted);
        let c = [0.123_456, 3.3];
        let shifted = gaussian_logpdf(
            &[x[0] + c[0], x[1] + c[1]],
            &[m[0] + c[0], m[1] + c[1]],
            &f,
            0.125,
        );
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn logpdf_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(3, &mut rng);
        let s = a.transpose() * &a + DMatrix::identity(3, 3) * 0.1;
        let scale = 0.37;
        let f = spd_factor(&s).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let m: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let cov = &s * scale;
        let inv = cov.clone().try_inverse().unwrap();
        let r = nalgebra::DVector::from_iterator(3, x.iter().zip(&m).map(|(a, b)| a - b));
        let quad = (r.transpose() * inv * &r)[(0, 0)];
        let det = cov.determinant();
        let oracle = -0.5 * (3.0 * LN_2PI + det.ln() + quad);
        let v = gaussian_logpdf(&x, &m, &f, scale);
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let f = spd_factor(&DMatrix::from_element(1, 1, 0.7)).unwrap();
        let n = 20_000;
        let dx = 20.0 / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = -10.0 + i as f64 * dx;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * gaussian_logpdf(&[x], &[0.3], &f, 1.3).exp();
        }
        assert!((total * dx - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic_and_has_right_covariance() {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        let f = spd_factor(&s).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            gaussian_sample(&[1.0, 2.0], &f, 0.5, &mut r1),
            gaussian_sample(&[1.0, 2.0], &f, 0.5, &mut r2)
        );
        let y = gaussian_sample(&[1.0, 2.0], &f, 1e-30, &mut r1);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 2.0).abs() < 1e-12);

        let n = 100_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            let y = gaussian_sample(&[0.0, 0.0], &f, 1.0, &mut r1);
            acc[0] += y[0] * y[0];
            acc[1] += y[1] * y[1];
            acc[2] += y[0] * y[1];
        }
        let (v0, v1, c) = (acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64);
        assert!((v0 - 1.0).abs() < 0.05);
        assert!((v1 - 4.0).abs() < 0.2);
        assert!(c.abs() < 0.05 * 2.0);
    }

    #[test]
    fn log_weights() {
        let w = normalized_log_weights(&[-3.0; 4]).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let w = normalized_log_weights(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        assert_eq!(
            normalized_log_weights(&[f64::NEG_INFINITY; 3]),
            Err(Error::AllWeightsZero)
        );
        let a = normalized_log_weights(&[0.125, -2.0, 5.0]).unwrap();
        let b = normalized_log_weights(&[700.125, 698.0, 705.0]).unwrap();
        let s: f64 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
