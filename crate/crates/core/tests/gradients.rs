use std::sync::Arc;

use mais_core::linalg::{gaussian_logpdf, spd_factor};
use mais_core::targets::{
    assemble_ode_posterior, LinearGaussianIp, OdeIpConfig, Target, TargetModel,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn fd_error(t: &dyn Target, x: &[f64]) -> f64 {
    let g = t.gradient(x).unwrap();
    let scale = g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut y = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        y[i] = x[i] + h;
        let up = t.log_density(&y);
        y[i] = x[i] - h;
        let down = t.log_density(&y);
        y[i] = x[i];
        worst = worst.max(((up - down) / (2.0 * h) - g[i]).abs() / scale);
    }
    worst
}

fn small_ip(a: Vec<f64>, prior: Vec<f64>, noise: f64, data: Vec<f64>) -> LinearGaussianIp {
    let k = data.len();
    let d = prior.len();
    LinearGaussianIp::from_parts(
        DMatrix::from_row_slice(k, d, &a),
        prior,
        DMatrix::from_diagonal_element(k, k, noise * noise),
        data,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bimodal_gradient(x in -3.0f64..3.0, sigma in 0.05f64..1.0, m0 in -1.0f64..1.0) {
        prop_assert!(fd_error(&TargetModel::bimodal(sigma, m0), &[x]) < 1e-5);
    }

    #[test]
    fn diag_gaussian_gradient(x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1, 0.01, 0.001]);
        prop_assert!(fd_error(&t, &x) < 1e-5);
    }

    #[test]
    fn linear_ip_gradient_and_density(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        data in prop::collection::vec(-1.0f64..1.0, 3),
        x in prop::collection::vec(-2.0f64..2.0, 2),
        y in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let ip = Arc::new(small_ip(a, vec![1.0, 0.25], 0.3, data));
        let t = TargetModel::linear_ip(ip.clone());
        prop_assert!(fd_error(&t, &x) < 1e-5);
        // differences of ln π agree with the posterior Gaussian
        let f = spd_factor(ip.posterior_cov()).unwrap();
        let m = ip.posterior_mean();
        let lhs = t.log_density(&x) - t.log_density(&y);
        let rhs = gaussian_logpdf(&x, m, &f, 1.0) - gaussian_logpdf(&y, m, &f, 1.0);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }
}

#[test]
fn ode_posterior_gradient_at_seeded_points() {
    let ip = Arc::new(assemble_ode_posterior(&OdeIpConfig::default()).unwrap());
    let t = TargetModel::linear_ip(ip.clone());
    let m = ip.posterior_mean().to_vec();
    for k in 0..100 {
        let x: Vec<f64> = m
            .iter()
            .zip(ip.prior_var())
            .enumerate()
            .map(|(i, (mi, v))| mi + v.sqrt() * ((k * 7 + i * 13) as f64).sin())
            .collect();
        assert!(fd_error(&t, &x) < 1e-5, "point {k}");
    }
    // the gradient vanishes at the posterior mean
    let g = t.gradient(&m).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
}
