use mais_core::bias_lab::{
    discretize_correct_kernel, GridKernelSpec, GridModel, GridProposal, GridTarget,
};
use mais_core::dynamics::{empirical_moments, DynamicsSpec, Ensemble};
use mais_core::metropolis::{
    ensemble_move_log_density, run_chain, tune_step_size, BlockPartition, ChainConfig, KernelMode,
    ScanOrder, TuneConfig,
};
use mais_core::rng::{Purpose, StreamKey};
use mais_core::targets::{Target, TargetModel};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn ensemble(m: usize, d: usize, data: &[f64]) -> Ensemble {
    Ensemble::new(m, d, data[..m * d].to_vec()).unwrap()
}

fn specs() -> Vec<DynamicsSpec> {
    vec![
        DynamicsSpec::pmala(0.05).unwrap(),
        DynamicsSpec::aldi(0.01, 0.05).unwrap(),
        DynamicsSpec::aldi(1.0, 0.05).unwrap(),
        DynamicsSpec::cbs(0.01, 0.05).unwrap(),
        DynamicsSpec::svgd(0.5, 0.01).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // π(x) q(x,y) α(x,y) = π(y) q(y,x) α(y,x) for every dynamics
    #[test]
    fn ensemble_moves_satisfy_detailed_balance(
        m in 3usize..7,
        xs in prop::collection::vec(-1.5f64..1.5, 24),
        ys in prop::collection::vec(-1.5f64..1.5, 24),
    ) {
        let target = TargetModel::diag_gaussian(vec![1.0, 0.5, 0.2]);
        let (x, y) = (ensemble(m, 3, &xs), ensemble(m, 3, &ys));
        let lp = |e: &Ensemble| (0..m).map(|i| target.log_density(e.particle(i))).sum::<f64>();
        for spec in specs() {
            let fwd = lp(&x) + ensemble_move_log_density(&spec, &target, &x, &y).unwrap();
            let rev = lp(&y) + ensemble_move_log_density(&spec, &target, &y, &x).unwrap();
            prop_assert!((fwd - rev).abs() < 1e-8 * (1.0 + fwd.abs()), "{:?}: {} vs {}", spec.kind, fwd, rev);
        }
    }

    #[test]
    fn moments_are_affine_equivariant(
        xs in prop::collection::vec(-2.0f64..2.0, 16),
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let e = ensemble(8, 2, &xs);
        let am = DMatrix::from_row_slice(2, 2, &a);
        let mut t = e.clone();
        for i in 0..8 {
            let p = e.particle(i);
            let q: Vec<f64> = (0..2).map(|r| am[(r, 0)] * p[0] + am[(r, 1)] * p[1] + b[r]).collect();
            t.set_particle(i, &q);
        }
        let (m0, c0) = empirical_moments(&e);
        let (m1, c1) = empirical_moments(&t);
        for r in 0..2 {
            let want = am[(r, 0)] * m0[0] + am[(r, 1)] * m0[1] + b[r];
            prop_assert!((m1[r] - want).abs() < 1e-12);
        }
        prop_assert!((c1 - &am * c0 * am.transpose()).amax() < 1e-11);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // exact invariance of the Metropolized two-particle kernels on small grids
    #[test]
    fn correct_grid_kernels_are_invariant(
        half in 2usize..8,
        triangular in any::<bool>(),
        mean_pair in any::<bool>(),
        v in 0.05f64..1.0,
    ) {
        let spec = GridKernelSpec {
            nodes: 2 * half + 1,
            target: if triangular { GridTarget::Triangular } else { GridTarget::Uniform },
            proposal: if mean_pair { GridProposal::MeanPair { variance: v } } else { GridProposal::Spread { gamma: 0.05, step: v } },
        };
        let model = GridModel::new(&spec).unwrap();
        let modes = [
            KernelMode::EnsembleWise,
            KernelMode::SequentialPW(ScanOrder::Deterministic),
            KernelMode::SequentialPW(ScanOrder::RandomPermutation),
            KernelMode::BlockWise(BlockPartition::new(vec![vec![1], vec![0]], 2).unwrap(), ScanOrder::Deterministic),
        ];
        for mode in &modes {
            let op = discretize_correct_kernel(&model, mode).unwrap();
            prop_assert!(op.invariance_defect() < 1e-12, "{:?}", mode.short_name());
            prop_assert!(op.detailed_balance_defect() < 1e-12 || matches!(mode, KernelMode::SequentialPW(ScanOrder::Deterministic) | KernelMode::BlockWise(..)));
        }
    }
}

fn gaussian_init(m: usize, seed: u64) -> Ensemble {
    Ensemble::gaussian(
        m,
        &[0.0; 2],
        &[1.0, 0.3],
        StreamKey::new(seed, Purpose::Initialization),
    )
    .unwrap()
}

#[test]
fn tuner_moves_the_step_toward_the_target_rate() {
    let target = TargetModel::diag_gaussian(vec![1.0, 0.09]);
    let tune = TuneConfig::new(0.5, 50).unwrap();
    let mode = KernelMode::SequentialPW(ScanOrder::Deterministic);
    let big = tune_step_size(
        &mode,
        &DynamicsSpec::pmala(20.0).unwrap(),
        &target,
        gaussian_init(10, 1),
        tune,
        40,
        3,
    )
    .unwrap();
    assert!(big.step < 2.0, "{}", big.step);
    let small = tune_step_size(
        &mode,
        &DynamicsSpec::pmala(1e-5).unwrap(),
        &target,
        gaussian_init(10, 1),
        tune,
        40,
        3,
    )
    .unwrap();
    assert!(small.step > 1e-3, "{}", small.step);
    for r in [&big, &small] {
        let last = r.trace.last().unwrap().rate;
        assert!((last - 0.5).abs() < 0.2, "final epoch rate {last}");
        assert_eq!(r.trace.len(), 40);
    }
}

#[test]
fn chains_are_reproducible_and_replicas_differ() {
    let target = TargetModel::diag_gaussian(vec![1.0, 0.09]);
    let f = |e: &Ensemble| e.particle(0)[0];
    let run = |replica: u64| {
        let mut cfg = ChainConfig::new(
            KernelMode::EnsembleWise,
            DynamicsSpec::aldi(0.01, 0.05).unwrap(),
            200,
            50,
            7,
        );
        cfg.replica = replica;
        run_chain(&cfg, &target, gaussian_init(6, replica), &[&f]).unwrap()
    };
    assert_eq!(run(0), run(0));
    assert_ne!(run(0).series, run(1).series);
}

#[test]
fn sequential_chain_keeps_the_target_variance() {
    // long pw chain: pooled second moment of the first coordinate ≈ 1
    let target = TargetModel::diag_gaussian(vec![1.0, 0.09]);
    let cfg = ChainConfig::new(
        KernelMode::SequentialPW(ScanOrder::Deterministic),
        DynamicsSpec::aldi(0.1, 0.3).unwrap(),
        20_000,
        1_000,
        11,
    );
    let f = |e: &Ensemble| (0..e.m()).map(|i| e.particle(i)[0].powi(2)).sum::<f64>() / e.m() as f64;
    let out = run_chain(&cfg, &target, gaussian_init(5, 2), &[&f]).unwrap();
    let m2 = out.series[0].iter().sum::<f64>() / out.series[0].len() as f64;
    assert!((m2 - 1.0).abs() < 0.1, "{m2}");
}
