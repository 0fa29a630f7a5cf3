//! Two-particle kernels on a quadrature grid plus the two-state example:
//! invariance of the correct kernels and the bias of the simultaneous one.

use mais_core::bias_lab::{
    build_discrete_psim, discrete_example_proposals, discrete_one_step_marginals,
    discretize_correct_kernel, invariant_measure, pair_marginals, printed_discrete_psim,
    sim_bias_report, stationarity_residual, BiasReport, GridKernelSpec, GridModel,
};
use mais_core::metropolis::{BlockPartition, KernelMode, ScanOrder};

use super::bundle;
use crate::config::ExperimentConfig;
use crate::error::AppResult;
use crate::manifest::Manifest;
use crate::output::Table;

/// Target of the two-state example.
pub const DISCRETE_PI: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone)]
pub struct GridExample {
    pub name: &'static str,
    pub model: GridModel,
    /// `(kernel, ‖π̄P - π̄‖₁)` for every correct kernel and the simultaneous one.
    pub invariance: Vec<(&'static str, f64)>,
    pub report: BiasReport,
}

#[derive(Debug, Clone)]
pub struct DiscreteExample {
    pub construction: &'static str,
    pub invariant: Vec<f64>,
    pub residual: f64,
    pub marginals: (Vec<f64>, Vec<f64>),
    pub one_step: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct BiasLabResult {
    pub config: ExperimentConfig,
    pub grids: Vec<GridExample>,
    pub discrete: Vec<DiscreteExample>,
}

/// The kernels checked for invariance, in output order.
pub fn kernel_modes() -> Vec<(&'static str, KernelMode)> {
    vec![
        ("ensemble-wise", KernelMode::EnsembleWise),
        (
            "sequential",
            KernelMode::SequentialPW(ScanOrder::Deterministic),
        ),
        (
            "block-wise",
            KernelMode::BlockWise(
                BlockPartition::new(vec![vec![1], vec![0]], 2).expect("valid partition"),
                ScanOrder::Deterministic,
            ),
        ),
        (
            "random-scan",
            KernelMode::SequentialPW(ScanOrder::RandomPermutation),
        ),
        ("simultaneous", KernelMode::SimultaneousPW),
    ]
}

pub fn grid_example(name: &'static str, spec: &GridKernelSpec) -> AppResult<GridExample> {
    let model = GridModel::new(spec)?;
    let mut invariance = Vec::new();
    for (label, mode) in kernel_modes() {
        invariance.push((
            label,
            discretize_correct_kernel(&model, &mode)?.invariance_defect(),
        ));
    }
    let report = sim_bias_report(&model)?;
    Ok(GridExample {
        name,
        model,
        invariance,
        report,
    })
}

pub fn discrete_examples() -> AppResult<Vec<DiscreteExample>> {
    let printed = printed_discrete_psim();
    let derived = build_discrete_psim(&discrete_example_proposals(), DISCRETE_PI)?.psim;
    let mut out = Vec::new();
    for (construction, p) in [("printed", printed), ("first-principles", derived)] {
        let nu = invariant_measure(&p)?;
        out.push(DiscreteExample {
            construction,
            residual: stationarity_residual(&p, &nu),
            marginals: pair_marginals(&nu, 2),
            one_step: discrete_one_step_marginals(&p, DISCRETE_PI),
            invariant: nu,
        });
    }
    Ok(out)
}

pub fn run(cfg: &ExperimentConfig) -> AppResult<BiasLabResult> {
    let nodes = cfg.problem.bias.nodes;
    let tri = GridKernelSpec {
        nodes,
        ..GridKernelSpec::triangular_example()
    };
    let uni = GridKernelSpec {
        nodes,
        ..GridKernelSpec::uniform_example()
    };
    Ok(BiasLabResult {
        config: cfg.clone(),
        grids: vec![
            grid_example("triangular", &tri)?,
            grid_example("uniform", &uni)?,
        ],
        discrete: discrete_examples()?,
    })
}

impl BiasLabResult {
    pub fn grid(&self, name: &str) -> Option<&GridExample> {
        self.grids.iter().find(|g| g.name == name)
    }

    pub fn discrete(&self, construction: &str) -> Option<&DiscreteExample> {
        self.discrete
            .iter()
            .find(|d| d.construction == construction)
    }

    fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut inv = Table::new(&["example", "kernel", "l1_defect"]);
        let mut summary = Table::new(&[
            "example",
            "nodes",
            "residual_l1",
            "joint_l1",
            "joint_rel_max",
            "marginal_rel_max_1",
            "marginal_rel_max_2",
            "one_step_marginal_error",
        ]);
        let mut grid = Table::new(&[
            "example",
            "x1",
            "x2",
            "invariant",
            "product",
            "relative_error",
        ]);
        let mut marg = Table::new(&[
            "example",
            "x",
            "marginal_1",
            "marginal_2",
            "target",
            "rel_error_1",
            "rel_error_2",
        ]);
        for g in &self.grids {
            for (k, v) in &g.invariance {
                inv.push(vec![g.name.into(), (*k).into(), (*v).into()]);
            }
            let r = &g.report;
            summary.push(vec![
                g.name.into(),
                r.n.into(),
                r.residual_l1.into(),
                r.joint_l1.into(),
                r.joint_rel_max.into(),
                r.marginal_rel_max[0].into(),
                r.marginal_rel_max[1].into(),
                r.one_step_marginal_error.into(),
            ]);
            let x = g.model.nodes();
            let n = r.n;
            for s in 0..n * n {
                let (nu, p) = (r.invariant[s], r.product[s]);
                let rel = if p > 0.0 { (nu - p) / p } else { f64::NAN };
                grid.push(vec![
                    g.name.into(),
                    x[s / n].into(),
                    x[s % n].into(),
                    nu.into(),
                    p.into(),
                    rel.into(),
                ]);
            }
            let pi = g.model.pi_bar();
            for j in 0..n {
                let rel = |m: f64| {
                    if pi[j] > 0.0 {
                        (m - pi[j]) / pi[j]
                    } else {
                        f64::NAN
                    }
                };
                let (m1, m2) = (r.marginals[0][j], r.marginals[1][j]);
                marg.push(vec![
                    g.name.into(),
                    x[j].into(),
                    m1.into(),
                    m2.into(),
                    pi[j].into(),
                    rel(m1).into(),
                    rel(m2).into(),
                ]);
            }
        }
        let mut disc = Table::new(&[
            "construction",
            "quantity",
            "index",
            "value",
            "value_times_173",
        ]);
        let states = ["x1x1", "x1x2", "x2x1", "x2x2"];
        for d in &self.discrete {
            let mut push = |q: &str, idx: String, v: f64| {
                disc.push(vec![
                    d.construction.into(),
                    q.to_string().into(),
                    idx.into(),
                    v.into(),
                    (v * 173.0).into(),
                ])
            };
            for (s, v) in states.iter().zip(&d.invariant) {
                push("invariant", s.to_string(), *v);
            }
            for (p, m) in [("1", &d.marginals.0), ("2", &d.marginals.1)] {
                for (i, v) in m.iter().enumerate() {
                    push(&format!("marginal_{p}"), format!("x{}", i + 1), *v);
                }
            }
            for (p, m) in [("1", &d.one_step.0), ("2", &d.one_step.1)] {
                for (i, v) in m.iter().enumerate() {
                    push(&format!("one_step_marginal_{p}"), format!("x{}", i + 1), *v);
                }
            }
            push("stationarity_residual", "-".into(), d.residual);
        }
        vec![
            ("invariance.csv", inv),
            ("bias_summary.csv", summary),
            ("bias_grid.csv", grid),
            ("bias_marginals.csv", marg),
            ("discrete.csv", disc),
        ]
    }

    pub fn files(&self) -> AppResult<Vec<(String, Vec<u8>)>> {
        bundle(
            Manifest::new(self.config.clone()),
            self.tables(),
            Vec::new(),
        )
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for g in &self.grids {
            let defects: Vec<String> = g
                .invariance
                .iter()
                .map(|(k, v)| format!("{k}={v:.2e}"))
                .collect();
            lines.push(format!(
                "{:<10} invariance defects: {}",
                g.name,
                defects.join(" ")
            ));
            lines.push(format!(
                "{:<10} simultaneous: joint rel max {:.3e}, marginal rel max {:.3e}, residual {:.1e}",
                g.name,
                g.report.joint_rel_max,
                g.report.marginal_rel_max[0].max(g.report.marginal_rel_max[1]),
                g.report.residual_l1
            ));
        }
        for d in &self.discrete {
            let scaled: Vec<String> = d
                .invariant
                .iter()
                .map(|v| format!("{:.4}", v * 173.0))
                .collect();
            lines.push(format!(
                "discrete {:<16} invariant ×173 = ({})",
                d.construction,
                scaled.join(", ")
            ));
        }
        lines
    }
}
