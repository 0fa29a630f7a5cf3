//! Exact transition matrices for two-particle chains.
//!
//! Two settings are covered: a two-state space, where every kernel is a 4×4
//! matrix, and a 101-node grid on `[0,1]`, where the pair kernels act on
//! `101²` states and are applied as structured operators instead of being
//! stored. Both are used to check that the ensemble-wise, sequential and
//! block-wise kernels leave the product target invariant while the
//! simultaneous particle-wise kernel does not.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{block_proposal, DynamicsSpec, Ensemble};
use crate::error::{Error, Result};
use crate::metropolis::{KernelMode, ScanOrder};
use crate::targets::{triangular_density, TargetModel};

/// Row-stochastic matrix over labelled states.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    n: usize,
    data: Vec<f64>,
    labels: Vec<String>,
}

impl StochasticMatrix {
    pub fn new(n: usize, data: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if data.len() != n * n || labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        if data.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "transition probabilities must be nonnegative",
            ));
        }
        for r in data.chunks(n) {
            if (r.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument("rows must sum to one"));
            }
        }
        Ok(Self { n, data, labels })
    }

    pub fn from_rows(rows: &[&[f64]], labels: Vec<String>) -> Result<Self> {
        let n = rows.len();
        Self::new(
            n,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            labels,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `ν P`
    pub fn left_apply(&self, nu: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.n];
        for (i, &a) in nu.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.row(i)) {
                *o += a * p;
            }
        }
        out
    }

    /// Number of closed communicating classes.
    pub fn closed_classes(&self) -> usize {
        let n = self.n;
        let mut reach = alloc::vec![false; n * n];
        for s in 0..n {
            let mut stack = alloc::vec![s];
            reach[s * n + s] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if self.get(i, j) > 0.0 && !reach[s * n + j] {
                        reach[s * n + j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        // i is recurrent iff everything reachable from i reaches back
        let recurrent: Vec<bool> = (0..n)
            .map(|i| (0..n).all(|j| !reach[i * n + j] || reach[j * n + i]))
            .collect();
        let mut seen = alloc::vec![false; n];
        let mut classes = 0;
        for i in 0..n {
            if recurrent[i] && !seen[i] {
                classes += 1;
                for j in 0..n {
                    if reach[i * n + j] && reach[j * n + i] {
                        seen[j] = true;
                    }
                }
            }
        }
        classes
    }
}

/// `ℓ¹` norm of `ν P - ν`.
pub fn stationarity_residual(p: &StochasticMatrix, nu: &[f64]) -> f64 {
    p.left_apply(nu)
        .iter()
        .zip(nu)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Unique invariant distribution from a dense linear solve.
pub fn invariant_measure(p: &StochasticMatrix) -> Result<Vec<f64>> {
    let classes = p.closed_classes();
    if classes != 1 {
        return Err(Error::Reducible {
            closed_classes: classes,
        });
    }
    let n = p.n();
    // (Pᵀ - I) ν = 0 with the last equation replaced by Σν = 1
    let mut a = DMatrix::from_fn(n, n, |i, j| p.get(j, i) - if i == j { 1.0 } else { 0.0 });
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut nu = lu.solve(&rhs).ok_or(Error::Reducible {
        closed_classes: classes,
    })?;
    // one step of iterative refinement
    let r = &rhs - &a * &nu;
    if let Some(c) = lu.solve(&r) {
        nu += c;
    }
    let total: f64 = nu.iter().sum();
    Ok(nu.iter().map(|v| v / total).collect())
}

fn pair_labels(names: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for a in names {
        for b in names {
            out.push(format!("({a},{b})"));
        }
    }
    out
}

/// Marginals of a distribution over lexicographically ordered pair states.
pub fn pair_marginals(nu: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut first = alloc::vec![0.0; n];
    let mut second = alloc::vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            first[i] += nu[i * n + j];
            second[j] += nu[i * n + j];
        }
    }
    (first, second)
}

pub fn product_measure(pi: &[f64]) -> Vec<f64> {
    pi.iter()
        .flat_map(|a| pi.iter().map(move |b| a * b))
        .collect()
}

/// The two-state simultaneous kernel exactly as printed in the reference example.
pub fn printed_discrete_psim() -> StochasticMatrix {
    let rows: [&[f64]; 4] = [
        &[4.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0],
        &[1.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0],
        &[1.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0],
        &[0.25, 0.25, 0.25, 0.25],
    ];
    StochasticMatrix::from_rows(&rows, pair_labels(&["x1", "x2"])).expect("valid stochastic matrix")
}

/// Proposal matrices `Q_z` of the two-state example, indexed `[z][x][y]`.
pub fn discrete_example_proposals() -> [[[f64; 2]; 2]; 2] {
    [
        [[2.0 / 3.0, 1.0 / 3.0], [2.0 / 3.0, 1.0 / 3.0]],
        [[0.5, 0.5], [0.5, 0.5]],
    ]
}

/// Intermediate quantities of the two-state construction, all indexed by the
/// parameter `z` first.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSim {
    pub alpha: [[[f64; 2]; 2]; 2],
    pub reject: [[f64; 2]; 2],
    pub kernels: [[[f64; 2]; 2]; 2],
    pub psim: StochasticMatrix,
}

/// Metropolis-Hastings kernels `P_z` for each parameter value and the
/// simultaneous product kernel `P((x1,x2),(y1,y2)) = P_{x2}(x1,y1) P_{x1}(x2,y2)`.
pub fn build_discrete_psim(q: &[[[f64; 2]; 2]; 2], pi: [f64; 2]) -> Result<DiscreteSim> {
    for qz in q {
        for row in qz {
            if (row[0] + row[1] - 1.0).abs() > 1e-12 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(
                    "proposal rows must be probability vectors",
                ));
            }
        }
    }
    let mut alpha = [[[1.0; 2]; 2]; 2];
    let mut reject = [[0.0; 2]; 2];
    let mut kernels = [[[0.0; 2]; 2]; 2];
    for z in 0..2 {
        for x in 0..2 {
            for y in 0..2 {
                if x != y && q[z][x][y] > 0.0 {
                    alpha[z][x][y] = (pi[y] * q[z][y][x] / (pi[x] * q[z][x][y])).min(1.0);
                }
            }
            for y in 0..2 {
                if y != x {
                    kernels[z][x][y] = q[z][x][y] * alpha[z][x][y];
                    reject[z][x] += q[z][x][y] * (1.0 - alpha[z][x][y]);
                }
            }
            kernels[z][x][x] = q[z][x][x] + reject[z][x];
        }
    }
    let mut data = alloc::vec![0.0; 16];
    for i1 in 0..2 {
        for i2 in 0..2 {
            for j1 in 0..2 {
                for j2 in 0..2 {
                    data[(i1 * 2 + i2) * 4 + j1 * 2 + j2] =
                        kernels[i2][i1][j1] * kernels[i1][i2][j2];
                }
            }
        }
    }
    Ok(DiscreteSim {
        alpha,
        reject,
        kernels,
        psim: StochasticMatrix::new(4, data, pair_labels(&["x1", "x2"]))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridTarget {
    Triangular,
    Uniform,
}

/// One-particle proposal `N(μ(x, z), σ²(x, z))` where `z` is the other particle.
#[derive(Debug, Clone)]
pub enum GridProposal {
    /// `N((x+z)/2, variance)`
    MeanPair { variance: f64 },
    /// `N(x, step (γ + (1-γ)(z-x)²/2))`
    Spread { gamma: f64, step: f64 },
    /// `N(x, variance)`, no interaction.
    Independent { variance: f64 },
    /// Particle proposal of a dynamics evaluated on the ensemble `(x, z)`.
    Dynamics(DynamicsSpec),
}

#[derive(Debug, Clone)]
pub struct GridKernelSpec {
    pub nodes: usize,
    pub target: GridTarget,
    pub proposal: GridProposal,
}

impl GridKernelSpec {
    /// Triangular target with the mean-pair proposal of variance 1/4.
    pub fn triangular_example() -> Self {
        Self {
            nodes: 101,
            target: GridTarget::Triangular,
            proposal: GridProposal::MeanPair { variance: 0.25 },
        }
    }

    /// Uniform target with the spread proposal, `γ = 0.01`, `h = 1/4`.
    pub fn uniform_example() -> Self {
        Self {
            nodes: 101,
            target: GridTarget::Uniform,
            proposal: GridProposal::Spread {
                gamma: 0.01,
                step: 0.25,
            },
        }
    }
}

/// Grid discretization: nodes, cell weights, the discretized target and the
/// one-particle Metropolis kernels `K_z` for every value of the other particle.
#[derive(Debug, Clone)]
pub struct GridModel {
    n: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_pi: Vec<f64>,
    pi_bar: Vec<f64>,
    /// `ln q_z(x_i, y_j)` at `[z][i][j]`.
    log_q: Vec<f64>,
    /// `K_z[i][j]` at `[z][i][j]`.
    kernels: Vec<f64>,
}

impl GridModel {
    pub fn new(spec: &GridKernelSpec) -> Result<Self> {
        let n = spec.nodes;
        if n < 3 || n.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "grid needs an odd node count of at least 3",
            ));
        }
        let dx = 1.0 / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| i as f64 * dx).collect();
        let weights: Vec<f64> = (0..n)
            .map(|i| if i == 0 || i == n - 1 { dx / 2.0 } else { dx })
            .collect();
        let density = |x: f64| match spec.target {
            GridTarget::Triangular => triangular_density(x),
            GridTarget::Uniform => 1.0,
        };
        let log_pi: Vec<f64> = nodes.iter().map(|&x| libm::log(density(x))).collect();
        let mass: Vec<f64> = nodes
            .iter()
            .zip(&weights)
            .map(|(&x, w)| density(x) * w)
            .collect();
        let total: f64 = mass.iter().sum();
        let pi_bar: Vec<f64> = mass.iter().map(|m| m / total).collect();

        let target_model = match spec.target {
            GridTarget::Triangular => TargetModel::triangular(1),
            GridTarget::Uniform => TargetModel::uniform01(1),
        };
        let mut log_q = alloc::vec![0.0; n * n * n];
        for z in 0..n {
            for i in 0..n {
                let (mu, var) =
                    proposal_moments(&spec.proposal, &target_model, nodes[i], nodes[z])?;
                if !(var > 0.0) {
                    return Err(Error::NotPositiveDefinite { dim: 1 });
                }
                let norm = -0.5 * libm::log(2.0 * core::f64::consts::PI * var);
                let base = (z * n + i) * n;
                for j in 0..n {
                    let r = nodes[j] - mu;
                    log_q[base + j] = norm - r * r / (2.0 * var);
                }
            }
        }
        let mut kernels = alloc::vec![0.0; n * n * n];
        for z in 0..n {
            for i in 0..n {
                let base = (z * n + i) * n;
                let mut moved = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let fwd = log_q[base + j];
                    let rev = log_q[(z * n + j) * n + i];
                    let log_alpha = (log_pi[j] + rev - log_pi[i] - fwd).min(0.0);
                    let p = weights[j] * libm::exp(fwd + log_alpha);
                    kernels[base + j] = p;
                    moved += p;
                }
                if moved > 1.0 {
                    return Err(Error::InvalidArgument(
                        "grid too coarse for the proposal variance",
                    ));
                }
                kernels[base + i] = 1.0 - moved;
            }
        }
        Ok(Self {
            n,
            nodes,
            weights,
            log_pi,
            pi_bar,
            log_q,
            kernels,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Discretized one-particle target `∝ π(x_j) w_j`.
    pub fn pi_bar(&self) -> &[f64] {
        &self.pi_bar
    }

    pub fn product_target(&self) -> Vec<f64> {
        product_measure(&self.pi_bar)
    }

    /// Row `i` of the one-particle kernel with parameter `z`.
    pub fn kernel_row(&self, z: usize, i: usize) -> &[f64] {
        let base = (z * self.n + i) * self.n;
        &self.kernels[base..base + self.n]
    }

    fn log_q(&self, z: usize, i: usize, j: usize) -> f64 {
        self.log_q[(z * self.n + i) * self.n + j]
    }
}

fn proposal_moments(p: &GridProposal, target: &TargetModel, x: f64, z: f64) -> Result<(f64, f64)> {
    Ok(match p {
        GridProposal::MeanPair { variance } => (0.5 * (x + z), *variance),
        GridProposal::Spread { gamma, step } => {
            (x, step * (gamma + (1.0 - gamma) * 0.5 * (z - x) * (z - x)))
        }
        GridProposal::Independent { variance } => (x, *variance),
        GridProposal::Dynamics(spec) => {
            let e = Ensemble::new(2, 1, alloc::vec![x, z])?;
            let bp = block_proposal(spec, target, &e, &[0], &[x])?;
            let l = bp.factor.lower()[(0, 0)];
            (bp.means[0], bp.scale * l * l)
        }
    })
}

/// The pair-state kernels that can be assembled on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKernel {
    /// Both particles decide against the previous pair.
    Simultaneous,
    /// Particle `first` (0 or 1) moves, then the other one.
    Sequential { first: usize },
    /// Average of both sequential orders.
    RandomScan,
    /// Joint proposal for both particles, one decision.
    EnsembleWise,
}

/// Transition operator on the `n²` pair states `(i1, i2) ↦ i1·n + i2`.
#[derive(Debug, Clone)]
pub struct PairOperator<'a> {
    pub model: &'a GridModel,
    pub kernel: PairKernel,
}

/// The simultaneous kernel on the grid.
pub fn discretize_sim_kernel(model: &GridModel) -> PairOperator<'_> {
    PairOperator {
        model,
        kernel: PairKernel::Simultaneous,
    }
}

/// The correct Metropolized kernels for two particles. Block partitions of
/// two particles are either one block (ensemble-wise) or two singletons
/// (sequential in partition order, or random scan).
pub fn discretize_correct_kernel<'a>(
    model: &'a GridModel,
    mode: &KernelMode,
) -> Result<PairOperator<'a>> {
    let kernel = match mode {
        KernelMode::EnsembleWise => PairKernel::EnsembleWise,
        KernelMode::SequentialPW(ScanOrder::Deterministic) => PairKernel::Sequential { first: 0 },
        KernelMode::SequentialPW(ScanOrder::RandomPermutation) => PairKernel::RandomScan,
        KernelMode::BlockWise(p, order) => {
            if p.ensemble_size() != 2 {
                return Err(Error::DimensionMismatch {
                    expected: 2,
                    found: p.ensemble_size(),
                });
            }
            match (p.len(), order) {
                (1, _) => PairKernel::EnsembleWise,
                (_, ScanOrder::Deterministic) => PairKernel::Sequential {
                    first: p.blocks()[0][0],
                },
                (_, ScanOrder::RandomPermutation) => PairKernel::RandomScan,
            }
        }
        KernelMode::SimultaneousPW => PairKernel::Simultaneous,
        KernelMode::Unadjusted => {
            return Err(Error::UnsupportedMode(
                "unadjusted kernels are not assembled",
            ))
        }
    };
    Ok(PairOperator { model, kernel })
}

impl PairOperator<'_> {
    pub fn dim(&self) -> usize {
        self.model.n * self.model.n
    }

    /// Dense row `(i1, i2)`.
    pub fn row(&self, state: usize) -> Vec<f64> {
        let n = self.model.n;
        let (i1, i2) = (state / n, state % n);
        let m = self.model;
        let mut out = alloc::vec![0.0; n * n];
        match self.kernel {
            PairKernel::Simultaneous => {
                outer_into(&mut out, m.kernel_row(i2, i1), m.kernel_row(i1, i2), 1.0);
            }
            PairKernel::Sequential { first } => self.sequential_row(i1, i2, first, 1.0, &mut out),
            PairKernel::RandomScan => {
                self.sequential_row(i1, i2, 0, 0.5, &mut out);
                self.sequential_row(i1, i2, 1, 0.5, &mut out);
            }
            PairKernel::EnsembleWise => self.ensemble_row(i1, i2, &mut out),
        }
        out
    }

    fn sequential_row(&self, i1: usize, i2: usize, first: usize, scale: f64, out: &mut [f64]) {
        let n = self.model.n;
        let m = self.model;
        if first == 0 {
            // particle 1 moves to j1 given x_{i2}, then particle 2 given x_{j1}
            for (j1, &a) in m.kernel_row(i2, i1).iter().enumerate() {
                let r = m.kernel_row(j1, i2);
                for j2 in 0..n {
                    out[j1 * n + j2] += scale * a * r[j2];
                }
            }
        } else {
            for (j2, &a) in m.kernel_row(i1, i2).iter().enumerate() {
                let r = m.kernel_row(j2, i1);
                for j1 in 0..n {
                    out[j1 * n + j2] += scale * a * r[j1];
                }
            }
        }
    }

    fn ensemble_row(&self, i1: usize, i2: usize, out: &mut [f64]) {
        let n = self.model.n;
        let m = self.model;
        let lp_i = m.log_pi[i1] + m.log_pi[i2];
        let mut moved = 0.0;
        for j1 in 0..n {
            let fwd1 = m.log_q(i2, i1, j1);
            for j2 in 0..n {
                if j1 == i1 && j2 == i2 {
                    continue;
                }
                let fwd = fwd1 + m.log_q(i1, i2, j2);
                let rev = m.log_q(j2, j1, i1) + m.log_q(j1, j2, i2);
                let a_ij = lp_i + fwd;
                let a_ji = m.log_pi[j1] + m.log_pi[j2] + rev;
                let p = m.weights[j1] * m.weights[j2] * libm::exp(a_ij.min(a_ji) - lp_i);
                out[j1 * n + j2] = p;
                moved += p;
            }
        }
        out[i1 * n + i2] = 1.0 - moved;
    }

    /// `ν P`
    pub fn left_apply(&self, nu: &[f64]) -> Vec<f64> {
        let n = self.model.n;
        match self.kernel {
            PairKernel::Simultaneous => {
                let mut out = alloc::vec![0.0; n * n];
                for i1 in 0..n {
                    for i2 in 0..n {
                        let a = nu[i1 * n + i2];
                        if a == 0.0 {
                            continue;
                        }
                        let r1 = self.model.kernel_row(i2, i1);
                        let r2 = self.model.kernel_row(i1, i2);
                        outer_into(&mut out, r1, r2, a);
                    }
                }
                out
            }
            PairKernel::Sequential { first: 0 } => self.apply_second(&self.apply_first(nu)),
            PairKernel::Sequential { .. } => self.apply_first(&self.apply_second(nu)),
            PairKernel::RandomScan => {
                let a = self.apply_second(&self.apply_first(nu));
                let b = self.apply_first(&self.apply_second(nu));
                a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
            }
            PairKernel::EnsembleWise => {
                let mut out = alloc::vec![0.0; n * n];
                for (s, &a) in nu.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let row = self.row(s);
                    for (o, p) in out.iter_mut().zip(&row) {
                        *o += a * p;
                    }
                }
                out
            }
        }
    }

    /// Move particle 1 with particle 2 as parameter.
    fn apply_first(&self, nu: &[f64]) -> Vec<f64> {
        let n = self.model.n;
        let mut out = alloc::vec![0.0; n * n];
        let mut col = alloc::vec![0.0; n];
        for i2 in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            for i1 in 0..n {
                let a = nu[i1 * n + i2];
                for (c, k) in col.iter_mut().zip(self.model.kernel_row(i2, i1)) {
                    *c += a * k;
                }
            }
            for j1 in 0..n {
                out[j1 * n + i2] = col[j1];
            }
        }
        out
    }

    /// Move particle 2 with particle 1 as parameter.
    fn apply_second(&self, nu: &[f64]) -> Vec<f64> {
        let n = self.model.n;
        let mut out = alloc::vec![0.0; n * n];
        for i1 in 0..n {
            let dst = &mut out[i1 * n..(i1 + 1) * n];
            for i2 in 0..n {
                let a = nu[i1 * n + i2];
                for (o, k) in dst.iter_mut().zip(self.model.kernel_row(i1, i2)) {
                    *o += a * k;
                }
            }
        }
        out
    }

    /// `‖π̄ P - π̄‖₁` for the discretized product target.
    pub fn invariance_defect(&self) -> f64 {
        let pi = self.model.product_target();
        l1_distance(&self.left_apply(&pi), &pi)
    }

    /// Off-diagonal entry `P((i1,i2), (j1,j2))`, `s ≠ t`.
    pub fn off_diagonal(&self, s: usize, t: usize) -> f64 {
        let n = self.model.n;
        let m = self.model;
        let (i1, i2, j1, j2) = (s / n, s % n, t / n, t % n);
        let k = |z: usize, i: usize, j: usize| m.kernel_row(z, i)[j];
        match self.kernel {
            PairKernel::Simultaneous => k(i2, i1, j1) * k(i1, i2, j2),
            PairKernel::Sequential { first: 0 } => k(i2, i1, j1) * k(j1, i2, j2),
            PairKernel::Sequential { .. } => k(i1, i2, j2) * k(j2, i1, j1),
            PairKernel::RandomScan => {
                0.5 * (k(i2, i1, j1) * k(j1, i2, j2) + k(i1, i2, j2) * k(j2, i1, j1))
            }
            PairKernel::EnsembleWise => {
                let lp_i = m.log_pi[i1] + m.log_pi[i2];
                let a_ij = lp_i + m.log_q(i2, i1, j1) + m.log_q(i1, i2, j2);
                let a_ji = m.log_pi[j1] + m.log_pi[j2] + m.log_q(j2, j1, i1) + m.log_q(j1, j2, i2);
                m.weights[j1] * m.weights[j2] * libm::exp(a_ij.min(a_ji) - lp_i)
            }
        }
    }

    /// Largest `|π̄_s P(s,t) - π̄_t P(t,s)|` over pairs of distinct states.
    pub fn detailed_balance_defect(&self) -> f64 {
        let pi = self.model.product_target();
        let dim = self.dim();
        let mut worst = 0.0f64;
        for s in 0..dim {
            for t in (s + 1)..dim {
                let d = (pi[s] * self.off_diagonal(s, t) - pi[t] * self.off_diagonal(t, s)).abs();
                worst = worst.max(d);
            }
        }
        worst
    }
}

fn outer_into(out: &mut [f64], first: &[f64], second: &[f64], scale: f64) {
    let n = second.len();
    for (j1, &a) in first.iter().enumerate() {
        let b = scale * a;
        if b == 0.0 {
            continue;
        }
        for (o, k) in out[j1 * n..(j1 + 1) * n].iter_mut().zip(second) {
            *o += b * k;
        }
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Largest relative deviation `max_j |ν_j - π_j| / π_j` over `π_j > 0`.
pub fn max_relative_deviation(nu: &[f64], pi: &[f64]) -> f64 {
    nu.iter()
        .zip(pi)
        .filter(|(_, &p)| p > 0.0)
        .map(|(v, p)| (v - p).abs() / p)
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Invariant distribution of a pair operator: restarted GMRES on
/// `(I - Pᵀ + u 1ᵀ) ν = u`, `u` uniform, which is nonsingular for an
/// irreducible kernel and whose solution sums to one.
pub fn operator_invariant_measure(
    op: &PairOperator<'_>,
    tol: f64,
    max_restarts: usize,
) -> Result<Vec<f64>> {
    let dim = op.dim();
    let u = alloc::vec![1.0 / dim as f64; dim];
    let apply = |v: &[f64]| -> Vec<f64> {
        let pv = op.left_apply(v);
        let s: f64 = v.iter().sum();
        v.iter()
            .zip(&pv)
            .zip(&u)
            .map(|((a, b), c)| a - b + c * s)
            .collect()
    };
    let mut x = op.model.product_target();
    let restart = 80;
    let mut residual = f64::INFINITY;
    for _ in 0..max_restarts {
        let ax = apply(&x);
        let r: Vec<f64> = u.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let beta = libm::sqrt(dot(&r, &r));
        residual = stationarity_l1(op, &x);
        if residual < tol {
            break;
        }
        let mut basis: Vec<Vec<f64>> = alloc::vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<(f64, f64)> = Vec::new();
        let mut g = alloc::vec![beta];
        for k in 0..restart {
            let mut w = apply(&basis[k]);
            let mut col = alloc::vec![0.0; k + 2];
            for (i, b) in basis.iter().enumerate() {
                let hij = dot(&w, b);
                col[i] = hij;
                w.iter_mut().zip(b).for_each(|(a, bb)| *a -= hij * bb);
            }
            let norm = libm::sqrt(dot(&w, &w));
            col[k + 1] = norm;
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, b) = (col[i], col[i + 1]);
                col[i] = c * a + s * b;
                col[i + 1] = -s * a + c * b;
            }
            let (a, b) = (col[k], col[k + 1]);
            let rho = libm::hypot(a, b);
            let (c, s) = if rho == 0.0 {
                (1.0, 0.0)
            } else {
                (a / rho, b / rho)
            };
            col[k] = rho;
            col[k + 1] = 0.0;
            cs.push((c, s));
            g.push(-s * g[k]);
            g[k] *= c;
            hess.push(col);
            if norm == 0.0 || g[k + 1].abs() < 1e-17 * beta.max(1e-300) {
                break;
            }
            basis.push(w.iter().map(|v| v / norm).collect());
        }
        // back substitution on the triangular system
        let kk = hess.len();
        let mut y = alloc::vec![0.0; kk];
        for i in (0..kk).rev() {
            let mut acc = g[i];
            for j in (i + 1)..kk {
                acc -= hess[j][i] * y[j];
            }
            y[i] = acc / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&basis[j]).for_each(|(a, b)| *a += yj * b);
        }
        let total: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v /= total);
    }
    if !(residual < tol) {
        residual = stationarity_l1(op, &x);
    }
    if residual < tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence { residual })
    }
}

fn stationarity_l1(op: &PairOperator<'_>, nu: &[f64]) -> f64 {
    l1_distance(&op.left_apply(nu), nu)
}

/// Invariant measure of the simultaneous kernel compared with the product target.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub n: usize,
    pub invariant: Vec<f64>,
    pub product: Vec<f64>,
    pub residual_l1: f64,
    pub joint_l1: f64,
    pub joint_rel_max: f64,
    pub marginals: [Vec<f64>; 2],
    pub marginal_rel_max: [f64; 2],
    /// Largest deviation of the one-step marginals from `π̄`, starting at `π̄ ⊗ π̄`.
    pub one_step_marginal_error: f64,
}

pub fn sim_bias_report(model: &GridModel) -> Result<BiasReport> {
    let op = discretize_sim_kernel(model);
    let nu = operator_invariant_measure(&op, 1e-12, 40)?;
    let product = model.product_target();
    let (m1, m2) = pair_marginals(&nu, model.n);
    let pi = model.pi_bar();
    let (s1, s2) = one_step_marginals(&op);
    let one_step = l1_distance(&s1, pi).max(l1_distance(&s2, pi));
    Ok(BiasReport {
        n: model.n,
        residual_l1: stationarity_l1(&op, &nu),
        joint_l1: l1_distance(&nu, &product),
        joint_rel_max: max_relative_deviation(&nu, &product),
        marginal_rel_max: [
            max_relative_deviation(&m1, pi),
            max_relative_deviation(&m2, pi),
        ],
        marginals: [m1, m2],
        one_step_marginal_error: one_step,
        invariant: nu,
        product,
    })
}

/// Marginals of `(π̄ ⊗ π̄) P` on the grid.
pub fn one_step_marginals(op: &PairOperator<'_>) -> (Vec<f64>, Vec<f64>) {
    let next = op.left_apply(&op.model.product_target());
    pair_marginals(&next, op.model.n)
}

/// Marginals of `(π ⊗ π) P` for a 4×4 two-state kernel.
pub fn discrete_one_step_marginals(p: &StochasticMatrix, pi: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
    pair_marginals(&p.left_apply(&product_measure(&pi)), 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_matrix_reproduces_reference_fractions() {
        let p = printed_discrete_psim();
        let nu = invariant_measure(&p).unwrap();
        let expected = [45.0, 49.0, 35.0, 44.0].map(|v| v / 173.0);
        for (a, b) in nu.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(stationarity_residual(&p, &nu) < 1e-12);
        let (m1, m2) = pair_marginals(&nu, 2);
        assert!((m1[0] - 94.0 / 173.0).abs() < 1e-12 && (m1[1] - 79.0 / 173.0).abs() < 1e-12);
        assert!((m2[0] - 80.0 / 173.0).abs() < 1e-12 && (m2[1] - 93.0 / 173.0).abs() < 1e-12);
    }

    #[test]
    fn first_principles_construction() {
        let sim = build_discrete_psim(&discrete_example_proposals(), [0.5, 0.5]).unwrap();
        // the x1-parameter kernel is π-reversible: [[2/3, 1/3], [1/3, 2/3]]
        let k = sim.kernels[0];
        assert!((k[1][0] - 1.0 / 3.0).abs() < 1e-15 && (k[1][1] - 2.0 / 3.0).abs() < 1e-15);
        for z in 0..2 {
            assert!((0.5 * sim.kernels[z][0][1] - 0.5 * sim.kernels[z][1][0]).abs() < 1e-14);
        }
        let row0: Vec<f64> = sim.psim.row(0).to_vec();
        let want = [4.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0, 1.0 / 9.0];
        for (a, b) in row0.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let nu = invariant_measure(&sim.psim).unwrap();
        assert!((nu[1] - nu[2]).abs() < 1e-14);
        assert!((nu[0] - 45.0 / 173.0).abs() < 1e-12);
        assert!((nu[3] - 44.0 / 173.0).abs() < 1e-12);
        assert!((nu[1] - 42.0 / 173.0).abs() < 1e-12);
        let (a, b) = discrete_one_step_marginals(&sim.psim, [0.5, 0.5]);
        for v in a.iter().chain(&b) {
            assert!((v - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn doubly_stochastic_has_uniform_invariant_measure() {
        let rows: [&[f64]; 3] = [&[0.2, 0.3, 0.5], &[0.5, 0.2, 0.3], &[0.3, 0.5, 0.2]];
        let p =
            StochasticMatrix::from_rows(&rows, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        for v in invariant_measure(&p).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn reducible_chains_are_rejected() {
        let rows: [&[f64]; 3] = [&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.5, 0.0, 0.5]];
        let p =
            StochasticMatrix::from_rows(&rows, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(
            invariant_measure(&p),
            Err(Error::Reducible { closed_classes: 2 })
        );
    }

    fn small(target: GridTarget, proposal: GridProposal) -> GridModel {
        GridModel::new(&GridKernelSpec {
            nodes: 21,
            target,
            proposal,
        })
        .unwrap()
    }

    #[test]
    fn structured_apply_matches_dense_rows() {
        let model = small(
            GridTarget::Triangular,
            GridProposal::MeanPair { variance: 0.25 },
        );
        let nu: Vec<f64> = (0..441).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        for kernel in [
            PairKernel::Simultaneous,
            PairKernel::Sequential { first: 0 },
            PairKernel::Sequential { first: 1 },
            PairKernel::RandomScan,
        ] {
            let op = PairOperator {
                model: &model,
                kernel,
            };
            let fast = op.left_apply(&nu);
            let mut slow = vec![0.0; 441];
            for (s, &a) in nu.iter().enumerate() {
                let row = op.row(s);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (o, p) in slow.iter_mut().zip(&row) {
                    *o += a * p;
                }
            }
            assert!(l1_distance(&fast, &slow) < 1e-11, "{kernel:?}");
        }
    }

    #[test]
    fn correct_kernels_are_invariant_on_a_small_grid() {
        let model = small(
            GridTarget::Uniform,
            GridProposal::Spread {
                gamma: 0.01,
                step: 0.25,
            },
        );
        for kernel in [
            PairKernel::Sequential { first: 0 },
            PairKernel::Sequential { first: 1 },
            PairKernel::RandomScan,
            PairKernel::EnsembleWise,
        ] {
            let op = PairOperator {
                model: &model,
                kernel,
            };
            assert!(op.invariance_defect() < 1e-12, "{kernel:?}");
        }
        let ew = PairOperator {
            model: &model,
            kernel: PairKernel::EnsembleWise,
        };
        assert!(ew.detailed_balance_defect() < 1e-14);
        for s in [0, 17, 230] {
            let row = ew.row(s);
            for t in [1, 40, 440] {
                if t != s {
                    assert!((row[t] - ew.off_diagonal(s, t)).abs() < 1e-16);
                }
            }
        }
        let sim = discretize_sim_kernel(&model);
        assert!(sim.invariance_defect() > 1e-4);
    }

    #[test]
    fn independent_proposals_are_unbiased() {
        let model = small(
            GridTarget::Triangular,
            GridProposal::Independent { variance: 0.05 },
        );
        let report = sim_bias_report(&model).unwrap();
        assert!(report.joint_l1 < 1e-10);
        assert!(report.residual_l1 < 1e-12);
    }
}
