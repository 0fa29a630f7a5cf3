//! Metropolization of particle proposals and the chain driver.
//!
//! Accept/reject can act on the whole ensemble, on one particle at a time
//! (sequentially, so later particles see earlier moves), or on fixed blocks.
//! The simultaneous particle-wise variant, where every particle is tested
//! against the unchanged previous ensemble, is provided for comparison only;
//! it does not leave the product target invariant.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dynamics::{
    block_proposal_cached, ensemble_proposal, proposal_logpdf, DynamicsKind, DynamicsSpec,
    Ensemble, MomentCache, Proposal,
};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::targets::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    #[default]
    Deterministic,
    /// A fresh uniformly random block order every iteration.
    RandomPermutation,
}

/// Disjoint blocks covering the particle indices `0..M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<Vec<usize>>,
    m: usize,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Vec<usize>>, m: usize) -> Result<Self> {
        let mut seen = alloc::vec![false; m];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidArgument("blocks must be nonempty"));
            }
            for &i in b {
                if i >= m || seen[i] {
                    return Err(Error::InvalidArgument(
                        "blocks must be a disjoint cover of 0..M",
                    ));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(
                "blocks must be a disjoint cover of 0..M",
            ));
        }
        Ok(Self { blocks, m })
    }

    /// Consecutive blocks of size `b`; `b` must divide `m`.
    pub fn uniform(m: usize, b: usize) -> Result<Self> {
        if b == 0 || !m.is_multiple_of(b) {
            return Err(Error::InvalidArgument(
                "block size must divide the ensemble size",
            ));
        }
        Self::new(
            (0..m / b).map(|k| (k * b..(k + 1) * b).collect()).collect(),
            m,
        )
    }

    pub fn singletons(m: usize) -> Self {
        Self {
            blocks: (0..m).map(|i| alloc::vec![i]).collect(),
            m,
        }
    }

    pub fn single(m: usize) -> Self {
        Self {
            blocks: alloc::vec![(0..m).collect()],
            m,
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ensemble_size(&self) -> usize {
        self.m
    }

    /// Common block size, if all blocks have the same size.
    pub fn block_size(&self) -> Option<usize> {
        let b = self.blocks.first()?.len();
        self.blocks.iter().all(|x| x.len() == b).then_some(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelMode {
    EnsembleWise,
    SequentialPW(ScanOrder),
    BlockWise(BlockPartition, ScanOrder),
    /// Biased; every particle decides against the previous ensemble.
    SimultaneousPW,
    Unadjusted,
}

impl KernelMode {
    pub fn short_name(&self) -> &'static str {
        match self {
            KernelMode::EnsembleWise => "ew",
            KernelMode::SequentialPW(_) => "pw",
            KernelMode::BlockWise(..) => "bw",
            KernelMode::SimultaneousPW => "sim",
            KernelMode::Unadjusted => "ula",
        }
    }

    /// Number of particles updated in parallel within one decision.
    pub fn parallel_width(&self, m: usize) -> usize {
        match self {
            KernelMode::SequentialPW(_) => 1,
            KernelMode::BlockWise(p, _) => p.block_size().unwrap_or(1),
            _ => m,
        }
    }
}

/// `ln α = min(0, ln π(y) + ln q(y,x) - ln π(x) - ln q(x,y))`, and `0` when `π(x) = 0`.
pub fn log_accept(
    curr_log_target: f64,
    prop_log_target: f64,
    log_q_fwd: f64,
    log_q_rev: f64,
) -> f64 {
    if curr_log_target == f64::NEG_INFINITY {
        return 0.0;
    }
    let r = prop_log_target + log_q_rev - curr_log_target - log_q_fwd;
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

/// Chain state: the ensemble and the per-particle log-target values.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub ensemble: Ensemble,
    pub log_target: Vec<f64>,
}

impl ChainState {
    pub fn new(target: &dyn Target, ensemble: Ensemble) -> Result<Self> {
        if ensemble.d() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                found: ensemble.d(),
            });
        }
        if !ensemble.is_finite() {
            return Err(Error::InvalidArgument("initial ensemble must be finite"));
        }
        let log_target = (0..ensemble.m())
            .map(|i| target.log_density(ensemble.particle(i)))
            .collect();
        Ok(Self {
            ensemble,
            log_target,
        })
    }
}

/// Outcome of one kernel application.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepStats {
    /// One flag per accept/reject decision, in block order (not scan order).
    pub flags: Vec<bool>,
}

impl StepStats {
    pub fn accepted(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

fn accept_draw(key: StreamKey, block: u64) -> f64 {
    let u: f64 = key
        .purpose(Purpose::Acceptance)
        .block(block)
        .particle(0)
        .rng()
        .random();
    libm::log(u)
}

fn needs_moments(spec: &DynamicsSpec) -> bool {
    matches!(
        spec.kind,
        DynamicsKind::Aldi { .. } | DynamicsKind::EksDf { .. }
    )
}

/// Metropolized update of one block against the working ensemble. Returns
/// the decision and, when accepted, applies the move.
fn update_block(
    spec: &DynamicsSpec,
    target: &dyn Target,
    state: &mut ChainState,
    cache: &mut Option<MomentCache>,
    block: &[usize],
    block_id: u64,
    key: StreamKey,
) -> Result<bool> {
    let e = &state.ensemble;
    let d = e.d();
    let current = e.gather(block);
    let fwd = block_proposal_cached(spec, target, e, block, &current, cache.as_ref())?;
    let proposed = fwd.sample(key.purpose(Purpose::ProposalNoise).block(block_id));
    let prop_lt: Vec<f64> = proposed.chunks(d).map(|y| target.log_density(y)).collect();
    let curr: f64 = block.iter().map(|&i| state.log_target[i]).sum();
    let prop: f64 = prop_lt.iter().sum();
    let log_alpha = if prop == f64::NEG_INFINITY && curr > f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        let rev = block_proposal_cached(spec, target, e, block, &proposed, cache.as_ref())?;
        log_accept(curr, prop, fwd.logpdf(&proposed), rev.logpdf(&current))
    };
    let accepted = accept_draw(key, block_id) <= log_alpha;
    if accepted {
        for (k, &i) in block.iter().enumerate() {
            let y = &proposed[k * d..(k + 1) * d];
            if let Some(c) = cache.as_mut() {
                c.replace(state.ensemble.particle(i), y);
            }
            state.ensemble.set_particle(i, y);
            state.log_target[i] = prop_lt[k];
        }
    }
    Ok(accepted)
}

fn scan(blocks: usize, order: ScanOrder, key: StreamKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..blocks).collect();
    if order == ScanOrder::RandomPermutation {
        idx.shuffle(&mut key.purpose(Purpose::ScanOrder).rng());
    }
    idx
}

/// One application of the transition kernel. `key` carries seed, replica
/// and iteration; block, particle and purpose are filled in here.
pub fn kernel_step(
    mode: &KernelMode,
    spec: &DynamicsSpec,
    target: &dyn Target,
    state: &mut ChainState,
    key: StreamKey,
) -> Result<StepStats> {
    let m = state.ensemble.m();
    let particle_wise = spec.kind.is_particle_wise();
    let blocks_for = |partition: &BlockPartition| -> Result<()> {
        if partition.ensemble_size() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: partition.ensemble_size(),
            });
        }
        Ok(())
    };
    match mode {
        KernelMode::EnsembleWise if particle_wise => {
            let all: Vec<usize> = (0..m).collect();
            let mut cache = needs_moments(spec).then(|| MomentCache::new(&state.ensemble));
            let ok = update_block(spec, target, state, &mut cache, &all, 0, key)?;
            Ok(StepStats {
                flags: alloc::vec![ok],
            })
        }
        KernelMode::EnsembleWise => {
            let ok = ensemble_update(spec, target, state, key)?;
            Ok(StepStats {
                flags: alloc::vec![ok],
            })
        }
        KernelMode::SequentialPW(order) | KernelMode::BlockWise(_, order) => {
            if !particle_wise {
                return Err(Error::UnsupportedMode(
                    "kernel-coupled proposals only support ensemble-wise or unadjusted updates",
                ));
            }
            let singletons;
            let partition = match mode {
                KernelMode::BlockWise(p, _) => {
                    blocks_for(p)?;
                    p
                }
                _ => {
                    singletons = BlockPartition::singletons(m);
                    &singletons
                }
            };
            let mut cache = needs_moments(spec).then(|| MomentCache::new(&state.ensemble));
            let mut flags = alloc::vec![false; partition.len()];
            for b in scan(partition.len(), *order, key) {
                flags[b] = update_block(
                    spec,
                    target,
                    state,
                    &mut cache,
                    &partition.blocks()[b],
                    b as u64,
                    key,
                )?;
            }
            Ok(StepStats { flags })
        }
        KernelMode::SimultaneousPW => {
            if !particle_wise {
                return Err(Error::UnsupportedMode(
                    "kernel-coupled proposals only support ensemble-wise or unadjusted updates",
                ));
            }
            let frozen = state.clone();
            let mut cache = needs_moments(spec).then(|| MomentCache::new(&frozen.ensemble));
            let mut flags = alloc::vec![false; m];
            for (i, flag) in flags.iter_mut().enumerate() {
                let mut local = frozen.clone();
                if update_block(
                    spec,
                    target,
                    &mut local,
                    &mut cache.clone(),
                    &[i],
                    i as u64,
                    key,
                )? {
                    *flag = true;
                    state.ensemble.set_particle(i, local.ensemble.particle(i));
                    state.log_target[i] = local.log_target[i];
                }
            }
            let _ = cache.take();
            Ok(StepStats { flags })
        }
        KernelMode::Unadjusted => {
            let p = ensemble_proposal(spec, target, &state.ensemble)?;
            let y = sample_proposal(&p, key.purpose(Purpose::ProposalNoise).block(0));
            let d = state.ensemble.d();
            state.ensemble = Ensemble::new(m, d, y)?;
            for i in 0..m {
                state.log_target[i] = target.log_density(state.ensemble.particle(i));
            }
            Ok(StepStats {
                flags: alloc::vec![true],
            })
        }
    }
}

fn sample_proposal(p: &Proposal, key: StreamKey) -> Vec<f64> {
    match p {
        Proposal::Block(b) => b.sample(key),
        Proposal::Coupled(c) => c.sample(key),
    }
}

fn ensemble_update(
    spec: &DynamicsSpec,
    target: &dyn Target,
    state: &mut ChainState,
    key: StreamKey,
) -> Result<bool> {
    let (m, d) = (state.ensemble.m(), state.ensemble.d());
    let fwd = ensemble_proposal(spec, target, &state.ensemble)?;
    let y = Ensemble::new(
        m,
        d,
        sample_proposal(&fwd, key.purpose(Purpose::ProposalNoise).block(0)),
    )?;
    let prop_lt: Vec<f64> = (0..m).map(|i| target.log_density(y.particle(i))).collect();
    let curr: f64 = state.log_target.iter().sum();
    let prop: f64 = prop_lt.iter().sum();
    let log_alpha = if prop == f64::NEG_INFINITY && curr > f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        let rev = ensemble_proposal(spec, target, &y)?;
        log_accept(
            curr,
            prop,
            proposal_logpdf(&fwd, y.as_slice()),
            proposal_logpdf(&rev, state.ensemble.as_slice()),
        )
    };
    let accepted = accept_draw(key, 0) <= log_alpha;
    if accepted {
        state.ensemble = y;
        state.log_target = prop_lt;
    }
    Ok(accepted)
}

/// `ln q(x, y) + ln α(x, y)` for the ensemble-wise kernel: the log-density of
/// an accepted move from `x` to `y`.
pub fn ensemble_move_log_density(
    spec: &DynamicsSpec,
    target: &dyn Target,
    x: &Ensemble,
    y: &Ensemble,
) -> Result<f64> {
    let fwd = ensemble_proposal(spec, target, x)?;
    let rev = ensemble_proposal(spec, target, y)?;
    let lx: f64 = (0..x.m()).map(|i| target.log_density(x.particle(i))).sum();
    let ly: f64 = (0..y.m()).map(|i| target.log_density(y.particle(i))).sum();
    let q_fwd = proposal_logpdf(&fwd, y.as_slice());
    let q_rev = proposal_logpdf(&rev, x.as_slice());
    Ok(q_fwd + log_accept(lx, ly, q_fwd, q_rev))
}

/// Burn-in step-size adaptation: after each epoch of `epoch_len` iterations,
/// `ln h += c0/√t · (rate - target_rate)`, clamped to `[H_MIN, H_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    pub target_rate: f64,
    pub epoch_len: usize,
    pub gain: f64,
}

pub const H_MIN: f64 = 1e-10;
pub const H_MAX: f64 = 1e3;

impl TuneConfig {
    pub fn new(target_rate: f64, epoch_len: usize) -> Result<Self> {
        if !(target_rate > 0.05 && target_rate < 0.95) {
            return Err(Error::InvalidArgument(
                "target acceptance rate must lie in (0.05, 0.95)",
            ));
        }
        if epoch_len == 0 {
            return Err(Error::InvalidArgument(
                "tuning epochs need at least one iteration",
            ));
        }
        Ok(Self {
            target_rate,
            epoch_len,
            gain: 3.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneEpoch {
    /// Step size used during the epoch.
    pub step: f64,
    pub rate: f64,
    /// Whether the update after this epoch hit a clamp.
    pub saturated: bool,
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub mode: KernelMode,
    pub spec: DynamicsSpec,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub replica: u64,
    pub tune: Option<TuneConfig>,
    /// Keep a copy of the ensemble every `k` sampling iterations.
    pub snapshot_every: Option<usize>,
}

impl ChainConfig {
    pub fn new(
        mode: KernelMode,
        spec: DynamicsSpec,
        iterations: usize,
        burn_in: usize,
        seed: u64,
    ) -> Self {
        Self {
            mode,
            spec,
            iterations,
            burn_in,
            seed,
            replica: 0,
            tune: None,
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AcceptCounts {
    pub decisions: u64,
    pub accepted: u64,
}

impl AcceptCounts {
    pub fn rate(&self) -> f64 {
        if self.decisions == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.decisions as f64
        }
    }

    fn add(&mut self, stats: &StepStats) {
        self.decisions += stats.flags.len() as u64;
        self.accepted += stats.accepted() as u64;
    }
}

/// A scalar statistic of the ensemble recorded at every sampling iteration.
pub type Recorder<'a> = &'a (dyn Fn(&Ensemble) -> f64 + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// One series per recorder, each of length `iterations`.
    pub series: Vec<Vec<f64>>,
    pub burn_in_accept: AcceptCounts,
    pub sample_accept: AcceptCounts,
    /// Accepted decisions per block over the sampling phase.
    pub accepted_per_block: Vec<u64>,
    /// Accepted decisions at each sampling iteration.
    pub accepted_per_iteration: Vec<u32>,
    pub decisions_per_iteration: u32,
    pub snapshots: Vec<Ensemble>,
    pub tune_trace: Vec<TuneEpoch>,
    /// Step size used in the sampling phase.
    pub step: f64,
    pub seed: u64,
    pub replica: u64,
    pub final_state: Ensemble,
}

fn tune_update(h: f64, epoch: usize, rate: f64, tune: &TuneConfig) -> (f64, bool) {
    let ln_h = libm::log(h) + tune.gain / libm::sqrt(epoch as f64) * (rate - tune.target_rate);
    let next = libm::exp(ln_h);
    let clamped = next.clamp(H_MIN, H_MAX);
    (clamped, clamped != next)
}

/// Runs burn-in (optionally tuning `h`) followed by `iterations` recorded steps.
pub fn run_chain(
    cfg: &ChainConfig,
    target: &dyn Target,
    init: Ensemble,
    recorders: &[Recorder<'_>],
) -> Result<ChainOutput> {
    run_chain_with(cfg, target, init, recorders, &mut |_| {})
}

/// [`run_chain`] that also hands every sampling-phase ensemble to `visit`.
/// On error, `visit` has seen all iterations completed before the failure.
pub fn run_chain_with(
    cfg: &ChainConfig,
    target: &dyn Target,
    init: Ensemble,
    recorders: &[Recorder<'_>],
    visit: &mut dyn FnMut(&Ensemble),
) -> Result<ChainOutput> {
    cfg.spec.validate()?;
    let mut state = ChainState::new(target, init)?;
    let base = StreamKey::new(cfg.seed, Purpose::ProposalNoise).replica(cfg.replica);
    let mut spec = cfg.spec.clone();
    let mut burn_in_accept = AcceptCounts::default();
    let mut tune_trace = Vec::new();
    let mut epoch_counts = AcceptCounts::default();
    for t in 0..cfg.burn_in {
        let stats = kernel_step(
            &cfg.mode,
            &spec,
            target,
            &mut state,
            base.iteration(t as u64),
        )?;
        burn_in_accept.add(&stats);
        if let Some(tune) = &cfg.tune {
            epoch_counts.add(&stats);
            if (t + 1) % tune.epoch_len == 0 {
                let rate = epoch_counts.rate();
                let (next, saturated) = tune_update(spec.step, tune_trace.len() + 1, rate, tune);
                tune_trace.push(TuneEpoch {
                    step: spec.step,
                    rate,
                    saturated,
                });
                spec = spec.with_step(next);
                epoch_counts = AcceptCounts::default();
            }
        }
    }

    let mut series: Vec<Vec<f64>> = recorders
        .iter()
        .map(|_| Vec::with_capacity(cfg.iterations))
        .collect();
    let mut sample_accept = AcceptCounts::default();
    let mut accepted_per_block = Vec::new();
    let mut accepted_per_iteration = Vec::with_capacity(cfg.iterations);
    let mut decisions_per_iteration = 0;
    let mut snapshots = Vec::new();
    for n in 0..cfg.iterations {
        let t = (cfg.burn_in + n) as u64;
        let stats = kernel_step(&cfg.mode, &spec, target, &mut state, base.iteration(t))?;
        sample_accept.add(&stats);
        if accepted_per_block.is_empty() {
            accepted_per_block = alloc::vec![0; stats.flags.len()];
            decisions_per_iteration = stats.flags.len() as u32;
        }
        for (a, &f) in accepted_per_block.iter_mut().zip(&stats.flags) {
            *a += f as u64;
        }
        accepted_per_iteration.push(stats.accepted() as u32);
        for (s, r) in series.iter_mut().zip(recorders) {
            s.push(r(&state.ensemble));
        }
        visit(&state.ensemble);
        if let Some(k) = cfg.snapshot_every {
            if k > 0 && n % k == 0 {
                snapshots.push(state.ensemble.clone());
            }
        }
    }
    Ok(ChainOutput {
        series,
        burn_in_accept,
        sample_accept,
        accepted_per_block,
        accepted_per_iteration,
        decisions_per_iteration,
        snapshots,
        tune_trace,
        step: spec.step,
        seed: cfg.seed,
        replica: cfg.replica,
        final_state: state.ensemble,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub step: f64,
    pub trace: Vec<TuneEpoch>,
    pub final_state: Ensemble,
}

/// Stand-alone step-size tuning: `epochs` epochs of `epoch_len` iterations.
pub fn tune_step_size(
    mode: &KernelMode,
    spec: &DynamicsSpec,
    target: &dyn Target,
    init: Ensemble,
    tune: TuneConfig,
    epochs: usize,
    seed: u64,
) -> Result<TuneResult> {
    let cfg = ChainConfig {
        tune: Some(tune),
        ..ChainConfig::new(mode.clone(), spec.clone(), 0, epochs * tune.epoch_len, seed)
    };
    let out = run_chain(&cfg, target, init, &[])?;
    Ok(TuneResult {
        step: out.step,
        trace: out.tune_trace,
        final_state: out.final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::TargetModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn init(m: usize, d: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::new(
            m,
            d,
            (0..m * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn log_accept_cases() {
        assert_eq!(log_accept(-1.0, -3.0, 0.5, 0.5), -2.0);
        assert_eq!(log_accept(-1.0, 0.0, 0.5, 0.5), 0.0);
        assert_eq!(log_accept(-2.0, -2.0, -0.5, -0.5), 0.0);
        assert_eq!(
            log_accept(f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0),
            0.0
        );
        assert_eq!(
            log_accept(0.0, f64::NEG_INFINITY, 0.0, 0.0),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn pmala_acceptance_matches_direct_ratio() {
        // N(0,1), h = 0.25, x = 0, y = 1
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let spec = DynamicsSpec::pmala(0.25).unwrap();
        let x = Ensemble::from_rows(&[vec![0.0]]).unwrap();
        let y = Ensemble::from_rows(&[vec![1.0]]).unwrap();
        let q = |from: f64, to: f64| {
            let mean = from - 0.25 * from;
            (-(to - mean) * (to - mean) / (4.0 * 0.25)).exp()
                / (4.0 * core::f64::consts::PI * 0.25).sqrt()
        };
        let pi = |v: f64| (-0.5 * v * v).exp();
        let direct = (pi(1.0) * q(1.0, 0.0) / (pi(0.0) * q(0.0, 1.0))).min(1.0);
        let logq = ensemble_move_log_density(&spec, &t, &x, &y).unwrap();
        let fwd = q(0.0, 1.0).ln();
        assert!(((logq - fwd).exp() - direct).abs() < 1e-12);
    }

    #[test]
    fn uniform_target_rejects_moves_off_support() {
        let t = TargetModel::uniform01(1);
        let spec = DynamicsSpec::cbs(1.0, 10.0).unwrap();
        let e = Ensemble::from_rows(&[vec![0.5], vec![0.4]]).unwrap();
        let mut state = ChainState::new(&t, e).unwrap();
        for it in 0..200 {
            let key = StreamKey::new(3, Purpose::ProposalNoise).iteration(it);
            kernel_step(
                &KernelMode::SequentialPW(ScanOrder::Deterministic),
                &spec,
                &t,
                &mut state,
                key,
            )
            .unwrap();
            assert!(state.log_target.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn single_block_reproduces_ensemble_wise() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1, 0.01, 0.001]);
        let spec = DynamicsSpec::aldi(0.01, 0.02).unwrap();
        let run = |mode| {
            let cfg = ChainConfig::new(mode, spec.clone(), 50, 10, 99);
            run_chain(
                &cfg,
                &t,
                init(12, 4, 1),
                &[&|e: &Ensemble| e.particle(0)[0]],
            )
            .unwrap()
        };
        let a = run(KernelMode::EnsembleWise);
        let b = run(KernelMode::BlockWise(
            BlockPartition::single(12),
            ScanOrder::Deterministic,
        ));
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn singleton_blocks_reproduce_sequential() {
        let t = TargetModel::diag_gaussian(vec![1.0, 0.1]);
        let spec = DynamicsSpec::aldi(0.1, 0.05).unwrap();
        let run = |mode| {
            let cfg = ChainConfig::new(mode, spec.clone(), 40, 0, 5);
            run_chain(&cfg, &t, init(6, 2, 2), &[]).unwrap()
        };
        let a = run(KernelMode::SequentialPW(ScanOrder::Deterministic));
        let b = run(KernelMode::BlockWise(
            BlockPartition::singletons(6),
            ScanOrder::Deterministic,
        ));
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.accepted_per_block, b.accepted_per_block);
    }

    #[test]
    fn svgd_needs_ensemble_wise() {
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let spec = DynamicsSpec::svgd(1.0, 0.01).unwrap();
        let mut s = ChainState::new(&t, init(3, 1, 3)).unwrap();
        let key = StreamKey::new(0, Purpose::ProposalNoise);
        let err = kernel_step(
            &KernelMode::SequentialPW(ScanOrder::Deterministic),
            &spec,
            &t,
            &mut s,
            key,
        );
        assert!(matches!(err, Err(Error::UnsupportedMode(_))));
        assert!(kernel_step(&KernelMode::EnsembleWise, &spec, &t, &mut s, key).is_ok());
    }

    #[test]
    fn zero_iterations_and_determinism() {
        let t = TargetModel::diag_gaussian(vec![1.0]);
        let cfg = ChainConfig::new(
            KernelMode::EnsembleWise,
            DynamicsSpec::pmala(0.3).unwrap(),
            0,
            5,
            1,
        );
        let out = run_chain(&cfg, &t, init(3, 1, 4), &[&|e: &Ensemble| e.particle(0)[0]]).unwrap();
        assert!(out.series[0].is_empty());
        assert_eq!(out.burn_in_accept.decisions, 5);
        let cfg = ChainConfig {
            iterations: 20,
            ..cfg
        };
        let a = run_chain(&cfg, &t, init(3, 1, 4), &[]).unwrap();
        let b = run_chain(&cfg, &t, init(3, 1, 4), &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_steps_are_almost_always_accepted() {
        let t = TargetModel::bimodal(0.1, 0.8);
        let spec = DynamicsSpec::aldi(0.0, 1e-12).unwrap();
        let cfg = ChainConfig::new(KernelMode::EnsembleWise, spec, 1000, 0, 7);
        let out = run_chain(&cfg, &t, init(10, 1, 5), &[]).unwrap();
        assert!(out.sample_accept.rate() >= 0.999);
    }

    #[test]
    fn partition_validation() {
        assert!(BlockPartition::uniform(10, 3).is_err());
        assert!(BlockPartition::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(BlockPartition::new(vec![vec![0]], 2).is_err());
        assert_eq!(
            BlockPartition::uniform(100, 25).unwrap().block_size(),
            Some(25)
        );
    }
}
