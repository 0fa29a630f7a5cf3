//! Command-line front end. `main` only maps the result to an exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::acceptance::{evaluate, fatal_count, strict, SuiteResults};
use crate::config::{resolve_workers, ExperimentConfig, ExperimentId, Overrides};
use crate::error::{AppError, AppResult};
use crate::experiments::{compute, mode_label, run_experiment, write, ExperimentResult};

#[derive(Debug, Parser)]
#[command(
    name = "mais",
    version,
    about = "Metropolis-adjusted interacting particle samplers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its CSV files and manifest.
    Run(RunArgs),
    /// Run every default experiment, write the outputs and check acceptance.
    Suite(SuiteArgs),
    /// Grid and two-state bias checks (shorthand for `run --experiment bias-lab`).
    BiasLab(BiasLabArgs),
    /// Tune the step size of one method and print the adaptation trace.
    Tune(TuneArgs),
    /// Print the built-in configuration of an experiment as TOML.
    Defaults {
        #[arg(long, short)]
        experiment: ExperimentId,
    },
}

#[derive(Debug, Args)]
pub struct Source {
    /// TOML configuration, or a manifest.json from an earlier run.
    #[arg(long, short, conflicts_with = "experiment")]
    pub config: Option<PathBuf>,
    /// Use the built-in configuration of this experiment.
    #[arg(long, short)]
    pub experiment: Option<ExperimentId>,
}

impl Source {
    fn load(&self) -> AppResult<ExperimentConfig> {
        match (&self.config, self.experiment) {
            (Some(p), _) => ExperimentConfig::load(p),
            (None, Some(id)) => Ok(ExperimentConfig::default_for(id)),
            (None, None) => Err(AppError::config("give --config FILE or --experiment ID")),
        }
    }
}

#[derive(Debug, Args)]
pub struct ChainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Ensemble size M.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Sampling iterations N.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub chain: ChainFlags,
    /// Worker threads for replicas (default: MAIS_WORKERS, then all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (default: the config's, else out/<experiment>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    /// Parent directory; each experiment writes to a subdirectory named by its id.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Treat the documented known failures as fatal too.
    #[arg(long)]
    pub strict: bool,
    /// Print every check, not only the failed ones.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct BiasLabArgs {
    /// Grid nodes on [0, 1]; odd.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long, default_value = "out/bias-lab")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub source: Source,
    /// Label of a method with `tune = true`.
    #[arg(long, short)]
    pub method: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub replica: u64,
    #[arg(long)]
    pub burn_in: Option<usize>,
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Suite(a) => cmd_suite(a),
        Command::BiasLab(a) => cmd_bias_lab(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Defaults { experiment } => {
            print!(
                "{}",
                ExperimentConfig::default_for(experiment).to_toml_string()?
            );
            Ok(())
        }
    }
}

fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.experiment.out.clone())
        .unwrap_or_else(|| Path::new("out").join(cfg.experiment.id.as_str()))
}

fn print_result(result: &ExperimentResult, dir: &Path) {
    for line in result.summary_lines() {
        println!("{line}");
    }
    println!("wrote {}", dir.display());
}

fn cmd_run(a: RunArgs) -> AppResult<()> {
    let mut cfg = a.source.load()?;
    let workers = resolve_workers(a.workers)?;
    let dir = output_dir(&cfg, a.out.clone());
    cfg.apply(&Overrides {
        seed: a.chain.seed,
        replicas: a.chain.replicas,
        out: Some(dir.clone()),
        ensemble: a.chain.ensemble,
        iterations: a.chain.iterations,
        burn_in: a.chain.burn_in,
    })?;
    let result = run_experiment(&cfg, workers, &dir)?;
    print_result(&result, &dir);
    Ok(())
}

fn cmd_bias_lab(a: BiasLabArgs) -> AppResult<()> {
    let mut cfg = ExperimentConfig::default_for(ExperimentId::BiasLab);
    if let Some(n) = a.nodes {
        cfg.problem.bias.nodes = n;
    }
    cfg.experiment.out = Some(a.out.clone());
    let result = run_experiment(&cfg, 1, &a.out)?;
    print_result(&result, &a.out);
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> AppResult<()> {
    let mut cfg = a.source.load()?;
    if cfg.experiment.id == ExperimentId::BiasLab {
        return Err(AppError::config("bias-lab has no chains to tune"));
    }
    let k = cfg
        .method_index(&a.method)
        .ok_or_else(|| AppError::config(format!("no method labelled '{}'", a.method)))?;
    let mut method = cfg.methods[k].clone();
    if !method.tune {
        return Err(AppError::config(format!(
            "method '{}' is not tuned (set tune = true)",
            a.method
        )));
    }
    method.step_from = None;
    cfg.methods = vec![method];
    // the replica index selects the seed stream; run only that one
    cfg.experiment.replicas = a.replica as usize + 1;
    cfg.apply(&Overrides {
        seed: a.seed,
        burn_in: a.burn_in,
        iterations: Some(2),
        ..Overrides::default()
    })?;
    let result = compute(&cfg, resolve_workers(None)?)?;
    let chain = match &result {
        ExperimentResult::Bimodal(r) => &r.chain,
        ExperimentResult::Gauss4d(r) => &r.chain,
        ExperimentResult::OdeIp(r) => &r.chain,
        ExperimentResult::BiasLab(_) => unreachable!("rejected above"),
    };
    let run = &chain.replicas[a.replica as usize].methods[0];
    println!("epoch,step,acceptance,saturated");
    for (i, e) in run.tune_trace.iter().enumerate() {
        println!("{},{:.6e},{:.4},{}", i + 1, e.step, e.rate, e.saturated);
    }
    println!(
        "{} ({} {}): tuned h = {:.6e}",
        cfg.methods[0].label,
        format!("{:?}", cfg.methods[0].dynamics).to_lowercase(),
        mode_label(cfg.methods[0].mode),
        run.step
    );
    Ok(())
}

fn cmd_suite(a: SuiteArgs) -> AppResult<()> {
    let workers = resolve_workers(a.workers)?;
    let configs: Vec<ExperimentConfig> = ExperimentId::ALL
        .iter()
        .map(|&id| {
            let mut cfg = ExperimentConfig::default_for(id);
            cfg.experiment.out = Some(a.out.join(id.as_str()));
            if let Some(s) = a.seed {
                cfg.experiment.seed = s;
            }
            cfg
        })
        .collect();
    let results = SuiteResults::compute(&configs, workers, |id| eprintln!("running {id}"))?;
    for (result, cfg) in results.results().iter().zip(ordered(&configs)) {
        let dir = a.out.join(cfg.experiment.id.as_str());
        write(result, &dir)?;
        println!("== {} ({})", cfg.experiment.id, dir.display());
        for line in result.summary_lines() {
            println!("  {line}");
        }
    }
    println!("== acceptance");
    let criteria = evaluate(&results)?;
    for c in &criteria {
        println!("{}", c.line());
        if a.verbose {
            for l in c.detail_lines() {
                println!("{l}");
            }
        }
    }
    let fatal = fatal_count(&criteria, a.strict || strict());
    let passed = criteria.iter().filter(|c| c.pass()).count();
    println!("{passed}/{} criteria pass", criteria.len());
    if fatal > 0 {
        return Err(AppError::Acceptance(fatal));
    }
    Ok(())
}

/// Configurations in the order of [`SuiteResults::results`].
fn ordered(configs: &[ExperimentConfig]) -> Vec<&ExperimentConfig> {
    [
        ExperimentId::Bimodal,
        ExperimentId::Gauss4d,
        ExperimentId::OdeIp,
        ExperimentId::BiasLab,
    ]
    .iter()
    .filter_map(|id| configs.iter().find(|c| c.experiment.id == *id))
    .collect()
}
