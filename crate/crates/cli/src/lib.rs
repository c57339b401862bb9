//! The `adaicl` command line: `run`, `compare`, `emit-viz`, `serve` and
//! `heuristic-m`.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use adaicl_core::graph::{heuristic_m_range, Hops, MRange};
use adaicl_core::strategies::StrategyName;
use adaicl_harness::config::StrategyEntry;
use adaicl_harness::{compare_files, emit_viz, run_experiment, Comparison, Dataset, ExperimentConfig, Summary, Workbench};
use adaicl_service::ServiceConfig;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Environment variable holding the service's bearer token.
pub const TOKEN_ENV: &str = "ADAICL_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "adaicl", version, about = "Budgeted active selection of in-context demonstrations")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every strategy × seed × budget cell of an experiment.
    Run(RunArgs),
    /// Align summaries by budget step and report Δ-gain.
    Compare(CompareArgs),
    /// Write per-iteration PCA scatter CSVs for a finished run.
    EmitViz(VizArgs),
    /// Start the interactive annotation service.
    Serve(ServeArgs),
    /// Print the bounds on the neighbor count m.
    HeuristicM(HeuristicArgs),
}

/// Config fields settable from the command line.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<StrategyName>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Cumulative budgets, e.g. `5,10,15,20`.
    #[arg(long, value_delimiter = ',')]
    pub budget_schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub initial_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub theta_hat: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_parser = parse_hops)]
    pub hops: Option<Hops>,
    #[arg(long)]
    pub weight_base: Option<u64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub n_bins: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Run cells one after another.
    #[arg(long)]
    pub sequential: bool,
}

fn parse_hops(s: &str) -> Result<Hops, String> {
    let n: u8 = s.parse().map_err(|_| format!("hops must be 1 or 2, got `{s}`"))?;
    Hops::try_from(n).map_err(|e| e.to_string())
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(names) = &self.strategies {
            config.strategies = names.iter().copied().map(StrategyEntry::new).collect();
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    config.$field = v.clone();
                }
            )*};
        }
        set!(seeds, budget_schedule, initial_size, k, theta, theta_hat, iterations, weight_base, bandwidth, n_bins, output_dir);
        if self.m.is_some() {
            config.m = self.m;
        }
        if self.hops.is_some() {
            config.hops = self.hops;
        }
        if self.sequential {
            config.parallel = false;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// summary.json files; the first is the reference.
    #[arg(required = true)]
    pub summaries: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VizArgs {
    /// Output directory of a finished `run`.
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/viz`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Where session snapshots are kept; sessions are in-memory without it.
    #[arg(long)]
    pub snapshot_dir: Option<PathBuf>,
    /// CORS origin of the annotation UI; repeatable. Any origin when absent.
    #[arg(long)]
    pub allow_origin: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct HeuristicArgs {
    /// Read defaults (and the candidate pool size) from this config.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Desired maximum number of iterations T̂.
    #[arg(long)]
    pub iterations_hat: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub theta_hat: Option<f64>,
    /// Candidate pool size; taken from the config's pool when omitted.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = parse_hops, default_value = "1")]
    pub hops: Hops,
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "config {}  seeds {:?}", summary.config_hash, summary.seeds);
    let _ = writeln!(out, "{:<16} {:>7} {:>8} {:>8} {:>8}", "strategy", "budget", "mean", "std", "ece");
    for c in &summary.cells {
        let _ = writeln!(
            out,
            "{:<16} {:>7} {:>8.4} {:>8.4} {:>8.4}",
            c.strategy, c.budget, c.mean, c.std, c.ece_mean
        );
    }
    out
}

pub fn cmd_run(args: &RunArgs) -> Result<Summary> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    log::info!(
        "{} strategies × {} seeds over {:?} into {}",
        config.strategies.len(),
        config.seeds.len(),
        config.budget_schedule,
        config.output_dir.display()
    );
    Ok(run_experiment(&config)?)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<Comparison> {
    let comparison = compare_files(&args.summaries)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, comparison.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(comparison)
}

pub fn cmd_emit_viz(args: &VizArgs) -> Result<Vec<PathBuf>> {
    Ok(emit_viz(&args.run_dir, args.out.as_deref())?)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        allowed_origins: args.allow_origin.clone(),
        bearer_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(adaicl_service::serve(args.addr, args.snapshot_dir.clone(), config))
        .map_err(|e| anyhow::anyhow!(e))
}

/// Resolved inputs of the neighbor-count rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicInputs {
    pub budget: usize,
    pub iterations_hat: usize,
    pub theta: f64,
    pub theta_hat: f64,
    pub n: usize,
    pub hops: Hops,
}

pub fn heuristic_inputs(args: &HeuristicArgs) -> Result<HeuristicInputs> {
    let config = load_config(args.config.as_deref(), &Overrides::default())?;
    let n = match args.n {
        Some(n) => n,
        None => {
            let dataset = Dataset::load(&config)?;
            let seed = config.seeds[0];
            Workbench::new(&dataset, &config, seed)?.candidates.len()
        }
    };
    Ok(HeuristicInputs {
        budget: args.budget.unwrap_or_else(|| config.total_budget()),
        iterations_hat: args.iterations_hat.unwrap_or(config.max_iterations_hat),
        theta: args.theta.unwrap_or(config.theta),
        theta_hat: args.theta_hat.unwrap_or(config.theta_hat),
        n,
        hops: args.hops,
    })
}

pub fn cmd_heuristic_m(args: &HeuristicArgs) -> Result<(MRange, String)> {
    let i = heuristic_inputs(args)?;
    let range = heuristic_m_range(i.budget, i.iterations_hat, i.theta, i.theta_hat, i.n, i.hops)?;
    let mut out = String::new();
    let hops: u8 = i.hops.into();
    let _ = writeln!(
        out,
        "{hops}-hop  B={} T̂={} θ={} θ̂={} N={}  (N_θ={}, N_θ̂={})",
        i.budget, i.iterations_hat, i.theta, i.theta_hat, i.n, range.n_theta, range.n_theta_hat
    );
    let bounded = match i.hops {
        Hops::One => "m",
        Hops::Two => "m²",
    };
    let _ = writeln!(out, "{bounded} lower bound: {}", range.lower);
    let _ = writeln!(out, "{bounded} upper bound: {}", range.upper);
    let candidates = range.integer_candidates();
    match (candidates.first(), candidates.last()) {
        (Some(lo), Some(hi)) => {
            let _ = writeln!(out, "integer m in range: {lo}..={hi}");
        }
        _ => {
            let _ = writeln!(out, "no integer m in range; smallest m above the lower bound: {}", range.smallest_m());
        }
    }
    Ok((range, out))
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let summary = cmd_run(args)?;
            print!("{}", render_summary(&summary));
        }
        Command::Compare(args) => print!("{}", cmd_compare(args)?.render()),
        Command::EmitViz(args) => {
            let files = cmd_emit_viz(args)?;
            println!("wrote {} file(s)", files.len());
        }
        Command::Serve(args) => cmd_serve(args)?,
        Command::HeuristicM(args) => print!("{}", cmd_heuristic_m(args)?.1),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("adaicl").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_fields() {
        let Command::Run(run) = parse(&[
            "run",
            "--seeds",
            "4,5",
            "--budget-schedule",
            "5,10",
            "--strategies",
            "random,adaicl",
            "--hops",
            "1",
            "--sequential",
        ])
        .command
        else {
            panic!("expected run");
        };
        let config = load_config(None, &run.overrides).unwrap();
        assert_eq!(config.seeds, vec![4, 5]);
        assert_eq!(config.budget_schedule, vec![5, 10]);
        assert_eq!(config.strategies.len(), 2);
        assert_eq!(config.hops, Some(Hops::One));
        assert!(!config.parallel);
        assert_eq!(config.k, 5);
    }

    #[test]
    fn invalid_override_is_reported() {
        let overrides = Overrides {
            theta: Some(1.5),
            ..Overrides::default()
        };
        let err = load_config(None, &overrides).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
        assert!(Cli::try_parse_from(["adaicl", "run", "--hops", "3"]).is_err());
    }

    #[test]
    fn default_one_hop_range() {
        let Command::HeuristicM(args) = parse(&["heuristic-m", "--n", "300"]).command else {
            panic!("expected heuristic-m");
        };
        let (range, text) = cmd_heuristic_m(&args).unwrap();
        assert_eq!(range.lower, 15.0);
        assert_eq!(range.upper, 30.0);
        assert!(text.contains("m lower bound: 15\n"), "{text}");
        assert!(text.contains("integer m in range: 15..=30"), "{text}");
    }

    #[test]
    fn two_hop_bounds_m_squared() {
        let Command::HeuristicM(args) = parse(&["heuristic-m", "--n", "300", "--hops", "2"]).command else {
            panic!("expected heuristic-m");
        };
        let (range, text) = cmd_heuristic_m(&args).unwrap();
        assert_eq!((range.lower, range.upper), (30.0, 60.0));
        assert_eq!(range.integer_candidates(), vec![6, 7]);
        assert!(text.contains("m² lower bound: 30"), "{text}");
    }

    #[test]
    fn pool_size_comes_from_the_config() {
        let Command::HeuristicM(args) = parse(&["heuristic-m"]).command else {
            panic!("expected heuristic-m");
        };
        assert_eq!(heuristic_inputs(&args).unwrap().n, 300);
    }
}
