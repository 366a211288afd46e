use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphprune::commands::{self, CorrRequest, CHECKPOINT, SEARCH_LOG};
use graphprune::config::ExperimentConfig;
use graphprune::correlation::CorrelationMode;
use graphprune::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "graphprune", version, about = "Channel pruning with a graph-aggregated hypernetwork")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed everywhere it is used.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. 1 gives bit-for-bit reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a model description and dump its renormalized adjacency.
    Transform {
        /// Description file, or `bundled:<name>`.
        model: String,
    },
    /// Train the supernet.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Search for per-layer ratios under the FLOPs budget.
    Search {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-layer MACs and parameters.
    Flops {
        /// Description file, or `bundled:<name>`.
        model: String,
        /// Ratio file; full width when omitted.
        #[arg(long)]
        ratios: Option<PathBuf>,
    },
    /// Channel-configuration and node-distance plot data.
    Report {
        /// Ratio files to chart.
        ratio_files: Vec<PathBuf>,
        /// Search log to turn into a reward curve.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pearson correlation between the filters of two layers.
    AnalyzeCorr {
        /// Two convolution node ids, e.g. `3,5`.
        #[arg(long, value_parser = parse_pair)]
        layers: (usize, usize),
        /// `paper` or `standard`.
        #[arg(long, default_value = "standard")]
        mode: String,
        /// Report pairs with |value| strictly above this.
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long)]
        ratios: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a pruned architecture from scratch.
    Retrain {
        #[arg(long)]
        ratios: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two node ids separated by a comma")?;
    let n = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((n(a)?, n(b)?))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn checkpoint_or_default(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT))
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(cli: &Cli) -> Result<String> {
    let plain_out = || cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Transform { model } => commands::transform(model, &plain_out()),
        Command::Flops { model, ratios } => commands::flops(model, ratios.as_deref(), &plain_out()),
        Command::Train { resume } => commands::train(&load_config(cli)?, *resume, progress),
        Command::Search { checkpoint } => {
            let cfg = load_config(cli)?;
            commands::search(&cfg, &checkpoint_or_default(&cfg, checkpoint), progress)
        }
        Command::Report { ratio_files, log, checkpoint } => {
            let cfg = load_config(cli)?;
            let log = log.clone().or_else(|| Some(cfg.out.join(SEARCH_LOG)).filter(|p| p.is_file()));
            commands::report(&cfg, &checkpoint_or_default(&cfg, checkpoint), log.as_deref(), ratio_files)
        }
        Command::AnalyzeCorr { layers, mode, tau, ratios, checkpoint } => {
            let cfg = load_config(cli)?;
            let req = CorrRequest { layers: *layers, mode: CorrelationMode::parse(mode)?, tau: *tau };
            commands::analyze_corr(&cfg, &checkpoint_or_default(&cfg, checkpoint), ratios.as_deref(), req)
        }
        Command::Retrain { ratios } => commands::retrain(&load_config(cli)?, Path::new(ratios), progress),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
