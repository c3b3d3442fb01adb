use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use maha_cli::commands::AggChoice;
use maha_cli::config::{MetricChoice, PolicyChoice, RunConfig};
use maha_cli::error::{CliError, Result};
use maha_core::aggregate::AggMethod;
use maha_core::heatmap::HeatmapFormat;

#[derive(Parser)]
#[command(name = "maha", about = "Hierarchical attention workbench", version)]
struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Proportional,
    Absolute,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    ScoreEntries,
    FullMacs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Co,
    Ne,
    Mean,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Pgm,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Copy,
    PatternClassify,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic operation-count sweep (and optional wall-clock timing).
    Bench {
        /// Comma-separated input lengths, ascending.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        metric: Option<MetricArg>,
        /// Also measure wall-clock forward times (timing.csv).
        #[arg(long)]
        timing: bool,
    },
    /// Train the toy model on a synthetic task.
    Train {
        #[arg(long)]
        task: Option<TaskArg>,
        #[arg(long)]
        agg: Option<AggArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Aggregation-method and scale-count ablations.
    Ablate {
        #[arg(long)]
        task: Option<TaskArg>,
        /// co, ne, mean, or all (default all).
        #[arg(long)]
        agg: Option<AggArg>,
        /// Comma-separated hierarchy depths for the scale ablation.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run every finite-difference gradient suite (tiny configs only).
    Gradcheck,
    /// Export per-scale attention heatmaps of a seed-instantiated model.
    Heatmap {
        #[arg(long)]
        format: Option<FormatArg>,
        /// Restrict to one layer (default: all layers).
        #[arg(long)]
        layer: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output.directory = out.to_string_lossy().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Bench { lengths, policy, metric, timing } => {
            if let Some(lengths) = lengths {
                cfg.bench.lengths = lengths;
            }
            if let Some(policy) = policy {
                cfg.bench.policy = match policy {
                    PolicyArg::Proportional => PolicyChoice::Proportional,
                    PolicyArg::Absolute => PolicyChoice::Absolute,
                };
            }
            if let Some(metric) = metric {
                cfg.bench.metric = match metric {
                    MetricArg::ScoreEntries => MetricChoice::ScoreEntries,
                    MetricArg::FullMacs => MetricChoice::FullMacs,
                };
            }
            cfg.validate()?;
            maha_cli::cmd_bench(&cfg, timing)
        }
        Command::Train { task, agg, steps } => {
            apply_train_overrides(&mut cfg, task, steps);
            if let Some(agg) = agg {
                cfg.solver.method = match agg {
                    AggArg::Co => AggMethod::Co,
                    AggArg::Ne => AggMethod::Ne,
                    AggArg::Mean => AggMethod::Mean,
                    AggArg::All => {
                        return Err(CliError::Config(
                            "train takes a single aggregation method; use ablate for all".into(),
                        ))
                    }
                };
            }
            cfg.validate()?;
            maha_cli::cmd_train(&cfg)
        }
        Command::Ablate { task, agg, scales, steps } => {
            apply_train_overrides(&mut cfg, task, steps);
            let choice = match agg.unwrap_or(AggArg::All) {
                AggArg::Co => AggChoice::One(AggMethod::Co),
                AggArg::Ne => AggChoice::One(AggMethod::Ne),
                AggArg::Mean => AggChoice::One(AggMethod::Mean),
                AggArg::All => AggChoice::All,
            };
            cfg.validate()?;
            maha_cli::cmd_ablate(&cfg, choice, scales.as_deref())
        }
        Command::Gradcheck => {
            cfg.validate()?;
            maha_cli::cmd_gradcheck(&cfg)
        }
        Command::Heatmap { format, layer } => {
            if let Some(format) = format {
                cfg.output.formats = vec![match format {
                    FormatArg::Csv => HeatmapFormat::Csv,
                    FormatArg::Pgm => HeatmapFormat::Pgm,
                }];
            }
            cfg.validate()?;
            maha_cli::cmd_heatmap(&cfg, layer)
        }
    }
}

fn apply_train_overrides(cfg: &mut RunConfig, task: Option<TaskArg>, steps: Option<usize>) {
    if let Some(task) = task {
        cfg.train.task = match task {
            TaskArg::Copy => "copy".to_string(),
            TaskArg::PatternClassify => "pattern_classify".to_string(),
        };
    }
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
