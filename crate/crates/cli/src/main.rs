use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dia_cli::commands::{cmd_analyze, cmd_gradcheck, cmd_params, cmd_train, AnalyzeKind};
use dia_cli::config::SEED_ENV;
use dia_cli::{keys_help, Failure, RunConfig};

/// Shared recurrent channel attention for residual networks: training,
/// parameter accounting, gradient checks and attention analyses.
#[derive(Parser)]
#[command(name = "dia", version)]
struct Cli {
    /// Maximum worker threads for parallel analyses.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`[section]` headers, `key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes checkpoint.bin, metrics.csv and the resolved config.
    Train(ConfigArgs),
    /// Parameter counts: backbone, attention increment per reduction ratio, sharing savings.
    Params {
        /// Architecture name; overrides model.arch.
        arch: Option<String>,
        /// Reduction ratios to tabulate, e.g. 1,4,8,16.
        #[arg(long = "r", value_delimiter = ',')]
        r: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare backward gradients with central finite differences.
    Gradcheck {
        /// Coordinates to check; overrides gradcheck.samples.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Attention traces and the analyses over them.
    Analyze {
        #[command(subcommand)]
        kind: Analyze,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Record attention maps of a checkpoint over the evaluation data.
    Trace(ConfigArgs),
    /// Inter-block Pearson correlation of a trace.
    Correlation(ConfigArgs),
    /// Random-forest importance of earlier maps for each later map.
    Importance(ConfigArgs),
    /// Per-stage gradient histograms, recorded while training or probed from a checkpoint.
    Gradients {
        /// Train without residual skips (model.use_skip = false).
        #[arg(long)]
        no_skip: bool,
        /// Train without batch normalization (model.use_batchnorm = false).
        #[arg(long)]
        no_batchnorm: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig, Failure> {
    let env = std::env::var(SEED_ENV).ok();
    let mut sets = extra.to_vec();
    sets.extend(args.set.iter().cloned());
    RunConfig::resolve(args.config.as_deref(), &sets, env.as_deref())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Invariant(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(&resolve(&a, &[])?),
        Command::Params { arch, r, cfg } => {
            let extra: Vec<String> = arch.map(|a| format!("model.arch={a}")).into_iter().collect();
            cmd_params(&resolve(&cfg, &extra)?, &r)
        }
        Command::Gradcheck { samples, cfg } => cmd_gradcheck(&resolve(&cfg, &[])?, samples),
        Command::Analyze { kind } => match kind {
            Analyze::Trace(a) => cmd_analyze(AnalyzeKind::Trace, &resolve(&a, &[])?),
            Analyze::Correlation(a) => cmd_analyze(AnalyzeKind::Correlation, &resolve(&a, &[])?),
            Analyze::Importance(a) => cmd_analyze(AnalyzeKind::Importance, &resolve(&a, &[])?),
            Analyze::Gradients {
                no_skip,
                no_batchnorm,
                cfg,
            } => {
                let mut extra = Vec::new();
                if no_skip {
                    extra.push("model.use_skip=false".to_string());
                }
                if no_batchnorm {
                    extra.push("model.use_batchnorm=false".to_string());
                }
                cmd_analyze(AnalyzeKind::Gradients, &resolve(&cfg, &extra)?)
            }
        },
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let matches = Cli::command().after_long_help(help.clone()).after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dia: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
