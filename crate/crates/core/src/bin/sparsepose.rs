use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use sparsepose::config::{RunConfig, SolveMode};
use sparsepose::pipeline::{self, files, RunReport, StageError, StageResult};

/// Sparse-dictionary 3D pose estimation from 2D poses or joint heat maps.
#[derive(Debug, Parser)]
#[command(name = "sparsepose", version)]
struct Cli {
    /// Worker threads for the solvers; 1 gives a fully serial run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set alpha=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "given-2d")]
    Given2d,
    Heatmaps,
}

impl From<Mode> for SolveMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Given2d => SolveMode::Given2d,
            Mode::Heatmaps => SolveMode::Heatmaps,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a pose dictionary from a 3D pose corpus.
    LearnDict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report path (defaults to `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Dictionary to draw poses from; a synthetic one is generated if absent.
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Estimate 3D poses from 2D poses or heat maps.
    Solve {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        dict: PathBuf,
        /// 2D pose file (given-2d) or heat-map file (heatmaps).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimated poses against ground truth.
    Eval {
        #[arg(long)]
        est3d: PathBuf,
        #[arg(long)]
        truth3d: PathBuf,
        #[arg(long)]
        est2d: PathBuf,
        #[arg(long)]
        truth2d: PathBuf,
        /// Report path (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize, solve and evaluate in one go.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn load_config(cli: &Cli, mode: Option<Mode>) -> StageResult<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = RunConfig::load(cli.config.as_deref(), &overrides).map_err(|source| StageError {
        stage: "configuration",
        source,
    })?;
    if let Some(m) = mode {
        config.mode = m.into();
    }
    Ok(config)
}

fn save(report: &RunReport, path: &std::path::Path) -> StageResult<()> {
    report.save(path).map_err(|source| StageError {
        stage: "write report",
        source,
    })
}

fn run(cli: &Cli) -> StageResult<()> {
    match &cli.command {
        Command::LearnDict { corpus, out, report } => {
            let config = load_config(cli, None)?;
            let r = pipeline::learn_dict_command(&config, corpus, out)?;
            let path = report.clone().unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".report.json");
                p.into()
            });
            save(&r, &path)
        }
        Command::Synth { out, dict } => {
            let config = load_config(cli, None)?;
            let r = pipeline::synth_command(&config, dict.as_deref(), out)?;
            save(&r, &out.join(files::REPORT))
        }
        Command::Solve { mode, dict, input, out } => {
            let config = load_config(cli, *mode)?;
            let r = pipeline::solve_command(&config, dict, input, out)?;
            save(&r, &out.join(files::REPORT))
        }
        Command::Eval {
            est3d,
            truth3d,
            est2d,
            truth2d,
            out,
        } => {
            let config = load_config(cli, None)?;
            let r = pipeline::eval_command(&config, est3d, truth3d, est2d, truth2d)?;
            print!("{}", r.to_json());
            match out {
                Some(p) => save(&r, p),
                None => Ok(()),
            }
        }
        Command::Pipeline { out, mode } => {
            let config = load_config(cli, *mode)?;
            let r = pipeline::pipeline_command(&config, out)?;
            save(&r, &out.join(files::REPORT))?;
            let eval = serde_json::to_string_pretty(&r.eval).expect("report serializes");
            println!("{eval}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
