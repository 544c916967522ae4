use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fex_cli::commands::{self, Overrides};
use fex_cli::CliError;
use fex_core::problems::Precision;

#[derive(Parser)]
#[command(name = "fex", version, about = "Finite expression search for closed-form PDE solutions")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Continue from the checkpoint in the output directory, if present.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            precision: self.precision.map(Into::into),
            resume: self.resume,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search for a closed-form solution of the configured problem.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Error of a given expression against a benchmark's exact solution.
    Eval {
        expression: String,
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value_t = 10_000)]
        n_test: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run a benchmark row and compare with its reference error.
    Reproduce {
        row: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dump sampled interior and boundary points as CSV.
    SampleDomain {
        #[arg(long)]
        benchmark: String,
        #[arg(long, default_value_t = 1000)]
        n_interior: usize,
        #[arg(long, default_value_t = 1000)]
        n_boundary: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(anyhow::Error::from)?;
    }
    match cli.command {
        Command::Solve { config, run } => commands::solve(&config, &run.overrides()),
        Command::Eval {
            expression,
            benchmark,
            n_test,
            seed,
        } => commands::eval(&expression, &benchmark, n_test, seed),
        Command::Reproduce { row, config, run } => commands::reproduce(&row, config.as_deref(), &run.overrides()),
        Command::SampleDomain {
            benchmark,
            n_interior,
            n_boundary,
            seed,
            out,
        } => commands::sample_domain(&benchmark, n_interior, n_boundary, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
