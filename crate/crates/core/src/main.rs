use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cgssm::commands::{bench_command, bench_config, diagnose_command, eof_command, exit_code, fit_command, simulate_command};

#[derive(Parser)]
#[command(name = "cgssm", version, about = "Changepoint detection in multivariate and space-time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a data set from the factor model with known breaks.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an empirical orthogonal function basis.
    Eof {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        k_max: usize,
        /// Scale every series to unit variance first.
        #[arg(long)]
        standardize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampler and write posterior summaries.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time the full-dimensional and reduced indicator samplers.
    Bench {
        #[arg(long, value_delimiter = ',')]
        pgrid: Option<Vec<usize>>,
        #[arg(long)]
        sweeps: Option<usize>,
        /// Wall-clock budget per path and grid point, in seconds.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a fit directory and write plot-ready files.
    Diagnose {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate { config, out } => simulate_command(config.as_deref(), &out),
        Command::Eof { data, threshold, k_max, standardize, out } => eof_command(&data, threshold, k_max, standardize, &out),
        Command::Fit { config, out, chains, seed } => fit_command(&config, out.as_deref(), chains, seed).map(|dir| {
            println!("wrote {}", dir.display());
        }),
        Command::Bench { pgrid, sweeps, budget, seed, out } => bench_command(&bench_config(pgrid, sweeps, budget, seed), &out).map(|s| {
            println!(
                "naive log-log slope {:.3}, reduced spread {:.3}x, speedup at p=100 {}",
                s.naive_slope,
                s.reduced_spread,
                s.speedup_at_100.map(|v| format!("{v:.1}x")).unwrap_or_else(|| "n/a".into())
            );
        }),
        Command::Diagnose { dir } => diagnose_command(&dir).map(|report| print!("{report}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
