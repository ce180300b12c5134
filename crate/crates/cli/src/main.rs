use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use protonplan_cli::{load_config, run_command, CliError, Command};

#[derive(Parser)]
#[command(
    name = "protonplan",
    version,
    about = "Proton transport, dose and beam-weight planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo transport: fluence.csv, dose.csv
    Simulate(Common),
    /// Deterministic 1D solve: psi.csv, dose.csv
    SolvePde(Common),
    /// Beam-weight optimization: weights.csv, trace.csv, dose.csv
    Optimize(Common),
    /// Monte Carlo versus deterministic comparison: duality_report.txt
    VerifyDuality(Common),
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set sim.n_particles=1000`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(command: Command, args: Common) -> Result<String, CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Validation(vec!["--threads must be >= 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(vec![format!("--threads: {e}")]))?;
    }
    let mut overrides = args.set;
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("output_dir={}", toml::Value::String(out.display().to_string())));
    }
    let cfg = load_config(&args.config, &overrides)?;
    run_command(command, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::SolvePde(a) => (Command::SolvePde, a),
        Cmd::Optimize(a) => (Command::Optimize, a),
        Cmd::VerifyDuality(a) => (Command::VerifyDuality, a),
    };
    match run(command, args) {
        Ok(manifest) => {
            print!("{manifest}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
