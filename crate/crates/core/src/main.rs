use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use certlip::cli::{self, AttackArgs, Outcome};
use certlip::datasets::Split;
use certlip::lipschitz::Mode;
use certlip::oracle::AttackConfig;

#[derive(Parser)]
#[command(name = "certlip", version, about = "Train Lipschitz-bounded networks and certify their predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify a dataset split at radius `eps`.
    Certify {
        #[arg(long)]
        ckpt: PathBuf,
        /// Config file with a [data] section, or inline `kind=blobs,classes=4,...`.
        /// Defaults to the test split.
        #[arg(long)]
        data: String,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PGD attack; with --only-certified, a broken certificate exits with 3.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        eps: f64,
        #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
        only_certified: bool,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        fault_scale_k: Option<f64>,
    },
    /// Per-layer Lipschitz bounds of a checkpoint.
    Lipschitz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "certify")]
        mode: Mode,
        #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "false")]
        compare_oracle: bool,
        #[arg(long, default_value_t = 1e-6)]
        safety_margin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate training runs into depth/VRA and churn tables and plots.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    cli::threads_from_env()?;
    let outcome = match cli.command {
        Command::Train { config, seed, out } => {
            cli::cmd_train(&config, seed, out.as_deref()).with_context(|| format!("training from {}", config.display()))?
        }
        Command::Certify { ckpt, data, eps, out } => {
            let data = cli::parse_data_arg(&data, Split::Test)?;
            cli::cmd_certify(&ckpt, &data, eps, out.as_deref()).with_context(|| format!("certifying {}", ckpt.display()))?
        }
        Command::Attack { ckpt, data, eps, only_certified, steps, restarts, seed, out, fault_scale_k } => {
            let data = cli::parse_data_arg(&data, Split::Test)?;
            let args = AttackArgs {
                eps,
                only_certified,
                attack: AttackConfig { steps, restarts, step_size: None, seed },
                fault_scale_k,
            };
            cli::cmd_attack(&ckpt, &data, &args, out.as_deref()).with_context(|| format!("attacking {}", ckpt.display()))?
        }
        Command::Lipschitz { ckpt, mode, compare_oracle, safety_margin, out } => {
            cli::cmd_lipschitz(&ckpt, mode, compare_oracle, safety_margin, out.as_deref())
                .with_context(|| format!("bounding {}", ckpt.display()))?
        }
        Command::Report { logs, out } => cli::cmd_report(&logs, &out)?,
    };
    Ok(outcome)
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::from(outcome.code as u8)
        }
        Err(e) => {
            eprintln!("error: {:#}", e);
            let code = e.downcast_ref::<certlip::Error>().map_or(cli::EXIT_CONFIG, cli::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
