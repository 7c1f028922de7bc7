//! mobiforge CLI: data generation, VAE pretraining, denoiser training,
//! forecasting, evaluation, and plot-data emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Log verbosity
//! comes from the MOBIFORGE_LOG env var (error|info|debug).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mobiforge::config::{load_config, RunConfig};
use mobiforge::datagen::DataKind;
use mobiforge::pipeline::{
    stage_datagen, stage_eval, stage_forecast, stage_plotdata, stage_pretrain_vae, stage_train,
    ForecastArgs,
};

#[derive(Parser)]
#[command(name = "mobiforge", version, about = "Mobile time-series diffusion forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test splits.
    Datagen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pre-train the environment VAEs and write them to the checkpoint.
    PretrainVae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the denoiser (runs VAE pretraining first if needed).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Forecast one test sample and write a per-position CSV.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        /// short | long | generation
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        horizon: Option<usize>,
        /// bs | app | rsrp
        #[arg(long)]
        kind: Option<String>,
        /// Ordinal index within the chosen kind's test samples.
        #[arg(long, default_value_t = 0)]
        sample_id: u64,
    },
    /// Evaluate the kind x task x metric grid over the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reshape a forecast CSV into tidy long format.
    Plotdata {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, mobiforge::Error> {
    load_config(path)
}

fn run(cli: Cli) -> Result<(), mobiforge::Error> {
    match cli.command {
        Command::Datagen { config } => {
            let cfg = load(&config)?;
            let (train, test) = stage_datagen(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::PretrainVae { config } => {
            let cfg = load(&config)?;
            let ckpt = stage_pretrain_vae(&cfg)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Train { config } => {
            let cfg = load(&config)?;
            let ckpt = stage_train(&cfg)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Forecast { config, task, horizon, kind, sample_id } => {
            let cfg = load(&config)?;
            let kind = kind.map(|k| DataKind::from_name(&k)).transpose()?;
            let args = ForecastArgs { task, horizon, kind, sample_id };
            let path = stage_forecast(&cfg, &args)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { config } => {
            let cfg = load(&config)?;
            let path = stage_eval(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Plotdata { input, output } => {
            stage_plotdata(&input, &output)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("MOBIFORGE_LOG", "error"),
    )
    .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap treats --help/--version as "errors" with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
