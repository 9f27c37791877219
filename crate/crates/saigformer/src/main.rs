use clap::{Parser, Subcommand};
use saigformer::cli::{self, CliError, DataArg};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "saig",
    about = "Spatially-adaptive illumination-guided low-light image enhancement",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance a PNG with a trained checkpoint
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on synthetic pairs or a paired directory
    Train {
        /// JSON config file (model + train sections); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// "synthetic" or a directory with low/ and normal/ subdirectories
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a training snapshot checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit illumination/attention diagnostics for one image
    Inspect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit finite-difference gradient suites
    Gradcheck {
        /// tensor, sat, sai2e, blocks, network, train, or all
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Negative control: corrupt one analytic gradient and expect failure
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn run() -> Result<(), CliError> {
    match Args::parse().command {
        Command::Enhance {
            input,
            checkpoint,
            output,
        } => cli::cmd_enhance(&input, &checkpoint, &output),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cli::cmd_train(
            config.as_deref(),
            &DataArg::parse(&data),
            &out,
            resume.as_deref(),
        ),
        Command::Inspect {
            input,
            checkpoint,
            out,
        } => cli::cmd_inspect(&input, &checkpoint, &out),
        Command::Gradcheck {
            module,
            seed,
            inject_fault,
        } => {
            if inject_fault {
                std::env::set_var(saigformer::gradcheck::FAULT_ENV, "gelu");
            }
            cli::cmd_gradcheck(&module, seed)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
