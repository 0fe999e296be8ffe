mod commands;
mod config;
mod parallel;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ugnn", version, about = "Train, certify and audit unitary-gradient classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Default,
    Desk,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Penalty,
    Grid2d,
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Checkpoint file.
    #[arg(long, required_unless_present = "ring")]
    pub ckpt: Option<PathBuf>,
    /// Use the hand-built 2D distance model ‖x‖ − 1 instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub ring: bool,
    /// Precision used to evaluate the loaded model.
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Args, Clone, Debug)]
pub struct OutArgs {
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from a configuration, freeze it and save it.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Dataset spec used to infer extents, e.g. `blobs2d:count=10`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        preset: PresetArg,
    },
    /// Train a model; writes the checkpoint, `<out>.manifest` and `<out>.history.csv`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        preset: PresetArg,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and mean certified radius.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: String,
    },
    /// Per-sample certification CSV.
    Certify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: String,
        /// Comma-separated radii.
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Audit every layer, the head and the model gradient; exits 1 on any violation.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// Random inputs for the unit-gradient audit.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Boundary-distance oracle and certified-margin ratio CSV.
    Oracle {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum)]
        method: OracleArg,
        /// Keep iterates inside [0, 1]^n.
        #[arg(long = "box")]
        box_constraint: bool,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Certified accuracy against ε.
    Curve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: String,
        /// `lo:hi:count`, inclusive, evenly spaced.
        #[arg(long, default_value = "0:1:11")]
        eps_range: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Grid of `(x, y, f_l − f_s, k̂)` for a two-input model.
    Contour {
        #[command(flatten)]
        model: ModelArgs,
        /// Points per axis.
        #[arg(long, default_value_t = 101)]
        grid: usize,
        /// `lo,hi` on both axes.
        #[arg(long, default_value = "-2,2", allow_hyphen_values = true)]
        range: String,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init {
            config,
            data,
            out,
            preset,
        } => commands::init(&config, &data, &out, preset),
        Command::Train {
            config,
            data,
            out,
            preset,
            seed,
        } => commands::train(config.as_deref(), &data, &out, preset, seed),
        Command::Eval { model, data } => commands::eval(&model, &data),
        Command::Certify { model, data, eps, out } => commands::certify(&model, &data, &eps, &out),
        Command::Verify { model, samples, seed } => commands::verify(&model, samples, seed),
        Command::Oracle {
            model,
            data,
            method,
            box_constraint,
            limit,
            out,
        } => commands::oracle(&model, &data, method, box_constraint, limit, &out),
        Command::Curve {
            model,
            data,
            eps_range,
            out,
        } => commands::curve(&model, &data, &eps_range, &out),
        Command::Contour {
            model,
            grid,
            range,
            out,
        } => commands::contour(&model, grid, &range, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
