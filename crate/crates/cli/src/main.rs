// SPDX-License-Identifier: MIT OR Apache-2.0

//! `dave`: attribution maps, metrics and diagnostics for ViT weight files.
//!
//! Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
//! `DAVE_THREADS` sets the worker count (unset or 0 means one per core).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dave_core::{DaveParams, Method, NoiseScheme, TransformDistribution};

#[derive(Parser, Debug)]
#[command(name = "dave", version, about = "Attribution for Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute an attribution map and render it as a heatmap.
    Attribute(AttributeArgs),
    /// Score attribution maps over a manifest of images.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
    /// Stability diagnostics for one image.
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
    /// Write a synthetic weight file.
    Genmodel(GenmodelArgs),
    /// Print a weight file's config and tensors.
    Inspect(InspectArgs),
    /// Print the logits for an image as CSV.
    Logits(LogitsArgs),
}

#[derive(Args, Debug)]
struct ModelImage {
    #[arg(long)]
    model: PathBuf,
    /// Binary PPM with the model's input size.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TransformArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotation angles are drawn from (−A, A) degrees.
    #[arg(long, default_value_t = 20.0)]
    angle_range: f64,
    /// Shifts are drawn from (−f·size, f·size) pixels.
    #[arg(long, default_value_t = 0.1)]
    shift_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
    /// `none`, `additive:SIGMA` or `vp:TMAX`.
    #[arg(long, default_value = "vp:0.5", value_parser = parse_noise)]
    noise: NoiseScheme,
}

impl TransformArgs {
    fn dist(&self) -> TransformDistribution {
        TransformDistribution {
            flip_prob: self.flip_prob,
            angle_range: self.angle_range,
            shift_frac: self.shift_frac,
        }
    }

    fn dave(&self, samples: usize) -> DaveParams {
        DaveParams {
            samples,
            dist: self.dist(),
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Dave)]
    method: MethodArg,
    /// Samples for dave, equivariant and smoothgrad.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[command(flatten)]
    transform: TransformArgs,
    /// Noise level for smoothgrad, in model input units.
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Riemann steps for intgrad.
    #[arg(long, default_value_t = 32)]
    ig_steps: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MethodArg {
    Dave,
    Effective,
    Equivariant,
    Ixg,
    Smoothgrad,
    Intgrad,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Dave => Method::Dave,
            MethodArg::Effective => Method::Effective,
            MethodArg::Equivariant => Method::Equivariant,
            MethodArg::Ixg => Method::InputXGradient,
            MethodArg::Smoothgrad => Method::SmoothGrad,
            MethodArg::Intgrad => Method::IntGrad,
        }
    }
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    input: ModelImage,
    #[arg(long)]
    class: usize,
    #[command(flatten)]
    method: MethodArgs,
    /// Heatmap output (PPM).
    #[arg(long)]
    out: PathBuf,
    /// Raw `[3, H, W]` map output (DAVEMAP1).
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum EvaluateCommand {
    /// Localization on 2×2 grids of four consecutive manifest records.
    Gridpg(EvaluateArgs),
    /// Positive attribution mass inside each record's boxes.
    Energypg(EvaluateArgs),
    /// Class probability as the top-ranked pixels are zeroed.
    Deletion {
        #[command(flatten)]
        args: EvaluateArgs,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
}

#[derive(Subcommand, Debug)]
enum DiagnoseCommand {
    /// L1 change of the running DAVE mean as samples are added.
    Convergence {
        #[command(flatten)]
        input: ModelImage,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 100)]
        max_samples: usize,
        #[command(flatten)]
        transform: TransformArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Change in class probability under rotation.
    Rotation {
        #[command(flatten)]
        input: ModelImage,
        #[arg(long)]
        class: usize,
        /// Comma-separated degrees.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_value = "-20,-15,-10,-5,0,5,10,15,20"
        )]
        angles: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median change in class probability under Gaussian noise.
    Noise {
        #[command(flatten)]
        input: ModelImage,
        #[arg(long)]
        class: usize,
        /// Comma-separated noise levels in model input units.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Preset {
    /// Small randomly initialized ViT.
    TinyRandom,
    /// Hand-built quadrant detector with known class evidence.
    Detector,
}

#[derive(Args, Debug)]
struct GenmodelArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct LogitsArgs {
    #[command(flatten)]
    input: ModelImage,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_noise(s: &str) -> std::result::Result<NoiseScheme, String> {
    NoiseScheme::parse(s).map_err(|e| e.to_string())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DAVE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("DAVE_THREADS must be a non-negative integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Attribute(a) => commands::attribute(&a),
        Command::Evaluate(e) => commands::evaluate(&e),
        Command::Diagnose(d) => commands::diagnose(&d),
        Command::Genmodel(g) => commands::genmodel(&g),
        Command::Inspect(i) => commands::inspect(&i),
        Command::Logits(l) => commands::logits(&l),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
