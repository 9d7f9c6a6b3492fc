mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ssgrn::network::Variant;

/// Spectral-spatial graph reasoning for hyperspectral pixel classification.
///
/// Every subcommand also takes `--config FILE` with `key = value` lines; flags
/// given on the command line override the file.
#[derive(Parser, Debug)]
#[command(name = "ssgrn", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scene as `<out>.cube` and `<out>.lab`.
    Synth(SynthArgs),
    /// Draw a per-class train/val/test split.
    Split(SplitArgs),
    /// Train a model and write a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Score a checkpoint on one subset of a split.
    Eval(EvalArgs),
    /// Write a color classification map (binary PPM).
    Predict(PredictArgs),
    /// Dump superpixels or affinity matrices of one forward pass.
    Inspect(InspectArgs),
    /// Print parameter and attention inner-product counts.
    Complexity(ComplexityArgs),
    /// Combine eval reports of repeated runs into mean and std.
    Aggregate(AggregateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    h: usize,
    #[arg(long, default_value_t = 48)]
    w: usize,
    #[arg(long, default_value_t = 12)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    labels: PathBuf,
    /// File of `<class> <train> <val>` lines. Classes not listed go to test.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Per-class train count when no counts file is given.
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    /// Per-class val count when no counts file is given.
    #[arg(long, default_value_t = 10)]
    val_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "ssgrn", value_parser = parse_variant)]
    model: Variant,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    power: f64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Spatial descriptor (superpixel) count `K`.
    #[arg(long, default_value_t = 256)]
    descriptors: usize,
    /// Spectral descriptor (band group) count `M`, capped at the last width.
    #[arg(long, default_value_t = 256)]
    spectral_descriptors: usize,
    /// Backbone widths, comma separated.
    #[arg(long, default_value = "64,128,256", value_parser = parse_widths)]
    widths: [usize; 3],
    /// Head hidden width; defaults to half the last backbone width.
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    slic_iters: Option<usize>,
    #[arg(long)]
    compactness: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    spectral_stride: Option<usize>,
    /// Class count; defaults to the largest label id.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "test")]
    subset: ssgrn::data::Subset,
    /// Pool superpixels with the hard assignment.
    #[arg(long)]
    hard_pool: bool,
    /// Metric report; the confusion matrix goes to `<report>.confusion.csv`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Paint only pixels labeled in this map; others stay black.
    #[arg(long)]
    mask_labels: Option<PathBuf>,
    #[arg(long)]
    hard_pool: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Artifact {
    Superpixels,
    SpatialAffinity,
    SpectralAffinity,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, value_enum)]
    what: Artifact,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[arg(long, default_value = "ssgrn", value_parser = parse_variant)]
    model: Variant,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    bands: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    descriptors: usize,
    #[arg(long, default_value_t = 256)]
    spectral_descriptors: usize,
    #[arg(long, default_value = "64,128,256", value_parser = parse_widths)]
    widths: [usize; 3],
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Eval reports.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: ssgrn::Error| e.to_string())
}

fn parse_widths(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad width list `{s}`: {e}"))?;
    v.try_into().map_err(|_| format!("expected three widths, got `{s}`"))
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(args: Vec<OsString>) -> anyhow::Result<ExitCode> {
    let args = config::expand_config(&Cli::command(), args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(ExitCode::SUCCESS);
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).collect();
            anyhow::bail!("{}", msg.join(" ").trim_start_matches("error:").trim());
        }
    };
    match cli.command {
        Command::Synth(a) => commands::synth(a)?,
        Command::Split(a) => commands::split(a)?,
        Command::Train(a) => commands::train(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Predict(a) => commands::predict(a)?,
        Command::Inspect(a) => commands::inspect(a)?,
        Command::Complexity(a) => commands::complexity(a)?,
        Command::Aggregate(a) => commands::aggregate(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(std::env::args_os().collect()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
