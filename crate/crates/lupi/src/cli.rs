//! `lupi` command line: `gen`, `train`, `eval`, `actmap`, `report`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
//! standard error; results go to files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lupi_core::metrics::activation_maps;
use lupi_core::synth::{Dataset, Manifest};
use lupi_core::train::{taps, TrainConfig};
use lupi_core::Sample;

use crate::error::{Error, Result};
use crate::eval::{check_compatible, evaluate, metric_rows, modality_of, Grids, METRIC_HEADER};
use crate::{checkpoint, experiment, formats, report};

#[derive(Debug, Parser)]
#[command(
    name = "lupi",
    version,
    about = "Privileged-information training for pose regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset manifest (and optionally raw sample dumps).
    Gen(GenArgs),
    /// Run the two-stage experiment into a directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export activation maps of a checkpoint as PGM images.
    Actmap(ActmapArgs),
    /// Compare baseline, PI student and teacher of a finished experiment.
    Report(ReportArgs),
}

/// Config file plus the overrides shared by `gen` and `train`.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file whose keys mirror the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => formats::read_json(p)?,
            None => TrainConfig::default(),
        };
        if let Some(n) = self.n {
            cfg.n_samples = n;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Split seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also dump every sample as raw f64 planes and PGM previews.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Weight-init and batch-order seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mask_proportion: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Checkpoint and data shared by `eval` and `actmap`.
#[derive(Debug, Args)]
struct ModelData {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Require the checkpoint to match this profile.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    io: ModelData,
}

#[derive(Debug, Args)]
struct ActmapArgs {
    #[command(flatten)]
    io: ModelData,
    /// Number of samples to export, from the start of the split.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Experiment directory written by `train`.
    #[arg(long)]
    experiment: PathBuf,
    /// Output directory; defaults to the experiment directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // Help and version go to stdout, usage errors to stderr.
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Actmap(a) => actmap(a),
        Command::Report(a) => {
            report::write_report(&a.experiment, a.out.as_deref().unwrap_or(&a.experiment))
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.data_seed = s;
    }
    let manifest = Manifest::new(cfg.n_samples, cfg.skeleton.clone(), cfg.data_seed)?;
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    formats::save_manifest(&a.out.join("manifest.json"), &manifest)?;
    if a.raw {
        formats::export_raw(&a.out.join("raw"), &manifest.generate()?)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.profile {
        cfg.profile = p;
    }
    if let Some(l) = a.lambda {
        cfg.weights.lambda = l;
    }
    if let Some(m) = a.mask_proportion {
        cfg.weights.mask_proportion = m;
    }
    experiment::run_experiment(&cfg, &a.out).map(|_| ())
}

/// Loads the checkpoint and the requested split, checking they fit together.
fn load_model_data(io: &ModelData) -> Result<(lupi_core::Network, Manifest, Vec<Sample>)> {
    let net = checkpoint::load(&io.checkpoint)?;
    if let Some(name) = &io.profile {
        let expected =
            lupi_core::model::profile(name)?.with_input_channels(net.spec().input_shape[0]);
        if expected != *net.spec() {
            return Err(lupi_core::Error::InvalidShape(format!(
                "checkpoint {} does not have the `{name}` layout",
                io.checkpoint.display()
            ))
            .into());
        }
    }
    let manifest = formats::load_manifest(&io.data)?;
    let Dataset { train, test } = manifest.generate()?;
    let samples = match io.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    check_compatible(net.spec(), &samples)?;
    Ok((net, manifest, samples))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (net, manifest, samples) = load_model_data(&a.io)?;
    let e = evaluate(&net, &samples, &manifest.skeleton_config, &Grids::default())?;
    std::fs::create_dir_all(&a.io.out).map_err(Error::io(&a.io.out))?;
    let name = model_name(&a.io.checkpoint);
    formats::write_csv(
        &a.io.out.join("metrics.csv"),
        &METRIC_HEADER,
        metric_rows(&name, &e),
    )?;
    formats::write_json(&a.io.out.join("metrics.json"), &e)
}

fn actmap(a: ActmapArgs) -> Result<()> {
    let (net, _, samples) = load_model_data(&a.io)?;
    let shown = &samples[..a.count.min(samples.len())];
    std::fs::create_dir_all(&a.io.out).map_err(Error::io(&a.io.out))?;
    let name = model_name(&a.io.checkpoint);
    if shown.is_empty() {
        return Ok(());
    }
    for (i, img) in activation_maps(&taps(&net, shown, modality_of(net.spec()))?)?
        .iter()
        .enumerate()
    {
        formats::write_pgm(&a.io.out.join(format!("{name}_{i:03}.pgm")), img)?;
    }
    Ok(())
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}
