//! `icrl`: synthesise data, pre-train, meta-train, evaluate and inspect
//! few-shot models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icrl_core::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "icrl",
    version,
    about = "Few-shot classification with instance-weighted class representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Whole-classifier pre-training of the backbone; writes a backbone checkpoint.
    Pretrain(RunArgs),
    /// Episodic meta-training; writes a model checkpoint and a metrics CSV.
    MetaTrain(RunArgs),
    /// Mean accuracy with a 95% confidence interval over sampled episodes.
    Eval(RunArgs),
    /// Significance weights of one episode's support instances as CSV.
    Inspect(InspectArgs),
    /// Writes a synthetic FSDS dataset.
    Synth(SynthArgs),
    /// Prints every config key with its default value.
    Defaults,
}

/// Flags shared by the training and evaluation commands. Each one overrides
/// the same key from `--config`.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// `key = value` config file; flags win over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classes per episode.
    #[arg(long)]
    n: Option<usize>,
    /// Support instances per class.
    #[arg(long)]
    k: Option<usize>,
    /// Query instances per class.
    #[arg(long)]
    m: Option<usize>,
    /// Episodes per epoch when training, episode count when evaluating.
    #[arg(long)]
    episodes: Option<usize>,
    /// Training epochs (pre-training epochs for `pretrain`).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Weighted class representations (`on`) or plain averaging (`off`).
    #[arg(long, value_parser = ["on", "off"])]
    airn: Option<String>,
    /// `full` or one of the ablations `model-1` .. `model-5`.
    #[arg(long)]
    pooling: Option<String>,
    /// Comma-separated subset of `cls,intra,inter`.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Meta-train without a pre-trained backbone.
    #[arg(long)]
    from_scratch: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Index of the evaluation episode to inspect.
    #[arg(long, default_value_t = 0)]
    episode: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    /// `other-class` or `uniform`.
    #[arg(long, default_value = "other-class")]
    outlier_rule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    /// Layers the config file, then the flags, onto `base`. `episodes_key` and
    /// `epochs_key` name the config keys `--episodes` and `--epochs` set for
    /// the running command.
    fn resolve(&self, mut base: RunConfig, episodes_key: &str, epochs_key: &str) -> Result<RunConfig, Error> {
        if let Some(p) = &self.config {
            base.apply_file(p)?;
        }
        let overrides: [(&str, Option<String>); 15] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("m", self.m.map(|v| v.to_string())),
            (episodes_key, self.episodes.map(|v| v.to_string())),
            (epochs_key, self.epochs.map(|v| v.to_string())),
            ("model.tau", self.tau.map(|v| v.to_string())),
            ("lambda1", self.lambda1.map(|v| v.to_string())),
            ("lambda2", self.lambda2.map(|v| v.to_string())),
            ("model.airn", self.airn.clone()),
            ("model.pooling", self.pooling.clone()),
            ("losses", self.losses.clone()),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                base.set(k, &v)?;
            }
        }
        base.finish()?;
        Ok(base)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::MetaTrain(a) => commands::meta_train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Synth(a) => commands::synth(a),
        Command::Defaults => {
            print!("{}", RunConfig::defaults_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if exit_code(&e) == 2 {
                eprintln!("run `icrl help` for usage");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
