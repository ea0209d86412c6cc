mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "fewshot-ssl", version, about = "Few-shot learning with self-supervised auxiliary losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a jigsaw permutation set.
    Permset(PermsetArgs),
    /// Partition dataset classes into base / val / novel.
    Split(SplitArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint (meta-test or standard test accuracy).
    Eval(EvalArgs),
    /// Write the saliency map of one image as an 8-bit PNG.
    Saliency(SaliencyArgs),
    /// Collect run manifests below a directory into one table.
    Report(ReportArgs),
    /// Write the procedural texture dataset to disk.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PermsetArgs {
    #[arg(long, default_value_t = 9)]
    pub n: usize,
    #[arg(long, default_value_t = 35)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Score all n! candidates instead of sampled pools.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root; defaults to $FEWSHOT_SSL_DATA.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value = "2,1,1")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` applied on top of the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Defaults to the directory of the config file.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    MetaTest,
    Standard,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "meta-test")]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 5)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 16)]
    pub m_query: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset root; defaults to the training config, then $FEWSHOT_SSL_DATA.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Split file; defaults to the one recorded next to the checkpoint.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Report path; defaults to `<checkpoint dir>/eval_<protocol>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long = "class")]
    pub class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Permset(a) => commands::permset(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Report(a) => commands::report(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
