//! `rhzn`: scaling reports, coverage reports, toy training, NIAH grids,
//! NLL sweeps and Q/K probes. All outputs are CSV/JSON plot data.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rhzn_core::Error;

#[derive(Parser, Debug)]
#[command(name = "rhzn", version, about = "RoPE long-context analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Critical dimension and NTK scaling factors for target lengths.
    Scale(ScaleArgs),
    /// Per-plane phase coverage of the trained relative-position range.
    Coverage(CoverageArgs),
    /// Generate a synthetic training/evaluation corpus.
    Corpus(CorpusArgs),
    /// Train a toy model and write a checkpoint plus loss curve.
    Train(TrainArgs),
    /// Needle-in-a-haystack grid over context length and depth.
    Niah(NiahArgs),
    /// Per-token NLL across context lengths.
    Ppl(PplArgs),
    /// Capture Q/K states, project to 2D and report the shift statistic.
    Probe(ProbeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RopeArgs {
    /// RopeConfig JSON file; inline flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Head dimension.
    #[arg(long)]
    pub d: Option<usize>,
    /// Rotary base.
    #[arg(long)]
    pub base: Option<f64>,
    /// Pretrained context length.
    #[arg(long)]
    pub train_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    #[command(flatten)]
    pub rope: RopeArgs,
    /// Comma-separated target context lengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<usize>,
    /// Output directory for scaling.json and scaling.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub rope: RopeArgs,
    /// causal | bidirectional
    #[arg(long)]
    pub mode: String,
    /// CSV output path; metadata goes to `<out>.json`.
    #[arg(long, default_value = "coverage.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// CorpusSpec JSON; defaults to the built-in toy corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// ModelConfig JSON; otherwise the toy preset for --mode.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// causal | mdlm (used when neither --config nor --init is given)
    #[arg(long)]
    pub mode: Option<String>,
    /// Rotary base override for the toy preset.
    #[arg(long)]
    pub base: Option<f64>,
    /// Continue from this checkpoint (its config wins; optimizer state
    /// starts fresh).
    #[arg(long, conflicts_with_all = ["config", "mode", "base"])]
    pub init: Option<PathBuf>,
    /// Corpus file (one sequence per line); otherwise generated.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// CorpusSpec JSON used when no --corpus file is given.
    #[arg(long)]
    pub corpus_spec: Option<PathBuf>,
    /// TrainHyper JSON; flags below override it.
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-example gradients.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Checkpoint output path; the loss curve goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NiahArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// NiahSpec JSON; defaults to the toy grid.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// NTK base scaling factor (>= 1) injected into the rotary table.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sampling steps per block.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub block_len: usize,
    /// low_confidence | random
    #[arg(long, default_value = "low_confidence")]
    pub remasking: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Heatmap CSV path; sidecars go to `<out>.json` and `<out>.window.json`.
    #[arg(long, default_value = "niah.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PplArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Context lengths to evaluate; defaults to multiples of train_len.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Held-out text kind: repetition | kv
    #[arg(long, default_value = "repetition")]
    pub text: String,
    /// Held-out sequences per length.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Monte-Carlo draws per sequence for masked-diffusion models.
    #[arg(long, default_value_t = 16)]
    pub mc_samples: usize,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "ppl.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input length; defaults to 2 x train_len.
    #[arg(long)]
    pub len: Option<usize>,
    /// Layer to capture; defaults to the last.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Boundary position; defaults to train_len.
    #[arg(long)]
    pub boundary: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Projection CSV path; the summary goes to `<out>.json`.
    #[arg(long, default_value = "probe.csv")]
    pub out: PathBuf,
}

/// Exit codes: 0 ok, 2 usage, 3 data/file, 4 numeric/config.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: m.into(),
        }
    }

    pub fn file(m: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: m.into(),
        }
    }

    pub fn config(m: impl Into<String>) -> Self {
        CliError {
            code: 4,
            message: m.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_data() { 3 } else { 4 };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Scale(a) => commands::scale(a),
        Command::Coverage(a) => commands::coverage(a),
        Command::Corpus(a) => commands::corpus(a),
        Command::Train(a) => commands::train(a),
        Command::Niah(a) => commands::niah(a),
        Command::Ppl(a) => commands::ppl(a),
        Command::Probe(a) => commands::probe(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
