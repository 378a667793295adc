//! `rlvr`: pool generation, few-shot sampling, warm-start pretraining, GRPO
//! training, evaluation, β ablations and metric plots.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (bad flags, invalid config, refusing to overwrite)
  3  missing input (file or checkpoint directory not found or empty)
  4  integrity failure (corrupted checkpoint, unparseable record)
  5  numeric failure (non-finite loss or gradient)

Environment:
  RLVR_OUT  root for default output paths (default: ./runs)";

#[derive(Parser, Debug)]
#[command(name = "rlvr", version, about = "Few-shot RLVR on a toy vision-language task family", after_help = EXIT_HELP)]
pub struct Cli {
    /// Upper bound on worker threads for sampling and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a seeded pool of samples.
    GenPool(GenPoolArgs),
    /// Draw a few-shot dataset from a pool and duplicate it to the batch size.
    SampleFewshot(SampleArgs),
    /// Supervised warm start producing a base policy checkpoint.
    Pretrain(PretrainArgs),
    /// GRPO training from a base policy.
    Train(TrainArgs),
    /// Evaluate one checkpoint or sweep a checkpoint directory.
    Eval(EvalArgs),
    /// Side-by-side table of saved evaluation reports.
    Compare(CompareArgs),
    /// Paired-seed training runs for each β with a comparison table and curves.
    AblateBeta(AblateArgs),
    /// Render metrics files to an SVG chart and a data table.
    Plot(PlotArgs),
    /// Re-run the invocation recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct GenPoolArgs {
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict the pool to one task kind (VQA, CLS or VG).
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Named mix such as pi8VC; overrides the per-kind counts.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub vqa: usize,
    #[arg(long, default_value_t = 0)]
    pub cls: usize,
    #[arg(long, default_value_t = 0)]
    pub vg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PolicyShape {
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML warm-start settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shape: PolicyShape,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    /// Write 0 in the wall_ms column so metrics are byte-reproducible.
    #[arg(long)]
    pub no_wall_time: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Base policy checkpoint; a freshly initialised policy when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// TOML training config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting at step 0.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalOpts {
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub eval_temperature: f64,
    #[arg(long, default_value_t = 64)]
    pub eval_max_new_tokens: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of step_N.ckpt files to sweep.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    pub ckpt_dir: Option<PathBuf>,
    /// A single checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub eval_set: PathBuf,
    #[command(flatten)]
    pub opts: EvalOpts,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// `label=path` to a saved report; the first is the baseline.
    #[arg(long = "report", required = true)]
    pub reports: Vec<String>,
    /// Output prefix; writes `<prefix>.txt` and `<prefix>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.04")]
    pub betas: Vec<f64>,
    /// Number of paired seeds, starting at the configured seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Rows at the end of each run averaged in the table.
    #[arg(long, default_value_t = 100)]
    pub tail: usize,
    /// Optional held-out set scored at each run's final checkpoint.
    #[arg(long)]
    pub eval_set: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long = "metrics", required = true)]
    pub metrics: Vec<PathBuf>,
    /// One label per metrics file; defaults to the parent directory name.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    match commands::run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
