use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdpn_core::losses::RegularizerKind;
use sdpn_core::scoring::NormMethod;

#[derive(Debug, Parser)]
#[command(name = "sdpn", version, about = "Self-distillation speaker embeddings: train, embed, score, evaluate")]
pub struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true, env = "SDPN_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, held-out cohort and trial list.
    GenData(GenDataArgs),
    /// Train the teacher-student model.
    Train(TrainArgs),
    /// Extract one embedding per utterance.
    Embed(EmbedArgs),
    /// Score trials, optionally with cohort normalization.
    Score(ScoreArgs),
    /// Like `score`, but a normalization method is required (default: as).
    Normalize(ScoreArgs),
    /// Compute EER and minDCF for a scores file.
    Eval(EvalArgs),
    /// Check analytic gradients and the other oracle cases.
    GradCheck(GradCheckArgs),
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub utts_per_speaker: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegularizerArg {
    None,
    #[value(alias = "off_diagonal")]
    OffDiagonal,
    Frobenius,
}

impl From<RegularizerArg> for RegularizerKind {
    fn from(r: RegularizerArg) -> Self {
        match r {
            RegularizerArg::None => RegularizerKind::None,
            RegularizerArg::OffDiagonal => RegularizerKind::OffDiagonal,
            RegularizerArg::Frobenius => RegularizerKind::Frobenius,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation; `--resume` continues.
    #[arg(long, value_name = "EPOCHS")]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Branch {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Repeat to embed several manifests into one store.
    #[arg(long, value_name = "FILE", required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "teacher")]
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cosine,
    Z,
    T,
    S,
    As,
}

impl From<MethodArg> for NormMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cosine => NormMethod::Cosine,
            MethodArg::Z => NormMethod::Z,
            MethodArg::T => NormMethod::T,
            MethodArg::S => NormMethod::S,
            MethodArg::As => NormMethod::As,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub trials: PathBuf,
    /// Manifest whose utterance ids form the cohort.
    #[arg(long, value_name = "FILE")]
    pub cohort: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Drop cohort utterances that occur in the trials instead of failing.
    #[arg(long)]
    pub drop_overlap: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub trials: PathBuf,
    #[arg(long)]
    pub p_target: Option<f64>,
    #[arg(long)]
    pub c_miss: Option<f64>,
    #[arg(long)]
    pub c_fa: Option<f64>,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Restrict to one loss: ce, re, odr, fdr or composite.
    #[arg(long)]
    pub loss: Option<String>,
    /// Run every oracle case, not just the gradient checks.
    #[arg(long)]
    pub all: bool,
    /// Instances per case.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub min_rows: usize,
    #[arg(long, default_value_t = 16)]
    pub max_rows: usize,
    #[arg(long, default_value_t = 3)]
    pub min_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub max_dim: usize,
    /// JSON-lines report destination.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}
