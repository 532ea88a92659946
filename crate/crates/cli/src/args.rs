use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Property-conditioned molecule generation workflow.
#[derive(Debug, Parser)]
#[command(name = "cmg", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic property table built from scaffold families.
    Synth(SynthArgs),
    /// Exclude holdout molecules, mine similar pairs, sample SimNet pairs and split.
    Curate(CurateArgs),
    /// Pre-train the property network on a property table.
    PretrainPropnet(PretrainPropnetArgs),
    /// Pre-train the similarity network on labeled pairs.
    PretrainSimnet(PretrainSimnetArgs),
    /// Train the translator with frozen constraint networks.
    Train(TrainArgs),
    /// Generate molecules for each input under a property target.
    Generate(GenerateArgs),
    /// Score a generation file.
    Evaluate(EvaluateArgs),
    /// Merge metric files into one table and a text summary.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Property table (`smiles plogp qed drd2`).
    #[arg(long)]
    pub molecules: PathBuf,
    /// Treat `--molecules` as a bare SMILES list and score it with the surrogates.
    #[arg(long)]
    pub surrogate: bool,
    /// Molecule lists to exclude (first column is the SMILES).
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainPropnetArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss table.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainSimnetArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub propnet: PathBuf,
    #[arg(long)]
    pub simnet: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Use only the first N training pairs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One SMILES per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Per-property rule, e.g. `plogp+1,qed=keep,drd2=0.6`.
    #[arg(long, default_value = "plogp=keep,qed=keep,drd2=keep")]
    pub target: String,
    /// Jittered targets per input.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Jitter scale: one value or one per property.
    #[arg(long, default_value = "0")]
    pub sigma: String,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long)]
    pub length_normalize: bool,
    /// Property table for input molecules; surrogates are used otherwise.
    #[arg(long)]
    pub properties: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Soo,
    Moo,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generation: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::All)]
    pub mode: EvalMode,
    /// Property table; surrogates are used otherwise.
    #[arg(long)]
    pub properties: Option<PathBuf>,
    /// Drop inputs without a valid similar output instead of counting them as 0.
    #[arg(long)]
    pub drop_empty: bool,
    /// Metric table output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metric tables written by `evaluate`.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Training loss tables to summarize.
    #[arg(long, num_args = 1..)]
    pub training: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}
