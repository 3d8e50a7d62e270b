use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use fiwkit::quant::ScaleRule;

#[derive(Parser, Debug)]
#[command(
    name = "fiwkit",
    version,
    about = "Low-bit quantisation, integer-width analysis and simulated HE inference"
)]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a float baseline or a QAT network.
    Train(TrainArgs),
    /// Quantise a float checkpoint to integer weights.
    Ptq(PtqArgs),
    /// Measure the final integer width of an integer network.
    Fiw(FiwArgs),
    /// Choose RNS plaintext moduli for a FIW.
    Params(ParamsArgs),
    /// Run one image through simulated encrypted inference.
    InferHe(InferHeArgs),
    /// Summarise stored run artifacts into one table.
    Report(ReportArgs),
}

fn rule_parser() -> impl TypedValueParser<Value = ScaleRule> {
    PossibleValuesParser::new(["unit", "max_abs", "range"])
        .map(|s| s.parse().expect("listed value"))
}

/// One labeled dataset: MNIST IDX files, CIFAR-10 batches, or a directory
/// holding either.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long, requires = "data_labels")]
    pub data_images: Option<PathBuf>,
    #[arg(long, requires = "data_images")]
    pub data_labels: Option<PathBuf>,
    /// CIFAR-10 binary batch; repeat to concatenate.
    #[arg(long)]
    pub cifar_batch: Vec<PathBuf>,
    /// Directory with `*images*`/`*labels*` IDX files or `*.bin` CIFAR batches.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use a seeded random subset of this many samples.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TestDataArgs {
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_cifar_batch: Vec<PathBuf>,
    #[arg(long)]
    pub test_subset: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Architecture (or checkpoint) `.fiwnet.json`.
    #[arg(long)]
    pub net: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub test: TestDataArgs,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight bits for QAT; omit for a float baseline.
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, value_parser = rule_parser())]
    pub rule: Option<ScaleRule>,
    /// Input bits, overriding the architecture.
    #[arg(long)]
    pub b_in: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the epoch log goes next to it as `.log.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PtqArgs {
    /// Float checkpoint.
    #[arg(long)]
    pub net: PathBuf,
    #[arg(long)]
    pub bits: u32,
    #[arg(long, value_parser = rule_parser(), default_value = "max_abs")]
    pub rule: ScaleRule,
    /// Affine (unsigned, zero-point) weights instead of symmetric.
    #[arg(long)]
    pub affine: bool,
    /// Discard biases instead of quantising them.
    #[arg(long)]
    pub drop_bias: bool,
    /// Optional evaluation set for float and integer accuracy.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FiwArgs {
    /// Integer checkpoint.
    #[arg(long)]
    pub net: PathBuf,
    /// Samples for the empirical FIW; without data only the static bound is computed.
    #[command(flatten)]
    pub data: DataArgs,
    /// Also compute the static interval bound.
    #[arg(long = "static")]
    pub static_bound: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModulusArgs {
    /// Final integer width to cover.
    #[arg(long, conflicts_with = "fiw_report")]
    pub fiw: Option<u32>,
    /// Take the FIW from a `fiw` report.
    #[arg(long)]
    pub fiw_report: Option<PathBuf>,
    /// Maximum bits per plaintext modulus.
    #[arg(long, default_value_t = 60)]
    pub cap: u32,
    /// Slot count (polynomial degree).
    #[arg(long, default_value_t = 16384)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub modulus: ModulusArgs,
    /// Ciphertext modulus size to report; defaults by N where known.
    #[arg(long)]
    pub log_q: Option<u32>,
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long)]
    pub quantisation: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferHeArgs {
    /// Integer checkpoint.
    #[arg(long)]
    pub net: PathBuf,
    /// Parameters from `params`; otherwise chosen from --fiw/--fiw-report/--cap/--n.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[command(flatten)]
    pub modulus: ModulusArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Sample index within the (subset of the) dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Keep multiplications by all-zero plain vectors.
    #[arg(long)]
    pub no_skip: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Artifacts written by the other subcommands.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
