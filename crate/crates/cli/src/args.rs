use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(name = "pairforge", version, about = "Match pair retrieval toolkit: annotation, mining, training and retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,

    /// Print the resolved invocation as JSON and exit.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub dump_config: bool,

    /// Run an invocation previously written by --dump-config.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GlobalOptions {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Worker thread hint; PAIRFORGE_THREADS overrides it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Single-threaded reductions for bit-identical output.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Compute positive lists from a reconstruction.
    Annotate(AnnotateArgs),
    /// Build the weighted view graph.
    Graph(GraphArgs),
    /// Partition a view graph by normalized cut.
    Partition(PartitionArgs),
    /// Mine training batches.
    Mine(MineArgs),
    /// Train an aggregation head.
    Train(TrainArgs),
    /// Compute global descriptors.
    Embed(EmbedArgs),
    /// Build an approximate nearest-neighbor index.
    Index(IndexArgs),
    /// Retrieve candidate pairs.
    Retrieve(RetrieveArgs),
    /// Score retrieved pairs against verified matches.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    pub scenes: usize,
    /// Camera lattice per scene, as ROWSxCOLS.
    #[arg(long, default_value = "4x4")]
    pub grid: String,
    #[arg(long, default_value_t = 0.6)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per lattice cell of covered ground.
    #[arg(long, default_value_t = 60)]
    pub points_per_cell: usize,
    /// Feature-map channels and descriptor dimension.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long, default_value_t = pairforge::annotate::DEFAULT_EPSILON)]
    pub epsilon: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GraphArgs {
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    /// Inlier-vs-overlap weighting in [0, 1].
    #[arg(long, default_value_t = pairforge::viewgraph::DEFAULT_R_EW)]
    pub rew: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PartitionArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = pairforge::viewgraph::DEFAULT_MAX_CLUSTER_SIZE)]
    pub max_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Batched,
    GlobalHard,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MineArgs {
    #[arg(long)]
    pub poslists: PathBuf,
    /// Reconstruction the positive lists were computed from.
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Batched)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    pub b: usize,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 2000)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Descriptor file consulted by global-hard mining.
    #[arg(long)]
    pub desc: Option<PathBuf>,
    /// Epochs to mine; global-hard mining refreshes descriptors per epoch.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    Netvlad,
    Gem,
    Max,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Triplet,
    Rll,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub batches: PathBuf,
    /// Directory of feature maps, or a descriptor file for the linear head.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Reconstruction mapping batch image ids to input names.
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long, value_enum)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = LossArg::Rll)]
    pub loss: LossArg,
    #[arg(long, default_value_t = pairforge::losses::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = pairforge::losses::DEFAULT_MARGIN)]
    pub margin: f64,
    /// Average over every term instead of the active ones only.
    #[arg(long)]
    pub all_terms: bool,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// NetVLAD codebook size.
    #[arg(long, default_value_t = pairforge::aggregate::DEFAULT_CLUSTERS)]
    pub clusters: usize,
    /// NetVLAD soft-assignment sharpness.
    #[arg(long, default_value_t = pairforge::aggregate::DEFAULT_SHARPNESS)]
    pub sharpness: f64,
    /// Continue from a checkpoint written with the same settings.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Metrics log; records go to stdout when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EmbedArgs {
    /// Directory of feature maps, or a descriptor file for the linear head.
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, value_enum)]
    pub head: HeadArg,
    /// Parameters file or training checkpoint; defaults to an untrained head.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Codebook size when initializing NetVLAD without parameters.
    #[arg(long, default_value_t = pairforge::aggregate::DEFAULT_CLUSTERS)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the head's parameters file.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long, default_value_t = pairforge::retrieval::DEFAULT_M)]
    pub m: usize,
    #[arg(long, default_value_t = pairforge::retrieval::DEFAULT_EF_CONSTRUCTION)]
    pub ef_construction: usize,
    #[arg(long, default_value_t = pairforge::retrieval::DEFAULT_EF_SEARCH)]
    pub ef_search: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RetrieveArgs {
    /// Index file; exhaustive search over --desc when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long, default_value_t = pairforge::retrieval::DEFAULT_RETRIEVAL_NUMBER)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub matches: PathBuf,
    /// Reconstruction naming the images of the matches file.
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long, default_value_t = pairforge::retrieval::DEFAULT_INLIER_THRESHOLD)]
    pub inlier_threshold: usize,
}
