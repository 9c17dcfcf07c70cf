use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prkt_core::model::HeadKind;
use prkt_core::retrieval::RerankParams;

#[derive(Debug, Parser)]
#[command(name = "prkt", version, about = "Line-drawing retrieval: generate, train, embed, evaluate, search, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic drawing benchmark to PNGs plus a manifest.
    Gen(GenArgs),
    /// Write a complete training config for a preset.
    Config(ConfigArgs),
    /// Train a model; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// Embed a manifest split into a PEMB file.
    Embed(EmbedArgs),
    /// Leave-one-out mAP and Rank-1/5/20 over an embedding file.
    Eval(EvalArgs),
    /// Rank the gallery against a query image.
    Search(SearchArgs),
    /// Serve the search API and web UI.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 200)]
    pub ids: usize,
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Fraction of IDs held out for validation; 0 puts everything in train.
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Toy,
    Full,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Full => "full",
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Head {
    Arcface,
    Softmax,
}

impl From<Head> for HeadKind {
    fn from(h: Head) -> Self {
        match h {
            Head::Arcface => HeadKind::ArcFace,
            Head::Softmax => HeadKind::Softmax,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; flags below override it.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Final checkpoint path; the best-validation one goes next to it as `*.best.prkt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub head: Option<Head>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Ablation: train with random resized crops.
    #[arg(long)]
    pub random_resized_crop: bool,
    /// Ablation: random rotation within this many degrees.
    #[arg(long)]
    pub random_rotation: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct RerankArgs {
    /// Apply k-reciprocal re-ranking.
    #[arg(long)]
    pub rerank: bool,
    #[arg(long, default_value_t = RerankParams::default().k1)]
    pub k1: usize,
    #[arg(long, default_value_t = RerankParams::default().k2)]
    pub k2: usize,
    #[arg(long, default_value_t = RerankParams::default().lambda)]
    pub lambda: f64,
}

impl RerankArgs {
    pub fn params(&self) -> RerankParams {
        RerankParams {
            k1: self.k1,
            k2: self.k2,
            lambda: self.lambda,
        }
    }

    pub fn enabled(&self) -> Option<RerankParams> {
        self.rerank.then(|| self.params())
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub rerank: RerankArgs,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print a text table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub rerank: RerankArgs,
    /// Directory that gallery image paths are relative to.
    #[arg(long, default_value = ".")]
    pub image_root: PathBuf,
    /// Write an HTML gallery of the results.
    #[arg(long)]
    pub html: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = ".")]
    pub image_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Result count when a request does not give one.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Re-ranking parameters; `--rerank` makes it the default for requests.
    #[command(flatten)]
    pub rerank: RerankArgs,
}
