use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use xmrbench_core::bench::OcclusionMode;
use xmrbench_core::data::Section;
use xmrbench_core::report::ReportFormat;
use xmrbench_core::scoring::ScorerKind;
use xmrbench_core::toymodel::Objective;

#[derive(Debug, Parser)]
#[command(
    name = "xmrbench",
    version,
    about = "Occlusion robustness benchmark for image-to-text retrieval"
)]
pub struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Occlude one image and write it back in its own format.
    Occlude(OccludeArgs),
    /// Write a synthetic paired dataset (manifest + PNGs).
    ToyGen(ToyGenArgs),
    /// Train the toy dual encoder on synthetic studies.
    ToyTrain(ToyTrainArgs),
    /// Run the occlusion sweep and write a recall grid.
    Run(RunArgs),
    /// Print analytic (and optionally simulated) random-retrieval recall.
    RandomBaseline(BaselineArgs),
    /// Summarise an embedding file.
    InspectEmbeddings(InspectArgs),
    /// Serve a builtin embedder over the wire protocol on stdin/stdout.
    ServeEmbedder(ServeArgs),
    /// Run the wire-protocol conformance suite against an embedder command.
    Conformance(ConformanceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Cosine,
    Classifier,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Cosine => ScorerKind::Cosine,
            ScorerArg::Classifier => ScorerKind::Classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerImage,
    PerPair,
}

impl From<ModeArg> for OcclusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerImage => OcclusionMode::PerImage,
            ModeArg::PerPair => OcclusionMode::PerPair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Infonce,
    Triplet,
    Bce,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Infonce => Objective::InfoNce,
            ObjectiveArg::Triplet => Objective::Triplet,
            ObjectiveArg::Bce => Objective::Bce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SectionArg {
    History,
    Comparison,
    Findings,
    Impression,
}

impl From<SectionArg> for Section {
    fn from(s: SectionArg) -> Self {
        match s {
            SectionArg::History => Section::History,
            SectionArg::Comparison => Section::Comparison,
            SectionArg::Findings => Section::Findings,
            SectionArg::Impression => Section::Impression,
        }
    }
}

fn ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=100.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("ratio {v} outside [0, 100]"))
    }
}

fn unit_interval(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("{s:?} is not a positive integer")),
    }
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Base seed for every random draw.
    #[arg(long, env = "XMRBENCH_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OccludeArgs {
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    /// Occluded share of the image area, in percent.
    #[arg(long = "p", value_name = "RATIO", value_parser = ratio)]
    pub ratio: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub fill: f32,
    #[arg(long, value_name = "IMAGE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 200, value_parser = positive)]
    pub studies: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub image_side: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ToyGenArgs {
    #[command(flatten)]
    pub data: SyntheticArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Output directory; receives manifest.jsonl and images/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyTrainArgs {
    #[arg(long, value_enum, default_value = "infonce")]
    pub objective: ObjectiveArg,
    #[command(flatten)]
    pub data: SyntheticArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Step size (default depends on the objective).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub token_dim: usize,
    /// Classifier head width; defaults to 32 for bce, none otherwise.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, value_name = "PARAMS")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("model").required(true).args(["embedder", "toy_params"])))]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// random[:dim=N,seed=S] | oracle | toy:<params> | file:<images>,<reports> | process:<cmd>
    #[arg(long)]
    pub embedder: Option<String>,
    /// Shorthand for --embedder toy:<params>.
    #[arg(long, value_name = "PARAMS")]
    pub toy_params: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cosine")]
    pub scorer: ScorerArg,
    /// L2-normalize both embeddings before scoring.
    #[arg(long)]
    pub normalize: bool,
    /// Classifier head source (a toy params file with a head). Defaults to the toy embedder's own params.
    #[arg(long, value_name = "PARAMS")]
    pub head: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = ratio,
          default_value = "0,0.25,1,4,9,25,49,81")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "5,10,20,30,50,100")]
    pub k: Vec<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub trials: usize,
    #[arg(long, value_enum, default_value = "per-image")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub fill: f32,
    /// Report sections embedded as the candidate text.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "findings,impression")]
    pub sections: Vec<SectionArg>,
    /// Keep studies lacking Findings or Impression.
    #[arg(long)]
    pub no_filter: bool,
    /// Per-request timeout for external embedders, in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    /// Directory receiving one score-matrix CSV per ratio and trial.
    #[arg(long, value_name = "DIR")]
    pub dump_scores: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Output format (default: from the --out extension).
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Candidate reports.
    #[arg(long, value_parser = positive)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', value_parser = positive, default_value = "5,10,20,30,50,100")]
    pub k: Vec<usize>,
    /// Also run the Monte-Carlo simulation.
    #[arg(long)]
    pub mc: bool,
    #[arg(long, value_parser = positive, requires = "mc")]
    pub queries: Option<usize>,
    #[arg(long, default_value_t = 500, value_parser = positive)]
    pub trials: usize,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// How many ids to list.
    #[arg(long, default_value_t = 5)]
    pub head: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Builtin embedder spec (random, oracle, toy:<params>, file:<a>,<b>).
    #[arg(long)]
    pub embedder: String,
    /// Study ids for the oracle embedder.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    #[arg(long, default_value_t = 10)]
    pub timeout: u64,
    /// Embedder command line.
    #[arg(trailing_var_arg = true, required = true, num_args = 1..)]
    pub command: Vec<String>,
}
