use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod failure;

use failure::Failure;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (missing or malformed flag)
  3  i/o error (missing or unwritable file)
  4  malformed input file (parse, image or binary format error)
  5  configuration or dimension mismatch
  6  validation failure or unknown id
  7  training diverged

Errors are printed to stderr as one line:
  error kind=<kind> code=<n> msg=\"...\"";

#[derive(Parser, Debug)]
#[command(name = "dse", version, about = "Screenshot retrieval pipeline", after_help = EXIT_CODES)]
pub struct Cli {
    /// Seed for every randomised step. Overrides seeds in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with `encoder`, `training`, `bm25`, `synth`, `alpha`,
    /// `pool_k` and `k` sections. Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic screenshot corpus with planted answers.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Mine training examples (positive + BM25 hard negatives).
    #[command(after_help = EXIT_CODES)]
    Mine(MineArgs),
    /// Train the encoder contrastively and write a checkpoint.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Encode corpus screenshots into an embeddings JSONL file.
    #[command(after_help = EXIT_CODES)]
    Encode(EncodeArgs),
    /// Build a flat index file from embeddings.
    #[command(after_help = EXIT_CODES)]
    Index(IndexArgs),
    /// Encode queries and search an index; writes a TREC run file.
    #[command(after_help = EXIT_CODES)]
    Search(SearchArgs),
    /// BM25 retrieval over the corpus text mirrors; writes a TREC run file.
    #[command(after_help = EXIT_CODES)]
    Bm25(Bm25Args),
    /// Score a run file: top-k answer accuracy, plus nDCG/recall with qrels.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Interpolate a dense and a lexical run.
    #[command(after_help = EXIT_CODES)]
    Fuse(FuseArgs),
    /// Time document encoding across crop grids.
    #[command(after_help = EXIT_CODES)]
    Throughput(ThroughputArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub train_queries: Option<usize>,
    #[arg(long, alias = "queries")]
    pub test_queries: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    /// Corpus manifest (corpus.jsonl).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// BM25 depth for the hard-negative pool.
    #[arg(long)]
    pub k: Option<usize>,
    /// Training examples JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the union of every query's top-k doc ids, one per line.
    #[arg(long)]
    pub pool_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step loss CSV (`epoch,step,loss`).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hard_negs: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub cx: Option<usize>,
    #[arg(long)]
    pub cy: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Embeddings JSONL (`{"doc_id": ..., "embedding": [...]}` per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "dense")]
    pub tag: String,
}

#[derive(Args, Debug)]
pub struct Bm25Args {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long, default_value = "bm25")]
    pub tag: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Corpus manifest; its text mirrors decide answer containment.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Optional qrels for nDCG and recall.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,100")]
    pub ks: Vec<usize>,
    /// Cutoff for nDCG and recall.
    #[arg(long, default_value_t = 10)]
    pub judged_k: usize,
    /// Per-query accuracy CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-query nDCG/recall CSV (needs --qrels).
    #[arg(long)]
    pub judged_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub lexical: PathBuf,
    /// Weight of the dense run, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Each run is normalised over its top pool-k entries.
    #[arg(long)]
    pub pool_k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "fused")]
    pub tag: String,
}

#[derive(Args, Debug)]
pub struct ThroughputArgs {
    /// Corpus manifest to sample from; synthetic renders when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub sample: usize,
    /// Crop grids as CXxCY.
    #[arg(long, value_delimiter = ',', default_value = "1x1,2x2,3x3,4x4")]
    pub grids: Vec<String>,
    /// Use pixel sizes of the toy encoder instead of the canonical ones.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 4)]
    pub warmup: usize,
    /// CSV report (`cx,cy,docs_per_second,latent_embeddings,seconds`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(path, e))
}

pub(crate) fn finish(mut w: impl Write, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::io(path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return Failure::usage_from_clap(&e).report();
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
