use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use sedd_core::ingest::Split;
use sedd_core::run::{self, EmbeddingSet, RunConfig};
use sedd_core::toy::{self, ToySpec};
use sedd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sedd", version, about = "Style-embedding dataset profiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Pin the worker pool to one thread and mark the run deterministic.
    #[arg(long)]
    deterministic: bool,
    /// JSON-Lines manifest; repeat for several datasets. Replaces the config list.
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    /// Train/val/test ratios, e.g. 0.6,0.2,0.2.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split_ratios: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split and decode every manifest record.
    IngestCheck(CommonOnly),
    /// Train a style model and write checkpoint, log and reference embeddings.
    Train(TrainArgs),
    /// Score one dataset against a real reference.
    Profile(ProfileArgs),
    /// Score every configured dataset and write a sorted table.
    Benchmark(BenchmarkArgs),
    /// Dump flattened backbone feature maps per stage.
    ProbeLayers(ProbeArgs),
    /// t-SNE scatter of embedding files.
    Visualize(VisualizeArgs),
    /// Train over a temperature × lambda grid.
    Sweep(SweepArgs),
    /// Embed one split of every configured dataset with a checkpoint.
    Embed(EmbedArgs),
    /// Generate the procedural toy corpus.
    ToyCorpus(ToyArgs),
}

#[derive(Args)]
struct CommonOnly {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Also copy the checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    sample_per_dataset: usize,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Embedding files to plot together.
    #[arg(long = "embeddings", required = true)]
    embeddings: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    cap: usize,
    #[arg(long, default_value = "style embeddings")]
    title: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "0.010,0.015,0.030")]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0")]
    lambdas: Vec<f64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    scenes: usize,
    #[arg(long, default_value_t = 128)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if !common.manifests.is_empty() {
        cfg.manifests = common.manifests.clone();
    }
    if let Some(r) = &common.split_ratios {
        cfg.split_ratios = [r[0], r[1], r[2]];
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if cfg.deterministic {
        // already-built pools keep their size; only the first call matters
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("creating {}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))
}

/// Ok(false) means the command ran but some part of it failed.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::IngestCheck(a) => {
            let cfg = resolve(&a.common)?;
            let checks = run::ingest_check(&cfg)?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{}\tlabel {}\t{:?}\ttrain {}\tval {}\ttest {}\tdecode failures {}",
                    c.dataset_id,
                    c.class_label,
                    c.realism,
                    c.train,
                    c.val,
                    c.test,
                    c.failures.len()
                );
                for f in &c.failures {
                    eprintln!("  {f}");
                }
                ok &= c.failures.is_empty();
            }
            if !ok {
                return Err(Error::Validation("some records failed to decode".into()));
            }
            Ok(true)
        }
        Command::Train(a) => {
            let cfg = resolve(&a.common)?;
            let art = run::train_run(&cfg)?;
            if let Some(out) = &a.out {
                fs::copy(&art.checkpoint, out).map_err(|e| Error::Config(format!("copying checkpoint to {}: {e}", out.display())))?;
            }
            println!("checkpoint {}", art.checkpoint.display());
            println!("reference {}", art.reference.display());
            println!("log {}", art.log_path.display());
            println!("config {}", art.config_hash);
            Ok(true)
        }
        Command::Profile(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(b) = a.bandwidth {
                cfg.kernel.bandwidth = b;
            }
            let [manifest] = cfg.manifests.as_slice() else {
                return Err(Error::Validation("profile takes exactly one --manifest".into()));
            };
            let ckpt = run::load_checkpoint(&a.checkpoint)?;
            let reference = run::load_reference(&a.reference)?;
            let (report, _) = run::profile(&ckpt, &reference, manifest, &cfg)?;
            write_json(&a.out, &report)?;
            println!(
                "{}\tsedd1 {:.6}\tsedd2 {}",
                report.dataset_id,
                report.sedd1,
                report.sedd2.map_or("n/a".into(), |v| format!("{v:.6}"))
            );
            Ok(true)
        }
        Command::Benchmark(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(b) = a.bandwidth {
                cfg.kernel.bandwidth = b;
            }
            if a.checkpoint.is_some() {
                cfg.checkpoint = a.checkpoint;
            }
            if a.reference.is_some() {
                cfg.reference = a.reference;
            }
            let table = run::benchmark(&cfg)?;
            print!("{}", table.to_text());
            Ok(table.failed() == 0)
        }
        Command::ProbeLayers(a) => {
            let cfg = resolve(&a.common)?;
            for p in run::probe_layers(&cfg, &a.layers, a.sample_per_dataset)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Visualize(a) => {
            let cfg = resolve(&a.common)?;
            let out = run::visualize(&a.embeddings, a.cap, &cfg.tsne, &cfg.out_dir, &a.title)?;
            println!("plot {}", out.svg.display());
            println!("coordinates {}", out.coordinates.display());
            Ok(true)
        }
        Command::Sweep(a) => {
            let cfg = resolve(&a.common)?;
            let table = run::sweep(&cfg, &a.taus, &a.lambdas)?;
            print!("{}", table.to_text());
            Ok(table.cells.iter().all(|c| c.error.is_none()))
        }
        Command::Embed(a) => {
            let cfg = resolve(&a.common)?;
            let split: Split = a.split.parse()?;
            let ckpt = run::load_checkpoint(&a.checkpoint)?;
            let set: EmbeddingSet = run::embed_split(&ckpt, &cfg, split)?;
            set.write(&a.out)?;
            println!("{} rows -> {}", set.len(), a.out.display());
            Ok(true)
        }
        Command::ToyCorpus(a) => {
            let corpus = toy::generate(
                &a.out_dir,
                &ToySpec {
                    scenes: a.scenes,
                    size: a.size,
                    seed: a.seed,
                },
            )?;
            for m in corpus.manifests() {
                println!("{}", m.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("finished with failures");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            if let Error::Divergence { snapshot: Some(p), .. } = &e {
                info!("diagnostic snapshot written to {}", p.display());
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
