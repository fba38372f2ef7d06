//! Run configuration and the end-to-end operations behind the CLI:
//! training, profiling, benchmarking, sweeps, layer probes and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{validation, Error, Result};
use crate::ingest::{decode_and_preprocess, load_manifest, split_records, DatasetManifest, ImageRecord, LabelRegistry, PreprocessSpec, Realism, Split};
use crate::plot::{scatter_svg, PlotPoint};
use crate::sedd::{intra_class_variance, score_against, KernelParams, Reference, SeddReport};
use crate::store::Container;
use crate::style::{StyleConfig, StyleEmbedding, StyleModel};
use crate::train::{log_to_csv, LogRow, Trainer, TrainConfig};
use crate::tsne::{tsne, TsneParams};

pub const EMBEDDINGS_KIND: &str = "style-embeddings";
pub const CHECKPOINT_FILE: &str = "checkpoint.sedd";
pub const REFERENCE_FILE: &str = "reference.emb";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives splits, initialization, batch order and plot sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub split_ratios: [f64; 3],
    /// Real records of this split form the reference sample.
    pub reference_split: Split,
    /// Records of this split are scored in `profile` and `benchmark`.
    pub profile_split: Split,
    /// Store only the reference center (`sedd2` is then unavailable).
    pub compact_reference: bool,
    pub deterministic: bool,
    /// Reuse an existing checkpoint and reference instead of training.
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub preprocess: PreprocessSpec,
    pub backbone: BackboneConfig,
    pub style: StyleConfig,
    pub train: TrainConfig,
    pub kernel: KernelParams,
    pub tsne: TsneParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            manifests: Vec::new(),
            split_ratios: [0.6, 0.2, 0.2],
            reference_split: Split::Val,
            profile_split: Split::Test,
            compact_reference: false,
            deterministic: false,
            checkpoint: None,
            reference: None,
            preprocess: PreprocessSpec::default(),
            backbone: BackboneConfig::default(),
            style: StyleConfig::default(),
            train: TrainConfig::default(),
            kernel: KernelParams::default(),
            tsne: TsneParams::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML. Relative manifest, checkpoint and weight paths resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.manifests.iter_mut().for_each(fix);
        cfg.checkpoint.iter_mut().for_each(fix);
        cfg.reference.iter_mut().for_each(fix);
        cfg.backbone.weights_path.iter_mut().for_each(fix);
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The run seed also seeds training batches and t-SNE.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.tsne.seed = seed;
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split_ratios[0], self.split_ratios[1], self.split_ratios[2])
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.train.validate()?;
        if !(self.kernel.bandwidth > 0.0) {
            return validation(format!("kernel bandwidth must be > 0, got {}", self.kernel.bandwidth));
        }
        if self.reference_split == Split::Train || self.profile_split == Split::Train {
            warn!("scoring on the training split");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form. The output directory and the
    /// input-artifact paths do not affect results and are left out.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.checkpoint = None;
        canon.reference = None;
        let json = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Manifests loaded in order with class labels and split assignments.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifests: Vec<DatasetManifest>,
    pub registry: LabelRegistry,
}

impl Corpus {
    /// Records that already carry a split keep it when every record has one.
    pub fn load(paths: &[PathBuf], ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        Self::load_with(paths, ratios, seed, LabelRegistry::new())
    }

    pub fn load_with(paths: &[PathBuf], ratios: (f64, f64, f64), seed: u64, mut registry: LabelRegistry) -> Result<Self> {
        if paths.is_empty() {
            return validation("no manifests given");
        }
        let mut manifests = Vec::with_capacity(paths.len());
        let mut seen = BTreeMap::new();
        for p in paths {
            let m = load_manifest(p, &mut registry)?;
            if let Some(prev) = seen.insert(m.dataset_id.clone(), p.clone()) {
                return validation(format!(
                    "dataset {} appears in both {} and {}",
                    m.dataset_id,
                    prev.display(),
                    p.display()
                ));
            }
            let m = if m.records.iter().all(|r| r.split.is_some()) {
                m
            } else {
                split_records(&m, ratios, seed)?
            };
            manifests.push(m);
        }
        Ok(Corpus { manifests, registry })
    }

    pub fn records(&self, split: Split) -> Vec<(ImageRecord, u32)> {
        self.manifests
            .iter()
            .flat_map(|m| m.records_in(split).map(move |r| (r.clone(), m.class_label)))
            .collect()
    }

    pub fn real_records(&self, split: Split) -> Vec<(ImageRecord, u32)> {
        self.manifests
            .iter()
            .filter(|m| m.realism == Realism::Real)
            .flat_map(|m| m.records_in(split).map(move |r| (r.clone(), m.class_label)))
            .collect()
    }

    pub fn class_labels(&self) -> Vec<(String, u32)> {
        self.manifests.iter().map(|m| (m.dataset_id.clone(), m.class_label)).collect()
    }
}

/// One row of an embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub path: PathBuf,
    pub dataset_id: String,
    pub class_label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingMeta {
    config_hash: String,
    dim: usize,
    rows: Vec<EmbeddingRow>,
}

/// Embeddings plus per-row metadata, stored as a `style-embeddings` container.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub config_hash: String,
    pub rows: Vec<EmbeddingRow>,
    pub data: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn from_embeddings(embeddings: &[StyleEmbedding], config_hash: &str) -> Self {
        EmbeddingSet {
            config_hash: config_hash.to_string(),
            rows: embeddings
                .iter()
                .map(|e| EmbeddingRow {
                    path: e.record.path.clone(),
                    dataset_id: e.record.dataset_id.clone(),
                    class_label: e.class_label,
                    weather: e.record.weather.clone(),
                    scene_id: e.record.scene_id.clone(),
                    split: e.record.split,
                })
                .collect(),
            data: embeddings.iter().map(|e| e.data.clone()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let dim = self.dim();
        if self.data.iter().any(|d| d.len() != dim) {
            return validation("embedding rows differ in length");
        }
        let meta = EmbeddingMeta {
            config_hash: self.config_hash.clone(),
            dim,
            rows: self.rows.clone(),
        };
        let mut c = Container::new(EMBEDDINGS_KIND, serde_json::to_value(meta)?);
        c.push_f64("embeddings", vec![self.len(), dim], self.data.concat());
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind(EMBEDDINGS_KIND)?;
        let meta: EmbeddingMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Init(format!("{}: embedding metadata: {e}", path.display())))?;
        let flat = c
            .get("embeddings")
            .ok_or_else(|| Error::Init(format!("{}: no embeddings tensor", path.display())))?
            .data
            .to_f64();
        if flat.len() != meta.rows.len() * meta.dim {
            return Err(Error::Init(format!(
                "{}: {} values for {} rows of width {}",
                path.display(),
                flat.len(),
                meta.rows.len(),
                meta.dim
            )));
        }
        let data = if meta.dim == 0 {
            vec![Vec::new(); meta.rows.len()]
        } else {
            flat.chunks(meta.dim).map(<[f64]>::to_vec).collect()
        };
        Ok(EmbeddingSet {
            config_hash: meta.config_hash,
            rows: meta.rows,
            data,
        })
    }

    /// Row indices grouped by dataset id, in first-appearance order.
    pub fn by_dataset(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            match groups.iter_mut().find(|(id, _)| *id == r.dataset_id) {
                Some((_, v)) => v.push(i),
                None => groups.push((r.dataset_id.clone(), vec![i])),
            }
        }
        groups
    }
}

fn reference_from(set: &EmbeddingSet) -> Result<Reference> {
    let groups = set.by_dataset();
    let id = match groups.as_slice() {
        [] => return validation("reference embedding file is empty"),
        [(id, _)] => id.clone(),
        _ => "real".to_string(),
    };
    Ok(Reference::Full {
        dataset_id: id,
        embeddings: set.data.clone(),
    })
}

/// Loads a reference written by [`train_run`]: a full embedding file or a
/// JSON style center (compact mode).
pub fn load_reference(path: &Path) -> Result<Reference> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reference {}: {e}", path.display())))?;
        let center = serde_json::from_str(&text)?;
        return Ok(Reference::CenterOnly(center));
    }
    if !path.exists() {
        return Err(Error::Config(format!("reference {} does not exist", path.display())));
    }
    reference_from(&EmbeddingSet::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub reference: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<LogRow>,
    pub config_hash: String,
    pub trained: Checkpoint,
}

fn build_model(cfg: &RunConfig) -> Result<StyleModel> {
    let backbone = Backbone::from_config(&cfg.backbone, cfg.seed)?;
    StyleModel::new(backbone, &cfg.style, cfg.seed)
}

/// Trains on the train split of every manifest, then writes the checkpoint,
/// the loss log and the real reference embeddings into `out_dir`.
pub fn train_run(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.manifests, cfg.ratios(), cfg.seed)?;
    if !corpus.manifests.iter().any(|m| m.realism == Realism::Real) {
        return validation("training needs at least one real manifest");
    }
    if !corpus.manifests.iter().any(|m| m.realism == Realism::Synthetic) {
        return validation("training needs at least one synthetic manifest");
    }
    let data = corpus.records(Split::Train);
    if data.is_empty() {
        return validation("training split is empty");
    }
    create_dir(&cfg.out_dir)?;
    let hash = cfg.hash();
    write_text(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_toml()?)?;

    let model = build_model(cfg)?;
    info!(
        "training on {} images from {} datasets ({} backbone params, {} head params)",
        data.len(),
        corpus.manifests.len(),
        model.backbone.num_params(),
        model.head.params().len()
    );
    let meta_for = |iterations: usize, center_lr: f64| -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            config_hash: hash.clone(),
            seed: cfg.seed,
            run_config: serde_json::to_value(cfg)?,
            backbone: cfg.backbone.clone(),
            head_widths: model.head.widths().to_vec(),
            activation: model.head.activation(),
            normalize_gram: model.normalize_gram,
            class_labels: corpus.class_labels(),
            center_lr,
            iterations,
        })
    };
    let snapshot_path = cfg.out_dir.join("divergence.sedd");
    let divergence_meta = meta_for(0, cfg.train.center_lr_init)?;
    let mut trainer = Trainer::new(&cfg.train, &cfg.preprocess);
    trainer.frozen_backbone = cfg.backbone.frozen;
    trainer.on_divergence = Some(Box::new(|state| {
        let ckpt = Checkpoint {
            model: state.model.clone(),
            centers: state.centers.clone(),
            meta: CheckpointMeta {
                iterations: state.log.len(),
                ..divergence_meta.clone()
            },
        };
        let _ = write_text(&cfg.out_dir.join("divergence_log.csv"), &log_to_csv(&state.log));
        ckpt.save(&snapshot_path).ok().map(|_| snapshot_path.clone())
    }));
    let outcome = trainer.train(model.clone(), &data)?;

    let log_path = cfg.out_dir.join(LOG_FILE);
    write_text(&log_path, &log_to_csv(&outcome.log))?;
    let trained = Checkpoint {
        meta: meta_for(outcome.log.len(), outcome.centers.center_lr)?,
        model: outcome.model,
        centers: outcome.centers,
    };
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    trained.save(&checkpoint)?;

    let real = corpus.real_records(cfg.reference_split);
    if real.len() < 2 {
        return validation(format!(
            "reference split {:?} holds {} real records, need at least 2",
            cfg.reference_split,
            real.len()
        ));
    }
    let emb = trained.model.embed_records(&real, &cfg.preprocess)?;
    let set = EmbeddingSet::from_embeddings(&emb, &hash);
    let reference = if cfg.compact_reference {
        let id = set.by_dataset().into_iter().map(|(id, _)| id).collect::<Vec<_>>().join("+");
        let center = crate::sedd::style_center(&id, &set.data)?;
        let path = cfg.out_dir.join("reference_center.json");
        write_text(&path, &serde_json::to_string_pretty(&center)?)?;
        path
    } else {
        let path = cfg.out_dir.join(REFERENCE_FILE);
        set.write(&path)?;
        path
    };
    Ok(TrainArtifacts {
        checkpoint,
        reference,
        log_path,
        log: outcome.log,
        config_hash: hash,
        trained,
    })
}

/// Split and preprocessing settings a checkpoint was trained with, falling
/// back to `cfg` for checkpoints without a run configuration.
fn trained_settings(ckpt: &Checkpoint, cfg: &RunConfig) -> ((f64, f64, f64), u64, PreprocessSpec) {
    match serde_json::from_value::<RunConfig>(ckpt.meta.run_config.clone()) {
        Ok(rc) => (rc.ratios(), rc.seed, rc.preprocess),
        Err(_) => (cfg.ratios(), cfg.seed, cfg.preprocess.clone()),
    }
}

fn registry_of(ckpt: &Checkpoint) -> LabelRegistry {
    let mut reg = LabelRegistry::new();
    for (id, label) in &ckpt.meta.class_labels {
        let realism = if *label == 0 { Realism::Real } else { Realism::Synthetic };
        reg.label_for(id, realism);
    }
    reg
}

/// Embeds the profile split of `manifest` and scores it against `reference`.
/// Splits and preprocessing follow the checkpoint's training run.
pub fn profile(
    ckpt: &Checkpoint,
    reference: &Reference,
    manifest: &Path,
    cfg: &RunConfig,
) -> Result<(SeddReport, Vec<StyleEmbedding>)> {
    let (ratios, seed, preprocess) = trained_settings(ckpt, cfg);
    let corpus = Corpus::load_with(&[manifest.to_path_buf()], ratios, seed, registry_of(ckpt))?;
    let m = &corpus.manifests[0];
    let records: Vec<(ImageRecord, u32)> = m.records_in(cfg.profile_split).map(|r| (r.clone(), m.class_label)).collect();
    if records.len() < 2 {
        return validation(format!(
            "dataset {} has {} records in split {:?}, need at least 2",
            m.dataset_id,
            records.len(),
            cfg.profile_split
        ));
    }
    let emb = ckpt.model.embed_records(&records, &preprocess)?;
    let data: Vec<Vec<f64>> = emb.iter().map(|e| e.data.clone()).collect();
    let report = score_against(&m.dataset_id, &data, reference, cfg.kernel, &ckpt.meta.config_hash)?;
    Ok((report, emb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub manifest: PathBuf,
    pub dataset_id: Option<String>,
    pub report: Option<SeddReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub config_hash: String,
    pub rows: Vec<BenchmarkRow>,
}

/// Four decimals, or three significant digits for values below 1e-3.
fn score_text(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

impl BenchmarkTable {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.report.is_none()).count()
    }

    pub fn report(&self, dataset_id: &str) -> Option<&SeddReport> {
        self.rows.iter().filter_map(|r| r.report.as_ref()).find(|r| r.dataset_id == dataset_id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,sedd1,sedd2,m,n,intra_class_variance,status,config_hash\n");
        for r in &self.rows {
            let id = r.dataset_id.clone().unwrap_or_else(|| r.manifest.display().to_string());
            match &r.report {
                Some(rep) => {
                    let _ = writeln!(
                        out,
                        "{id},{},{},{},{},{},ok,{}",
                        rep.sedd1,
                        rep.sedd2.map_or(String::new(), |v| v.to_string()),
                        rep.m,
                        rep.n,
                        rep.intra_class_variance.map_or(String::new(), |v| v.to_string()),
                        self.config_hash
                    );
                }
                None => {
                    let err = r.error.as_deref().unwrap_or("failed").replace([',', '\n'], " ");
                    let _ = writeln!(out, "{id},,,,,,failed: {err},{}", self.config_hash);
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![("Datasets".to_string(), "SEDD₁".to_string(), "SEDD₂".to_string())];
        for r in &self.rows {
            let id = r.dataset_id.clone().unwrap_or_else(|| r.manifest.display().to_string());
            lines.push(match &r.report {
                Some(rep) => (
                    id,
                    score_text(rep.sedd1),
                    rep.sedd2.map_or("n/a".into(), score_text),
                ),
                None => (id, "FAILED".into(), "FAILED".into()),
            });
        }
        let w0 = lines.iter().map(|l| l.0.chars().count()).max().unwrap_or(0);
        let w1 = lines.iter().map(|l| l.1.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (a, b, c) in &lines {
            let pad0 = w0 - a.chars().count();
            let pad1 = w1 - b.chars().count();
            let _ = writeln!(out, "{a}{}  {}{b}  {c}", " ".repeat(pad0), " ".repeat(pad1));
        }
        let _ = writeln!(out, "config {}", self.config_hash);
        out
    }
}

/// Profiles every manifest in `cfg` against the real reference. Uses the
/// configured checkpoint and reference when both are set, otherwise trains
/// first. Rows are sorted by `sedd1`; failed rows go last.
pub fn benchmark(cfg: &RunConfig) -> Result<BenchmarkTable> {
    cfg.validate()?;
    let (ckpt, reference) = match (&cfg.checkpoint, &cfg.reference) {
        (Some(c), Some(r)) => (load_checkpoint(c)?, load_reference(r)?),
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Config("benchmark needs both checkpoint and reference, or neither".into()))
        }
        (None, None) => {
            let art = train_run(cfg)?;
            let reference = load_reference(&art.reference)?;
            (art.trained, reference)
        }
    };
    if cfg.manifests.is_empty() {
        return validation("benchmark has no manifests");
    }
    let mut rows: Vec<BenchmarkRow> = cfg
        .manifests
        .iter()
        .map(|m| match profile(&ckpt, &reference, m, cfg) {
            Ok((rep, _)) => BenchmarkRow {
                manifest: m.clone(),
                dataset_id: Some(rep.dataset_id.clone()),
                report: Some(rep),
                error: None,
            },
            Err(e) => {
                warn!("{}: {e}", m.display());
                BenchmarkRow {
                    manifest: m.clone(),
                    dataset_id: None,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    rows.sort_by(|a, b| match (&a.report, &b.report) {
        (Some(x), Some(y)) => x.sedd1.total_cmp(&y.sedd1),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let table = BenchmarkTable {
        config_hash: ckpt.meta.config_hash.clone(),
        rows,
    };
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("benchmark.csv"), &table.to_csv())?;
    write_text(&cfg.out_dir.join("benchmark.txt"), &table.to_text())?;
    write_text(&cfg.out_dir.join("benchmark.json"), &serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub temperature: f64,
    pub lambda: f64,
    pub variance: Option<f64>,
    /// dataset id → center distance to the real reference.
    pub distances: Vec<(String, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// One line per cell: `τ λ variance / distance [...]`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("tau     lambda  variance / center distance\n");
        for c in &self.cells {
            let body = match (&c.error, c.variance) {
                (Some(e), _) => format!("FAILED ({e})"),
                (None, Some(v)) => c
                    .distances
                    .iter()
                    .map(|(id, d)| format!("{v:.4} / {d:.4} ({id})"))
                    .collect::<Vec<_>>()
                    .join("  "),
                (None, None) => "n/a".into(),
            };
            let _ = writeln!(out, "{:<7} {:<7} {body}", c.temperature, c.lambda);
        }
        out
    }
}

/// Variance of the real reference and distance of each synthetic dataset's
/// profile-split center to it, for one trained configuration.
pub fn sweep_cell(cfg: &RunConfig) -> Result<SweepCell> {
    let art = train_run(cfg)?;
    let reference = EmbeddingSet::read(&art.reference)?;
    let variance = intra_class_variance(&reference.data)?;
    let reference = reference_from(&reference)?;
    let mut distances = Vec::new();
    let corpus = Corpus::load(&cfg.manifests, cfg.ratios(), cfg.seed)?;
    for (path, m) in cfg.manifests.iter().zip(&corpus.manifests) {
        if m.realism == Realism::Real {
            continue;
        }
        let (rep, _) = profile(&art.trained, &reference, path, cfg)?;
        distances.push((rep.dataset_id, rep.sedd1));
    }
    Ok(SweepCell {
        temperature: cfg.train.temperature,
        lambda: cfg.train.lambda,
        variance: Some(variance),
        distances,
        error: None,
    })
}

pub fn sweep(cfg: &RunConfig, temperatures: &[f64], lambdas: &[f64]) -> Result<SweepTable> {
    if temperatures.is_empty() || lambdas.is_empty() {
        return validation("sweep grids must be non-empty");
    }
    let mut cells = Vec::new();
    for &tau in temperatures {
        for &lambda in lambdas {
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.temperature = tau;
            cell_cfg.train.lambda = lambda;
            cell_cfg.out_dir = cfg.out_dir.join(format!("tau{tau}_lambda{lambda}"));
            let cell = match sweep_cell(&cell_cfg) {
                Ok(c) => c,
                Err(e) if e.is_validation() => return Err(e),
                Err(e) => {
                    warn!("cell tau={tau} lambda={lambda} failed: {e}");
                    SweepCell {
                        temperature: tau,
                        lambda,
                        variance: None,
                        distances: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let table = SweepTable { cells };
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("sweep.txt"), &table.to_text())?;
    write_text(&cfg.out_dir.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
    Ok(table)
}

/// Seeded subsample of at most `cap` indices per group, in ascending order.
fn cap_indices(groups: &[(String, Vec<usize>)], cap: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, idx) in groups {
        let mut idx = idx.clone();
        if idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
        }
        keep.extend(idx);
    }
    keep
}

/// Writes one embedding file per backbone stage holding flattened feature
/// maps of up to `per_dataset` records from each dataset.
pub fn probe_layers(cfg: &RunConfig, layers: &[usize], per_dataset: usize) -> Result<Vec<PathBuf>> {
    cfg.preprocess.validate()?;
    if layers.is_empty() {
        return validation("no layers requested");
    }
    let corpus = Corpus::load(&cfg.manifests, cfg.ratios(), cfg.seed)?;
    if corpus.manifests.len() < 2 {
        warn!("layer probe on a single dataset: nothing to contrast");
    }
    let groups: Vec<(String, Vec<usize>)> = corpus
        .manifests
        .iter()
        .scan(0usize, |offset, m| {
            let idx = (*offset..*offset + m.records.len()).collect();
            *offset += m.records.len();
            Some((m.dataset_id.clone(), idx))
        })
        .collect();
    let all: Vec<(ImageRecord, u32)> = corpus
        .manifests
        .iter()
        .flat_map(|m| m.records.iter().map(move |r| (r.clone(), m.class_label)))
        .collect();
    let sample: Vec<(ImageRecord, u32)> = cap_indices(&groups, per_dataset, cfg.seed).into_iter().map(|i| all[i].clone()).collect();
    if sample.is_empty() || per_dataset == 0 {
        return validation("layer probe sample is empty");
    }
    let images = sample
        .par_iter()
        .map(|(r, _)| decode_and_preprocess(r, &cfg.preprocess))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.out_dir)?;
    let hash = cfg.hash();
    let mut out = Vec::new();
    for &layer in layers {
        let bcfg = BackboneConfig {
            truncation_layer: layer,
            ..cfg.backbone.clone()
        };
        let net = Backbone::from_config(&bcfg, cfg.seed)?;
        let maps = images
            .par_iter()
            .map(|img| net.extract(img).map(|f| f.data.iter().map(|&v| v as f64).collect::<Vec<f64>>()))
            .collect::<Result<Vec<_>>>()?;
        let emb: Vec<StyleEmbedding> = sample
            .iter()
            .zip(maps)
            .map(|((r, l), data)| StyleEmbedding {
                data,
                record: r.clone(),
                class_label: *l,
            })
            .collect();
        let path = cfg.out_dir.join(format!("layer{layer}.emb"));
        EmbeddingSet::from_embeddings(&emb, &hash).write(&path)?;
        info!("layer {layer}: {} rows of width {}", emb.len(), emb[0].data.len());
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualizeOutput {
    pub svg: PathBuf,
    pub coordinates: PathBuf,
    pub points: Vec<PlotPoint>,
}

/// t-SNE of up to `cap` embeddings per dataset across `files`, written as an
/// SVG scatter and a CSV coordinate table.
pub fn visualize(files: &[PathBuf], cap: usize, params: &TsneParams, out_dir: &Path, title: &str) -> Result<VisualizeOutput> {
    if files.is_empty() {
        return validation("no embedding files given");
    }
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for f in files {
        let set = EmbeddingSet::read(f)?;
        rows.extend(set.rows);
        data.extend(set.data);
    }
    let dim = data.first().map_or(0, Vec::len);
    if data.iter().any(|d| d.len() != dim) {
        return validation("embedding files differ in dimension");
    }
    let merged = EmbeddingSet {
        config_hash: String::new(),
        rows,
        data,
    };
    let keep = cap_indices(&merged.by_dataset(), cap, params.seed);
    if keep.len() < 2 {
        return validation(format!("need at least 2 points to visualize, have {}", keep.len()));
    }
    let points: Vec<Vec<f64>> = keep.iter().map(|&i| merged.data[i].clone()).collect();
    let coords = tsne(&points, params)?;
    let plot: Vec<PlotPoint> = keep
        .iter()
        .zip(&coords)
        .map(|(&i, c)| PlotPoint {
            x: c[0],
            y: c[1],
            dataset_id: merged.rows[i].dataset_id.clone(),
            weather: merged.rows[i].weather.clone(),
        })
        .collect();
    create_dir(out_dir)?;
    let mut csv = String::from("dataset,weather,path,x,y\n");
    for (&i, p) in keep.iter().zip(&plot) {
        let r = &merged.rows[i];
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.dataset_id,
            r.weather.as_deref().unwrap_or(""),
            r.path.display(),
            p.x,
            p.y
        );
    }
    let coordinates = out_dir.join("tsne_coordinates.csv");
    write_text(&coordinates, &csv)?;
    let svg = out_dir.join("tsne.svg");
    write_text(&svg, &scatter_svg(&plot, title))?;
    Ok(VisualizeOutput {
        svg,
        coordinates,
        points: plot,
    })
}

/// Embeds records of `split` from every manifest with a trained checkpoint.
pub fn embed_split(ckpt: &Checkpoint, cfg: &RunConfig, split: Split) -> Result<EmbeddingSet> {
    let (ratios, seed, preprocess) = trained_settings(ckpt, cfg);
    let corpus = Corpus::load_with(&cfg.manifests, ratios, seed, registry_of(ckpt))?;
    let records = corpus.records(split);
    if records.is_empty() {
        return validation(format!("split {split:?} is empty"));
    }
    let emb = ckpt.model.embed_records(&records, &preprocess)?;
    Ok(EmbeddingSet::from_embeddings(&emb, &ckpt.meta.config_hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCheck {
    pub dataset_id: String,
    pub class_label: u32,
    pub realism: Realism,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub failures: Vec<String>,
}

/// Loads, splits and decodes every record; reports per-dataset counts.
pub fn ingest_check(cfg: &RunConfig) -> Result<Vec<DatasetCheck>> {
    cfg.preprocess.validate()?;
    let corpus = Corpus::load(&cfg.manifests, cfg.ratios(), cfg.seed)?;
    let checks: Vec<DatasetCheck> = corpus
        .manifests
        .iter()
        .map(|m| {
            let failures = m
                .records
                .par_iter()
                .filter_map(|r| decode_and_preprocess(r, &cfg.preprocess).err().map(|e| e.to_string()))
                .collect();
            DatasetCheck {
                dataset_id: m.dataset_id.clone(),
                class_label: m.class_label,
                realism: m.realism,
                train: m.records_in(Split::Train).count(),
                val: m.records_in(Split::Val).count(),
                test: m.records_in(Split::Test).count(),
                failures,
            }
        })
        .collect();
    Ok(checks)
}
