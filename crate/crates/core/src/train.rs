//! Joint center-loss + NT-Xent training over a cross-batch memory.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::ingest::{decode_and_preprocess, ImageRecord, ImageTensor, PreprocessSpec};
use crate::metric::{
    batch_hard_mine, center_loss_grad, decay_center_lr, ntxent_grad, total_loss, update_centers,
    CenterLossForm, CenterUpdate, ClassCenters, EmbeddingMemory,
};
use crate::optim::Sgd;
use crate::style::StyleModel;

/// Images are kept decoded in memory when the whole training set fits here.
const DECODE_CACHE_BYTES: usize = 1 << 30;
/// Per-image gradients are summed in fixed-size chunks so the reduction order
/// does not depend on the thread pool.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of backbone and projection head.
    pub lr: f64,
    pub epochs: u32,
    /// Weight of the center loss.
    pub lambda: f64,
    /// NT-Xent temperature.
    pub temperature: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub center_lr_init: f64,
    pub center_decay: f64,
    pub batch_size: usize,
    pub memory_capacity: usize,
    pub center_loss_form: CenterLossForm,
    pub center_update: CenterUpdate,
    /// Disable to train with the center loss alone.
    pub use_ntxent: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 4,
            lambda: 0.5,
            temperature: 0.015,
            momentum: 0.9,
            weight_decay: 1e-4,
            center_lr_init: 10.0,
            center_decay: 0.9,
            batch_size: 32,
            memory_capacity: 100,
            center_loss_form: CenterLossForm::Unsquared,
            center_update: CenterUpdate::Gradient,
            use_ntxent: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return validation(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.center_decay > 0.0 && self.center_decay <= 1.0) {
            return validation(format!("center_decay must be in (0, 1], got {}", self.center_decay));
        }
        if !(self.lambda >= 0.0) {
            return validation(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !(self.center_lr_init > 0.0) {
            return validation("learning rates must be positive");
        }
        if self.batch_size < 2 {
            return validation("batch_size must be at least 2");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: u32,
    pub l_ntxent: f64,
    pub l_center: f64,
    pub l_total: f64,
    pub eta_c: f64,
    pub skipped: usize,
}

pub const LOG_HEADER: &str = "iteration,epoch,l_ntxent,l_center,l_total,eta_c,skipped";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.l_ntxent, self.l_center, self.l_total, self.eta_c, self.skipped
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Loss terms of one batch together with the gradient w.r.t. each batch embedding.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub ntxent: f64,
    pub center: f64,
    pub total: f64,
    pub skipped: usize,
    pub d_embeddings: Vec<Vec<f64>>,
}

/// Mines the batch ∪ memory pool and evaluates `ℒ_NTXent + λ ℒ_C`.
/// Memory entries are constants: only batch embeddings receive gradients.
pub fn batch_loss(
    batch: &[Vec<f64>],
    labels: &[u32],
    memory: &EmbeddingMemory,
    centers: &ClassCenters,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let b = batch.len();
    let mut pool: Vec<Vec<f64>> = batch.to_vec();
    let mut pool_labels = labels.to_vec();
    for (e, l) in memory.iter() {
        pool.push(e.to_vec());
        pool_labels.push(l);
    }
    let anchors: Vec<usize> = (0..b).collect();
    let mined = batch_hard_mine(&pool, &pool_labels, &anchors)?;
    let dim = batch.first().map_or(0, Vec::len);
    let mut d_embeddings = vec![vec![0.0; dim]; b];
    let mut ntxent = 0.0;
    if cfg.use_ntxent && !mined.is_empty() {
        let pairs: Vec<(usize, usize)> = mined.anchors.iter().copied().zip(mined.positives.iter().copied()).collect();
        let (l, dpool) = ntxent_grad(&pool, &pairs, cfg.temperature)?;
        ntxent = l;
        for (d, g) in d_embeddings.iter_mut().zip(&dpool[..b]) {
            d.copy_from_slice(g);
        }
    }
    let cg = center_loss_grad(batch, labels, centers, cfg.center_loss_form)?;
    if cfg.lambda != 0.0 {
        for (d, g) in d_embeddings.iter_mut().zip(&cg.d_embeddings) {
            d.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda * b);
        }
    }
    Ok(BatchLoss {
        ntxent,
        center: cg.loss,
        total: total_loss(ntxent, cg.loss, cfg.lambda),
        skipped: mined.skipped,
        d_embeddings,
    })
}

/// Class-balanced batches for one epoch: every class contributes an equal
/// quota (remainder to the lowest labels); the epoch ends when the largest
/// class has been seen once, smaller classes cycle with reshuffling.
pub fn class_balanced_batches(
    by_class: &BTreeMap<u32, Vec<usize>>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let k = by_class.len();
    if k == 0 || batch_size == 0 {
        return Vec::new();
    }
    let quotas: Vec<usize> = (0..k).map(|i| batch_size / k + usize::from(i < batch_size % k)).collect();
    let n_batches = by_class
        .values()
        .zip(&quotas)
        .map(|(items, &q)| if q == 0 { 0 } else { items.len().div_ceil(q) })
        .max()
        .unwrap_or(0);
    let mut streams: Vec<(Vec<usize>, usize)> = by_class
        .values()
        .map(|items| {
            let mut v = items.clone();
            v.shuffle(rng);
            (v, 0)
        })
        .collect();
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for ((items, cursor), &q) in streams.iter_mut().zip(&quotas) {
            for _ in 0..q.min(items.len()) {
                if *cursor == items.len() {
                    items.shuffle(rng);
                    *cursor = 0;
                }
                batch.push(items[*cursor]);
                *cursor += 1;
            }
        }
        batches.push(batch);
    }
    batches
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StyleModel,
    pub centers: ClassCenters,
    pub log: Vec<LogRow>,
}

/// State handed back when the loss stops being finite.
#[derive(Debug, Clone)]
pub struct DivergenceState {
    pub model: StyleModel,
    pub centers: ClassCenters,
    pub log: Vec<LogRow>,
}

pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub preprocess: &'a PreprocessSpec,
    pub frozen_backbone: bool,
    /// Called with the model state when training diverges; returns where
    /// the snapshot was written.
    pub on_divergence: Option<Box<dyn Fn(&DivergenceState) -> Option<std::path::PathBuf> + Sync + 'a>>,
}

enum Images {
    Cached(Vec<ImageTensor>),
    Lazy,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, preprocess: &'a PreprocessSpec) -> Self {
        Trainer {
            cfg,
            preprocess,
            frozen_backbone: false,
            on_divergence: None,
        }
    }

    fn load(&self, data: &[(ImageRecord, u32)], images: &Images, idx: usize) -> Result<ImageTensor> {
        match images {
            Images::Cached(v) => Ok(v[idx].clone()),
            Images::Lazy => decode_and_preprocess(&data[idx].0, self.preprocess),
        }
    }

    pub fn train(&self, mut model: StyleModel, data: &[(ImageRecord, u32)]) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        self.preprocess.validate()?;
        if data.is_empty() {
            return validation("training split is empty");
        }
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (_, label)) in data.iter().enumerate() {
            by_class.entry(*label).or_default().push(i);
        }
        if by_class.len() < 2 {
            return validation("training needs at least two classes");
        }
        if cfg.batch_size < 2 * by_class.len() {
            warn!(
                "batch_size {} gives fewer than two samples per class for {} classes",
                cfg.batch_size,
                by_class.len()
            );
        }

        let pixels = 3 * self.preprocess.target_height as usize * self.preprocess.target_width as usize;
        let images = if data.len() * pixels * 4 <= DECODE_CACHE_BYTES {
            Images::Cached(
                data.par_iter()
                    .map(|(r, _)| decode_and_preprocess(r, self.preprocess))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            Images::Lazy
        };

        let dim = model.head.output_dim();
        let mut centers = ClassCenters::zeros(by_class.keys().copied(), dim, cfg.center_lr_init);
        let mut memory = EmbeddingMemory::new(cfg.memory_capacity);
        let mut head_opt = Sgd::<f64>::new(model.head.params().len(), cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut backbone_opt = Sgd::<f32>::new(model.backbone.num_params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
        let mut log = Vec::new();
        let mut iteration = 0usize;

        for epoch in 0..cfg.epochs {
            let eta = decay_center_lr(epoch, cfg.center_lr_init, cfg.center_decay);
            let batches = class_balanced_batches(&by_class, cfg.batch_size, &mut rng);
            for batch in batches {
                let labels: Vec<u32> = batch.iter().map(|&i| data[i].1).collect();
                let forward: Vec<_> = batch
                    .par_iter()
                    .map(|&i| {
                        let img = self.load(data, &images, i)?;
                        model.forward_traced(&img)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let zs: Vec<Vec<f64>> = forward.iter().map(|(z, _)| z.clone()).collect();

                let loss = match batch_loss(&zs, &labels, &memory, &centers, cfg) {
                    Ok(l) => l,
                    Err(Error::Numeric(msg)) => return Err(self.diverged(iteration, msg, &model, &centers, &log)),
                    Err(e) => return Err(e),
                };
                if !loss.total.is_finite() {
                    let msg = format!("loss is {} (ntxent {}, center {})", loss.total, loss.ntxent, loss.center);
                    return Err(self.diverged(iteration, msg, &model, &centers, &log));
                }

                let frozen = self.frozen_backbone;
                let partials: Vec<(Vec<f64>, Option<Vec<f32>>)> = forward
                    .par_chunks(GRAD_CHUNK)
                    .zip(loss.d_embeddings.par_chunks(GRAD_CHUNK))
                    .map(|(fw, dz)| {
                        let mut hg = vec![0f64; model.head.params().len()];
                        let mut bg = (!frozen).then(|| vec![0f32; model.backbone.num_params()]);
                        for ((_, trace), d) in fw.iter().zip(dz) {
                            model.backward(trace, d, &mut hg, bg.as_deref_mut());
                        }
                        (hg, bg)
                    })
                    .collect();
                drop(forward);
                let mut head_grad = vec![0f64; model.head.params().len()];
                let mut backbone_grad = (!frozen).then(|| vec![0f32; model.backbone.num_params()]);
                for (hg, bg) in partials {
                    head_grad.iter_mut().zip(&hg).for_each(|(a, b)| *a += b);
                    if let (Some(acc), Some(bg)) = (backbone_grad.as_mut(), bg) {
                        acc.iter_mut().zip(&bg).for_each(|(a, b)| *a += b);
                    }
                }
                if head_grad.iter().any(|g| !g.is_finite()) {
                    return Err(self.diverged(iteration, "non-finite head gradient".into(), &model, &centers, &log));
                }
                head_opt.step(model.head.params_mut(), &head_grad);
                if let Some(bg) = backbone_grad {
                    if bg.iter().any(|g| !g.is_finite()) {
                        return Err(self.diverged(iteration, "non-finite backbone gradient".into(), &model, &centers, &log));
                    }
                    backbone_opt.step(model.backbone.params_mut(), &bg);
                }
                update_centers(&zs, &labels, &mut centers, eta, cfg.center_loss_form, cfg.center_update)?;
                for (z, l) in zs.into_iter().zip(labels) {
                    memory.push(z, l);
                }

                let row = LogRow {
                    iteration,
                    epoch,
                    l_ntxent: loss.ntxent,
                    l_center: loss.center,
                    l_total: loss.total,
                    eta_c: eta,
                    skipped: loss.skipped,
                };
                debug!("{}", row.to_csv());
                log.push(row);
                iteration += 1;
            }
            if let Some(last) = log.last() {
                info!("epoch {epoch} done: iteration {} total loss {:.4}", last.iteration, last.l_total);
            }
        }
        Ok(TrainOutcome { model, centers, log })
    }

    fn diverged(&self, iteration: usize, message: String, model: &StyleModel, centers: &ClassCenters, log: &[LogRow]) -> Error {
        let snapshot = self.on_divergence.as_ref().and_then(|f| {
            f(&DivergenceState {
                model: model.clone(),
                centers: centers.clone(),
                log: log.to_vec(),
            })
        });
        Error::Divergence {
            iteration,
            message,
            snapshot,
        }
    }
}

/// Loss of a fixed probe batch with an empty memory, for progress checks.
pub fn probe_loss(
    model: &StyleModel,
    images: &[(ImageTensor, u32)],
    centers: &ClassCenters,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let zs = images
        .par_iter()
        .map(|(img, _)| model.embed_tensor(img))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = images.iter().map(|(_, l)| *l).collect();
    batch_loss(&zs, &labels, &EmbeddingMemory::new(0), centers, cfg)
}
