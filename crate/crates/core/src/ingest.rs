//! Manifest loading, deterministic splitting and image preprocessing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// Input images are always decoded to RGB.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Realism {
    Real,
    Synthetic,
}

impl std::str::FromStr for Realism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Realism::Real),
            "synthetic" => Ok(Realism::Synthetic),
            other => validation(format!("unknown realism value {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => validation(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub dataset_id: String,
    pub realism: Realism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
}

/// One dataset: every record shares `dataset_id` and `realism`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub realism: Realism,
    pub class_label: u32,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }
}

/// Assigns class labels: every real dataset gets 0, each distinct synthetic
/// dataset id gets the next label in registration order starting at 1.
#[derive(Debug, Clone, Default)]
pub struct LabelRegistry {
    synthetic: BTreeMap<String, u32>,
    next: u32,
}

impl LabelRegistry {
    pub fn new() -> Self {
        LabelRegistry {
            synthetic: BTreeMap::new(),
            next: 1,
        }
    }

    pub fn label_for(&mut self, dataset_id: &str, realism: Realism) -> u32 {
        match realism {
            Realism::Real => 0,
            Realism::Synthetic => {
                if let Some(&label) = self.synthetic.get(dataset_id) {
                    return label;
                }
                let label = self.next.max(1);
                self.synthetic.insert(dataset_id.to_string(), label);
                self.next = label + 1;
                label
            }
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    path: PathBuf,
    dataset_id: String,
    realism: String,
    #[serde(default)]
    weather: Option<String>,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    scene_id: Option<String>,
}

/// Reads a JSON-Lines manifest. Relative image paths resolve against the
/// manifest's directory. Blank lines are ignored.
pub fn load_manifest(path: &Path, registry: &mut LabelRegistry) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let realism: Realism = raw.realism.parse().map_err(|_| {
            Error::Validation(format!(
                "{}:{line_no}: unknown realism value {:?}",
                path.display(),
                raw.realism
            ))
        })?;
        let split = match raw.split {
            Some(s) => Some(s.parse::<Split>().map_err(|_| {
                Error::Validation(format!("{}:{line_no}: unknown split {s:?}", path.display()))
            })?),
            None => None,
        };
        let resolved = if raw.path.is_absolute() {
            raw.path
        } else {
            base.join(raw.path)
        };
        if !seen.insert(resolved.clone()) {
            return validation(format!(
                "{}:{line_no}: duplicate path {}",
                path.display(),
                resolved.display()
            ));
        }
        records.push(ImageRecord {
            path: resolved,
            dataset_id: raw.dataset_id,
            realism,
            weather: raw.weather,
            split,
            scene_id: raw.scene_id,
        });
    }

    let Some(first) = records.first() else {
        return validation(format!("manifest {} has no records", path.display()));
    };
    let dataset_id = first.dataset_id.clone();
    let realism = first.realism;
    if let Some(bad) = records
        .iter()
        .find(|r| r.dataset_id != dataset_id || r.realism != realism)
    {
        return validation(format!(
            "manifest {} mixes datasets: {:?}/{:?} vs {:?}/{:?}",
            path.display(),
            dataset_id,
            realism,
            bad.dataset_id,
            bad.realism
        ));
    }
    let class_label = registry.label_for(&dataset_id, realism);
    Ok(DatasetManifest {
        dataset_id,
        realism,
        class_label,
        records,
    })
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Assigns a split to every record. The permutation depends only on the
/// record count and `seed`, so equally sized datasets loaded with the same
/// seed receive aligned assignments.
pub fn split_records(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return validation(format!("split ratios must be non-negative, got {ratios:?}"));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return validation(format!("split ratios must sum to 1, got {ratios:?}"));
    }
    let n = manifest.records.len();
    if n == 0 {
        return validation(format!("dataset {} is empty", manifest.dataset_id));
    }
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut out = manifest.clone();
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.records[idx].split = Some(split);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Resize directly to the target size.
    Resize,
    /// Crop the target size out of the image center without resizing.
    CenterCrop,
    /// Resize the shorter side to `resize_shorter`, then center crop.
    ResizeThenCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub target_height: u32,
    pub target_width: u32,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
    pub resize_policy: ResizePolicy,
    pub resize_shorter: u32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            target_height: 224,
            target_width: 224,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
            resize_policy: ResizePolicy::ResizeThenCrop,
            resize_shorter: 256,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_height == 0 || self.target_width == 0 {
            return validation("preprocess target size must be positive");
        }
        if self.channel_stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return validation(format!(
                "channel_stds must be strictly positive, got {:?}",
                self.channel_stds
            ));
        }
        if self.resize_policy == ResizePolicy::ResizeThenCrop
            && self.resize_shorter < self.target_height.max(self.target_width)
        {
            return validation("resize_shorter must cover the crop size");
        }
        Ok(())
    }
}

/// Channel-major float image (C×H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

pub fn decode_and_preprocess(record: &ImageRecord, spec: &PreprocessSpec) -> Result<ImageTensor> {
    let img = image::open(&record.path).map_err(|e| Error::Decode {
        path: record.path.clone(),
        message: e.to_string(),
    })?;
    preprocess_image(&img.to_rgb32f(), spec).map_err(|e| match e {
        Error::Validation(msg) => Error::Decode {
            path: record.path.clone(),
            message: msg,
        },
        other => other,
    })
}

/// Geometry and normalization on an already decoded image with values in [0, 1].
pub fn preprocess_image(img: &image::Rgb32FImage, spec: &PreprocessSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let (th, tw) = (spec.target_height, spec.target_width);
    let resized = match spec.resize_policy {
        ResizePolicy::Resize => {
            if img.dimensions() == (tw, th) {
                img.clone()
            } else {
                imageops::resize(img, tw, th, FilterType::Triangle)
            }
        }
        ResizePolicy::CenterCrop => center_crop(img, tw, th)?,
        ResizePolicy::ResizeThenCrop => {
            let (w, h) = img.dimensions();
            let s = spec.resize_shorter;
            let scaled_len = |long: u32, short: u32| {
                ((long as f64 * s as f64 / short as f64).round() as u32).max(s)
            };
            let (nw, nh) = if w <= h {
                (s, scaled_len(h, w))
            } else {
                (scaled_len(w, h), s)
            };
            let scaled = imageops::resize(img, nw, nh, FilterType::Triangle);
            center_crop(&scaled, tw, th)?
        }
    };

    let (h, w) = (th as usize, tw as usize);
    let mut data = vec![0f32; IMAGE_CHANNELS * h * w];
    for (x, y, px) in resized.enumerate_pixels() {
        let pos = y as usize * w + x as usize;
        for c in 0..IMAGE_CHANNELS {
            data[c * h * w + pos] = (px.0[c] - spec.channel_means[c]) / spec.channel_stds[c];
        }
    }
    Ok(ImageTensor {
        channels: IMAGE_CHANNELS,
        height: h,
        width: w,
        data,
    })
}

fn center_crop(img: &image::Rgb32FImage, tw: u32, th: u32) -> Result<image::Rgb32FImage> {
    let (w, h) = img.dimensions();
    if w < tw || h < th {
        return validation(format!("image {w}x{h} is smaller than crop {tw}x{th}"));
    }
    let x0 = (w - tw) / 2;
    let y0 = (h - th) / 2;
    Ok(imageops::crop_imm(img, x0, y0, tw, th).to_image())
}
