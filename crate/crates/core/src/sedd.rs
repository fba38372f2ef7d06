//! Dataset-level discrepancy scores on style embeddings.
//!
//! `sedd1` is the Euclidean distance between style centers; `sedd2` is the
//! three-term Gaussian-kernel MMD estimate with within-sample U-statistics
//! and a full cross term (its `i = j` pairs included). Because of that cross
//! term, comparing a sample of distinct points with itself gives a value
//! `≤ 0` rather than exactly zero; values are reported raw.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub const DEFAULT_BANDWIDTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCenter {
    pub dataset_id: String,
    pub vector: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    pub bandwidth: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }
}

/// Componentwise mean.
pub fn style_center<V: AsRef<[f64]>>(dataset_id: &str, embeddings: &[V]) -> Result<StyleCenter> {
    let Some(first) = embeddings.first() else {
        return validation(format!("no embeddings for {dataset_id}"));
    };
    let dim = first.as_ref().len();
    let mut sum = vec![0f64; dim];
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != dim {
            return validation("embeddings differ in dimension");
        }
        sum.iter_mut().zip(e).for_each(|(s, v)| *s += v);
    }
    let m = embeddings.len() as f64;
    Ok(StyleCenter {
        dataset_id: dataset_id.to_string(),
        vector: sum.into_iter().map(|s| s / m).collect(),
        count: embeddings.len(),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sedd1(new: &StyleCenter, real: &StyleCenter) -> Result<f64> {
    if new.vector.len() != real.vector.len() {
        return validation(format!(
            "center dimension mismatch {} vs {}",
            new.vector.len(),
            real.vector.len()
        ));
    }
    Ok(sq_dist(&new.vector, &real.vector).sqrt())
}

/// `exp(−‖x−y‖² / (2σ²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if x.len() != y.len() {
        return validation("kernel arguments differ in dimension");
    }
    Ok(kernel_unchecked(x, y, sigma))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return validation(format!("kernel bandwidth must be positive, got {sigma}"));
    }
    Ok(())
}

fn kernel_unchecked(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp()
}

/// Squared-MMD estimate between samples `xs` (m ≥ 2) and `ys` (n ≥ 2).
pub fn sedd2<V: AsRef<[f64]>>(xs: &[V], ys: &[V], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return validation(format!("sedd2 needs at least two samples per side, got {m} and {n}"));
    }
    let dim = xs[0].as_ref().len();
    if xs.iter().chain(ys).any(|v| v.as_ref().len() != dim) {
        return validation("embeddings differ in dimension");
    }
    let within = |s: &[V]| -> f64 {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += kernel_unchecked(s[i].as_ref(), s[j].as_ref(), sigma);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in xs {
        for y in ys {
            cross += kernel_unchecked(x.as_ref(), y.as_ref(), sigma);
        }
    }
    Ok(within(xs) + within(ys) - 2.0 * cross / (m * n) as f64)
}

/// Mean squared distance to the class center (trace of the biased covariance).
pub fn intra_class_variance<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<f64> {
    if embeddings.len() < 2 {
        return validation("intra-class variance needs at least two embeddings");
    }
    let c = style_center("", embeddings)?;
    Ok(embeddings
        .iter()
        .map(|e| sq_dist(e.as_ref(), &c.vector))
        .sum::<f64>()
        / embeddings.len() as f64)
}

/// Reference statistics for profiling. The compact form only supports `sedd1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Full {
        dataset_id: String,
        embeddings: Vec<Vec<f64>>,
    },
    CenterOnly(StyleCenter),
}

impl Reference {
    pub fn dataset_id(&self) -> &str {
        match self {
            Reference::Full { dataset_id, .. } => dataset_id,
            Reference::CenterOnly(c) => &c.dataset_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeddReport {
    pub dataset_id: String,
    pub reference_id: String,
    pub sedd1: f64,
    /// Absent when the reference only carries its center.
    pub sedd2: Option<f64>,
    pub m: usize,
    pub n: usize,
    pub intra_class_variance: Option<f64>,
    pub center: Vec<f64>,
    pub reference_center: Vec<f64>,
    pub bandwidth: f64,
    pub config_hash: String,
}

/// Scores `new` embeddings against the reference.
pub fn score_against(
    dataset_id: &str,
    new: &[Vec<f64>],
    reference: &Reference,
    kernel: KernelParams,
    config_hash: &str,
) -> Result<SeddReport> {
    let c_new = style_center(dataset_id, new)?;
    let (c_ref, sedd2, n) = match reference {
        Reference::Full { dataset_id: rid, embeddings } => {
            let c = style_center(rid, embeddings)?;
            let s2 = sedd2(new, embeddings, kernel.bandwidth)?;
            (c, Some(s2), embeddings.len())
        }
        Reference::CenterOnly(c) => (c.clone(), None, c.count),
    };
    Ok(SeddReport {
        dataset_id: dataset_id.to_string(),
        reference_id: reference.dataset_id().to_string(),
        sedd1: sedd1(&c_new, &c_ref)?,
        sedd2,
        m: new.len(),
        n,
        intra_class_variance: if new.len() >= 2 {
            Some(intra_class_variance(new)?)
        } else {
            None
        },
        center: c_new.vector,
        reference_center: c_ref.vector,
        bandwidth: kernel.bandwidth,
        config_hash: config_hash.to_string(),
    })
}
