//! Gram statistics, upper-triangle vectorization and the projection head.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, Trace};
use crate::error::{validation, Error, Result};
use crate::ingest::{decode_and_preprocess, ImageRecord, ImageTensor, PreprocessSpec};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Symmetric C×C matrix of channel inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Row-major upper triangle (diagonal included) of a Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramVector {
    pub dim: usize,
    pub data: Vec<f64>,
}

pub fn triangle_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// `G_ij = Σ_h Σ_w F_i(h,w) F_j(h,w)`; the upper triangle is computed and mirrored.
pub fn gram_matrix(f: &FeatureMap) -> Result<GramMatrix> {
    if f.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature map contains non-finite values".into()));
    }
    let c = f.channels;
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|i| f.channel(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut data = vec![0f64; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            data[i * c + j] = s;
            data[j * c + i] = s;
        }
    }
    Ok(GramMatrix { dim: c, data })
}

pub fn gram_to_vector(g: &GramMatrix) -> GramVector {
    let c = g.dim;
    let mut data = Vec::with_capacity(triangle_len(c));
    for i in 0..c {
        data.extend_from_slice(&g.data[i * c + i..(i + 1) * c]);
    }
    GramVector { dim: c, data }
}

/// Inverse of [`gram_to_vector`].
pub fn vector_to_gram(v: &GramVector) -> Result<GramMatrix> {
    let c = v.dim;
    if v.data.len() != triangle_len(c) {
        return validation(format!(
            "gram vector of length {} does not match C={c}",
            v.data.len()
        ));
    }
    let mut data = vec![0f64; c * c];
    let mut k = 0;
    for i in 0..c {
        for j in i..c {
            data[i * c + j] = v.data[k];
            data[j * c + i] = v.data[k];
            k += 1;
        }
    }
    Ok(GramMatrix { dim: c, data })
}

/// Gradient w.r.t. the feature map of a loss on `scale * vec(triu(F Fᵀ))`.
pub fn gram_vector_backward(f: &FeatureMap, d_vec: &[f64], scale: f64) -> Vec<f32> {
    let c = f.channels;
    let n = f.positions();
    debug_assert_eq!(d_vec.len(), triangle_len(c));
    let mut m = vec![0f64; c * c];
    let mut k = 0;
    for i in 0..c {
        for j in i..c {
            if i == j {
                m[i * c + i] = 2.0 * d_vec[k] * scale;
            } else {
                m[i * c + j] = d_vec[k] * scale;
                m[j * c + i] = d_vec[k] * scale;
            }
            k += 1;
        }
    }
    let mut out = vec![0f32; c * n];
    for a in 0..c {
        let mut acc = vec![0f64; n];
        for j in 0..c {
            let w = m[a * c + j];
            if w == 0.0 {
                continue;
            }
            for (o, &x) in acc.iter_mut().zip(f.channel(j)) {
                *o += w * x as f64;
            }
        }
        for (dst, v) in out[a * n..(a + 1) * n].iter_mut().zip(acc) {
            *dst = v as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleConfig {
    /// Hidden widths between the Gram vector and the embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    /// Divide the Gram matrix by C·H·W before vectorizing.
    pub normalize_gram: bool,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            hidden: vec![512],
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            activation: Activation::Relu,
            normalize_gram: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    inputs: usize,
    outputs: usize,
    w: Range<usize>,
    b: Range<usize>,
}

/// Fully connected projection from the Gram vector to the style embedding.
/// The activation sits between layers, never after the last one.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Linear>,
    params: Vec<f64>,
}

pub struct HeadTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl ProjectionHead {
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return validation(format!("projection head widths {widths:?} invalid"));
        }
        let mut offset = 0;
        let layers = widths
            .windows(2)
            .map(|w| {
                let wr = offset..offset + w[0] * w[1];
                offset = wr.end;
                let br = offset..offset + w[1];
                offset = br.end;
                Linear {
                    inputs: w[0],
                    outputs: w[1],
                    w: wr,
                    b: br,
                }
            })
            .collect();
        Ok(ProjectionHead {
            widths: widths.to_vec(),
            activation,
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Uniform(±1/√fan_in) initialization for weights and biases.
    pub fn seeded(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut head = Self::zeros(widths, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        for layer in &head.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for v in &mut head.params[layer.w.start..layer.b.end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(head)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight (row-major, outputs × inputs) and bias of layer `i`.
    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let l = &self.layers[i];
        let (w, b) = self.params[l.w.start..l.b.end].split_at_mut(l.w.len());
        (w, b)
    }

    pub fn project(&self, v: &GramVector) -> Result<Vec<f64>> {
        self.forward(&v.data)
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.forward_traced(v).map(|(z, _)| z)
    }

    pub fn forward_traced(&self, v: &[f64]) -> Result<(Vec<f64>, HeadTrace)> {
        if v.len() != self.input_dim() {
            return validation(format!(
                "projection head expects {} inputs, got {}",
                self.input_dim(),
                v.len()
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = v.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let w = &self.params[l.w.clone()];
            let b = &self.params[l.b.clone()];
            let y: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &w[o * l.inputs..(o + 1) * l.inputs];
                    b[o] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let next = if li + 1 < self.layers.len() {
                y.iter().map(|&t| self.activation.apply(t)).collect()
            } else {
                y.clone()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(y);
        }
        Ok((x, HeadTrace { inputs, pre }))
    }

    /// Accumulates parameter gradients and returns d(loss)/d(input).
    pub fn backward(&self, trace: &HeadTrace, dz: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let mut d = dz.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if li + 1 < self.layers.len() {
                for (dv, &p) in d.iter_mut().zip(&trace.pre[li]) {
                    *dv *= self.activation.derivative(p);
                }
            }
            let x = &trace.inputs[li];
            let w = &self.params[l.w.clone()];
            let mut dx = vec![0f64; l.inputs];
            for o in 0..l.outputs {
                let g = d[o];
                grads[l.b.start + o] += g;
                if g == 0.0 {
                    continue;
                }
                let gw = &mut grads[l.w.start + o * l.inputs..l.w.start + (o + 1) * l.inputs];
                for (gwi, xi) in gw.iter_mut().zip(x) {
                    *gwi += g * xi;
                }
                for (dxi, wi) in dx.iter_mut().zip(&w[o * l.inputs..(o + 1) * l.inputs]) {
                    *dxi += g * wi;
                }
            }
            d = dx;
        }
        d
    }
}

/// A style embedding tied to the record it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub data: Vec<f64>,
    pub record: ImageRecord,
    pub class_label: u32,
}

/// Backbone + Gram statistics + projection head.
#[derive(Debug, Clone)]
pub struct StyleModel {
    pub backbone: Backbone,
    pub head: ProjectionHead,
    pub normalize_gram: bool,
}

/// Intermediate values kept for one image during training.
pub struct StyleTrace {
    backbone: Trace,
    features: FeatureMap,
    scale: f64,
    head: HeadTrace,
}

impl StyleModel {
    pub fn new(backbone: Backbone, style: &StyleConfig, seed: u64) -> Result<Self> {
        let mut widths = vec![triangle_len(backbone.out_channels())];
        widths.extend_from_slice(&style.hidden);
        widths.push(style.embedding_dim);
        let head = ProjectionHead::seeded(&widths, style.activation, seed)?;
        Ok(StyleModel {
            backbone,
            head,
            normalize_gram: style.normalize_gram,
        })
    }

    fn gram_scale(&self, f: &FeatureMap) -> f64 {
        if self.normalize_gram {
            1.0 / (f.channels * f.positions()) as f64
        } else {
            1.0
        }
    }

    pub fn gram_vector(&self, f: &FeatureMap) -> Result<GramVector> {
        let scale = self.gram_scale(f);
        Ok(gram_to_vector(&gram_matrix(f)?.scaled(scale)))
    }

    pub fn embed_tensor(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let f = self.backbone.extract(img)?;
        let v = self.gram_vector(&f)?;
        self.head.project(&v)
    }

    pub fn forward_traced(&self, img: &ImageTensor) -> Result<(Vec<f64>, StyleTrace)> {
        let (features, backbone) = self.backbone.extract_traced(img)?;
        let scale = self.gram_scale(&features);
        let v = gram_to_vector(&gram_matrix(&features)?.scaled(scale));
        let (z, head) = self.head.forward_traced(&v.data)?;
        Ok((
            z,
            StyleTrace {
                backbone,
                features,
                scale,
                head,
            },
        ))
    }

    /// Accumulates head gradients and, when `backbone_grads` is given,
    /// backbone gradients for d(loss)/dz = `dz`.
    pub fn backward(
        &self,
        trace: &StyleTrace,
        dz: &[f64],
        head_grads: &mut [f64],
        backbone_grads: Option<&mut [f32]>,
    ) {
        let dv = self.head.backward(&trace.head, dz, head_grads);
        if let Some(bg) = backbone_grads {
            let df = gram_vector_backward(&trace.features, &dv, trace.scale);
            self.backbone.backward(&trace.backbone, &df, bg);
        }
    }

    /// Embeds records in parallel; output order follows `records`.
    pub fn embed_records(
        &self,
        records: &[(ImageRecord, u32)],
        preprocess: &PreprocessSpec,
    ) -> Result<Vec<StyleEmbedding>> {
        records
            .par_iter()
            .map(|(rec, label)| {
                let img = decode_and_preprocess(rec, preprocess)?;
                Ok(StyleEmbedding {
                    data: self.embed_tensor(&img)?,
                    record: rec.clone(),
                    class_label: *label,
                })
            })
            .collect()
    }
}
