//! Truncated residual backbone producing shallow feature maps.
//!
//! Parameters live in one flat `f32` buffer so that gradients, optimizer
//! state and checkpoints share a single layout. Batch normalization always
//! runs with its stored statistics (inference mode), which makes every
//! image's forward pass independent of the rest of the batch.

use std::ops::Range;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::ingest::{ImageTensor, IMAGE_CHANNELS};
use crate::store::Container;

pub const WEIGHTS_KIND: &str = "backbone-weights";
const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    /// Converted classification weights read from `weights_path`.
    PretrainedClassification,
    /// A weight file previously written by this crate.
    File,
    /// Deterministic He-normal initialization from the run seed.
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub architecture_id: String,
    pub truncation_layer: usize,
    pub weights_source: WeightsSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            architecture_id: "resnet18".into(),
            truncation_layer: 1,
            weights_source: WeightsSource::Seeded,
            weights_path: None,
            frozen: false,
        }
    }
}

struct Architecture {
    blocks: [usize; 4],
    widths: [usize; 4],
}

fn architecture(id: &str) -> Result<Architecture> {
    let widths = [64, 128, 256, 512];
    match id {
        "resnet18" => Ok(Architecture {
            blocks: [2, 2, 2, 2],
            widths,
        }),
        "resnet34" => Ok(Architecture {
            blocks: [3, 4, 6, 3],
            widths,
        }),
        other => validation(format!("unsupported architecture {other:?}")),
    }
}

/// Channel count after residual stage `stage` (1-based).
pub fn stage_channels(architecture_id: &str, stage: usize) -> Result<usize> {
    let arch = architecture(architecture_id)?;
    if !(1..=4).contains(&stage) {
        return validation(format!("stage {stage} outside 1..=4 for {architecture_id}"));
    }
    Ok(arch.widths[stage - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return validation(format!(
                "feature map data has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.positions();
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone)]
struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    w: Range<usize>,
}

impl Conv {
    fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
struct Bn {
    c: usize,
    gamma: Range<usize>,
    beta: Range<usize>,
    mean: Range<usize>,
    var: Range<usize>,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

#[derive(Debug, Clone)]
enum Slot {
    Param(Range<usize>),
    Buffer(Range<usize>),
}

#[derive(Debug, Clone)]
struct TensorSlot {
    name: String,
    shape: Vec<usize>,
    slot: Slot,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv,
    stem_bn: Bn,
    blocks: Vec<Block>,
    out_channels: usize,
    slots: Vec<TensorSlot>,
    params: Vec<f32>,
    buffers: Vec<f32>,
}

struct LayoutBuilder {
    params: usize,
    buffers: usize,
    slots: Vec<TensorSlot>,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let n: usize = shape.iter().product();
        let r = self.params..self.params + n;
        self.params += n;
        self.slots.push(TensorSlot {
            name,
            shape,
            slot: Slot::Param(r.clone()),
        });
        r
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let n: usize = shape.iter().product();
        let r = self.buffers..self.buffers + n;
        self.buffers += n;
        self.slots.push(TensorSlot {
            name,
            shape,
            slot: Slot::Buffer(r.clone()),
        });
        r
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let w = self.param(format!("{name}.weight"), vec![out_c, in_c, k, k]);
        Conv {
            in_c,
            out_c,
            k,
            stride,
            pad,
            w,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            c,
            gamma: self.param(format!("{name}.weight"), vec![c]),
            beta: self.param(format!("{name}.bias"), vec![c]),
            mean: self.buffer(format!("{name}.running_mean"), vec![c]),
            var: self.buffer(format!("{name}.running_var"), vec![c]),
        }
    }
}

impl Backbone {
    /// Builds the backbone and loads weights according to `config.weights_source`.
    pub fn from_config(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut net = Backbone::uninitialized(config)?;
        match config.weights_source {
            WeightsSource::Seeded => net.init_seeded(seed),
            WeightsSource::File | WeightsSource::PretrainedClassification => {
                let path = config.weights_path.as_ref().ok_or_else(|| {
                    Error::Init(format!(
                        "weights_source {:?} requires weights_path",
                        config.weights_source
                    ))
                })?;
                let container = Container::read(path)?;
                net.load_weights(&container)?;
            }
        }
        Ok(net)
    }

    fn uninitialized(config: &BackboneConfig) -> Result<Self> {
        let arch = architecture(&config.architecture_id)?;
        if !(1..=4).contains(&config.truncation_layer) {
            return validation(format!(
                "truncation_layer {} outside 1..=4 for {}",
                config.truncation_layer, config.architecture_id
            ));
        }
        let mut b = LayoutBuilder {
            params: 0,
            buffers: 0,
            slots: Vec::new(),
        };
        let stem = b.conv("conv1", IMAGE_CHANNELS, 64, 7, 2, 3);
        let stem_bn = b.bn("bn1", 64);
        let mut blocks = Vec::new();
        let mut in_c = 64;
        for stage in 0..config.truncation_layer {
            let width = arch.widths[stage];
            for i in 0..arch.blocks[stage] {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{i}", stage + 1);
                let conv1 = b.conv(&format!("{prefix}.conv1"), in_c, width, 3, stride, 1);
                let bn1 = b.bn(&format!("{prefix}.bn1"), width);
                let conv2 = b.conv(&format!("{prefix}.conv2"), width, width, 3, 1, 1);
                let bn2 = b.bn(&format!("{prefix}.bn2"), width);
                let down = (stride != 1 || in_c != width).then(|| {
                    (
                        b.conv(&format!("{prefix}.downsample.0"), in_c, width, 1, stride, 0),
                        b.bn(&format!("{prefix}.downsample.1"), width),
                    )
                });
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    down,
                });
                in_c = width;
            }
        }
        Ok(Backbone {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            out_channels: in_c,
            params: vec![0.0; b.params],
            buffers: vec![0.0; b.buffers],
            slots: b.slots,
        })
    }

    fn init_seeded(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65);
        for slot in &self.slots {
            let name = slot.name.as_str();
            match &slot.slot {
                Slot::Param(r) if slot.shape.len() == 4 => {
                    let fan_out = slot.shape[0] * slot.shape[2] * slot.shape[3];
                    let normal = Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).unwrap();
                    for v in &mut self.params[r.clone()] {
                        *v = normal.sample(&mut rng);
                    }
                }
                Slot::Param(r) => {
                    let fill = if name.ends_with(".weight") { 1.0 } else { 0.0 };
                    self.params[r.clone()].fill(fill);
                }
                Slot::Buffer(r) => {
                    let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                    self.buffers[r.clone()].fill(fill);
                }
            }
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Spatial size of the feature map for an input of `h`×`w`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.stem.out_dim(h), self.stem.out_dim(w));
        h = pool_out(h);
        w = pool_out(w);
        for b in &self.blocks {
            h = b.conv1.out_dim(h);
            w = b.conv1.out_dim(w);
        }
        (h, w)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            WEIGHTS_KIND,
            serde_json::json!({
                "architecture_id": self.config.architecture_id,
                "truncation_layer": self.config.truncation_layer,
            }),
        );
        self.write_tensors(&mut c, "");
        c
    }

    /// Appends every tensor under `prefix` (torchvision state-dict names).
    pub fn write_tensors(&self, c: &mut Container, prefix: &str) {
        for slot in &self.slots {
            let data = match &slot.slot {
                Slot::Param(r) => self.params[r.clone()].to_vec(),
                Slot::Buffer(r) => self.buffers[r.clone()].to_vec(),
            };
            c.push_f32(format!("{prefix}{}", slot.name), slot.shape.clone(), data);
        }
    }

    pub fn load_weights(&mut self, c: &Container) -> Result<()> {
        c.expect_kind(WEIGHTS_KIND)?;
        if let Some(arch) = c.meta.get("architecture_id").and_then(|v| v.as_str()) {
            if arch != self.config.architecture_id {
                return Err(Error::Init(format!(
                    "weight file is for {arch}, configured {}",
                    self.config.architecture_id
                )));
            }
        }
        self.read_tensors(c, "")
    }

    /// Loads every tensor under `prefix`; extra tensors (deeper stages,
    /// classifier) are ignored.
    pub fn read_tensors(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for slot in &self.slots {
            let name = format!("{prefix}{}", slot.name);
            let t = c
                .get(&name)
                .ok_or_else(|| Error::Init(format!("weight tensor {name} missing")))?;
            if t.shape != slot.shape {
                return Err(Error::Init(format!(
                    "weight tensor {name} has shape {:?}, expected {:?}",
                    t.shape, slot.shape
                )));
            }
            let values = t.data.to_f32();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Init(format!("weight tensor {name} is not finite")));
            }
            match &slot.slot {
                Slot::Param(r) => self.params[r.clone()].copy_from_slice(&values),
                Slot::Buffer(r) => self.buffers[r.clone()].copy_from_slice(&values),
            }
        }
        Ok(())
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        if img.channels != IMAGE_CHANNELS || img.data.len() != img.channels * img.height * img.width {
            return validation(format!(
                "backbone expects a {IMAGE_CHANNELS}xHxW image, got {}x{}x{} ({} values)",
                img.channels,
                img.height,
                img.width,
                img.data.len()
            ));
        }
        if img.height < 8 || img.width < 8 {
            return validation(format!(
                "input {}x{} too small for the backbone stem",
                img.height, img.width
            ));
        }
        Ok(())
    }

    pub fn extract(&self, img: &ImageTensor) -> Result<FeatureMap> {
        self.forward_impl(img, false).map(|(f, _)| f)
    }

    /// Forward pass that keeps the activations needed by [`Backbone::backward`].
    pub fn extract_traced(&self, img: &ImageTensor) -> Result<(FeatureMap, Trace)> {
        let (f, t) = self.forward_impl(img, true)?;
        Ok((f, t.expect("trace requested")))
    }

    fn forward_impl(&self, img: &ImageTensor, keep: bool) -> Result<(FeatureMap, Option<Trace>)> {
        self.check_input(img)?;
        let p = &self.params;
        let (h, w) = (img.height, img.width);
        let (a0, h1, w1) = conv_forward(&img.data, h, w, &self.stem, p);
        let mut r0 = a0.clone();
        bn_apply(&mut r0, h1 * w1, &self.stem_bn, p, &self.buffers);
        relu(&mut r0);
        let (pooled, argmax, h2, w2) = maxpool_forward(&r0, self.stem.out_c, h1, w1);

        let mut trace = keep.then(|| Trace {
            input: img.data.clone(),
            in_hw: (h, w),
            stem_out: a0,
            stem_relu: r0,
            stem_hw: (h1, w1),
            pool_argmax: argmax,
            pool_hw: (h2, w2),
            blocks: Vec::with_capacity(self.blocks.len()),
        });

        let (mut x, mut hh, mut ww) = (pooled, h2, w2);
        for block in &self.blocks {
            let (a1, oh, ow) = conv_forward(&x, hh, ww, &block.conv1, p);
            let mut r1 = a1.clone();
            bn_apply(&mut r1, oh * ow, &block.bn1, p, &self.buffers);
            relu(&mut r1);
            let (a2, _, _) = conv_forward(&r1, oh, ow, &block.conv2, p);
            let mut out = a2.clone();
            bn_apply(&mut out, oh * ow, &block.bn2, p, &self.buffers);
            let ad = match &block.down {
                Some((conv, bn)) => {
                    let (ad, _, _) = conv_forward(&x, hh, ww, conv, p);
                    let mut s = ad.clone();
                    bn_apply(&mut s, oh * ow, bn, p, &self.buffers);
                    out.iter_mut().zip(&s).for_each(|(o, s)| *o += s);
                    Some(ad)
                }
                None => {
                    out.iter_mut().zip(&x).for_each(|(o, s)| *o += s);
                    None
                }
            };
            relu(&mut out);
            if let Some(t) = trace.as_mut() {
                t.blocks.push(BlockTrace {
                    input: std::mem::take(&mut x),
                    in_hw: (hh, ww),
                    a1,
                    r1,
                    a2,
                    ad,
                    out: out.clone(),
                    out_hw: (oh, ow),
                });
            }
            x = out;
            hh = oh;
            ww = ow;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("backbone produced non-finite activations".into()));
        }
        let fmap = FeatureMap::new(self.out_channels, hh, ww, x)?;
        Ok((fmap, trace))
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(feature map).
    pub fn backward(&self, trace: &Trace, d_out: &[f32], grads: &mut [f32]) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let mut dx = d_out.to_vec();
        for (block, bt) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (oh, ow) = bt.out_hw;
            let (ih, iw) = bt.in_hw;
            let n = oh * ow;
            // through the final relu
            for (d, o) in dx.iter_mut().zip(&bt.out) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
            let ds = dx;
            // main branch
            let mut da2 = ds.clone();
            bn_backward(&mut da2, &bt.a2, n, &block.bn2, p, &self.buffers, grads);
            let mut dr1 = conv_backward(&bt.r1, oh, ow, &da2, &block.conv2, p, grads, true)
                .expect("dx requested");
            for (d, r) in dr1.iter_mut().zip(&bt.r1) {
                if *r <= 0.0 {
                    *d = 0.0;
                }
            }
            bn_backward(&mut dr1, &bt.a1, n, &block.bn1, p, &self.buffers, grads);
            let mut d_in = conv_backward(&bt.input, ih, iw, &dr1, &block.conv1, p, grads, true)
                .expect("dx requested");
            // shortcut
            match (&block.down, &bt.ad) {
                (Some((conv, bn)), Some(ad)) => {
                    let mut dad = ds;
                    bn_backward(&mut dad, ad, n, bn, p, &self.buffers, grads);
                    let d_short = conv_backward(&bt.input, ih, iw, &dad, conv, p, grads, true)
                        .expect("dx requested");
                    d_in.iter_mut().zip(&d_short).for_each(|(a, b)| *a += b);
                }
                _ => d_in.iter_mut().zip(&ds).for_each(|(a, b)| *a += b),
            }
            dx = d_in;
        }
        let (h1, w1) = trace.stem_hw;
        let mut dr0 = maxpool_backward(&dx, &trace.pool_argmax, self.stem.out_c * h1 * w1);
        for (d, r) in dr0.iter_mut().zip(&trace.stem_relu) {
            if *r <= 0.0 {
                *d = 0.0;
            }
        }
        bn_backward(&mut dr0, &trace.stem_out, h1 * w1, &self.stem_bn, p, &self.buffers, grads);
        let (h, w) = trace.in_hw;
        conv_backward(&trace.input, h, w, &dr0, &self.stem, p, grads, false);
    }
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f32>,
    in_hw: (usize, usize),
    stem_out: Vec<f32>,
    stem_relu: Vec<f32>,
    stem_hw: (usize, usize),
    pool_argmax: Vec<u32>,
    #[allow(dead_code)]
    pool_hw: (usize, usize),
    blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Vec<f32>,
    in_hw: (usize, usize),
    a1: Vec<f32>,
    r1: Vec<f32>,
    a2: Vec<f32>,
    ad: Option<Vec<f32>>,
    out: Vec<f32>,
    out_hw: (usize, usize),
}

fn pool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

fn relu(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn bn_scale_shift(bn: &Bn, p: &[f32], buffers: &[f32], c: usize) -> (f32, f32, f32) {
    let gamma = p[bn.gamma.start + c];
    let beta = p[bn.beta.start + c];
    let mean = buffers[bn.mean.start + c];
    let inv_std = 1.0 / (buffers[bn.var.start + c] + BN_EPS).sqrt();
    (gamma * inv_std, beta - mean * gamma * inv_std, inv_std)
}

fn bn_apply(x: &mut [f32], n: usize, bn: &Bn, p: &[f32], buffers: &[f32]) {
    for c in 0..bn.c {
        let (scale, shift, _) = bn_scale_shift(bn, p, buffers, c);
        for v in &mut x[c * n..(c + 1) * n] {
            *v = *v * scale + shift;
        }
    }
}

/// `d` holds d/d(output) on entry and d/d(input) on exit; `x` is the input.
fn bn_backward(d: &mut [f32], x: &[f32], n: usize, bn: &Bn, p: &[f32], buffers: &[f32], grads: &mut [f32]) {
    for c in 0..bn.c {
        let (scale, _, inv_std) = bn_scale_shift(bn, p, buffers, c);
        let mean = buffers[bn.mean.start + c];
        let (mut dgamma, mut dbeta) = (0f32, 0f32);
        for (dv, xv) in d[c * n..(c + 1) * n].iter_mut().zip(&x[c * n..(c + 1) * n]) {
            dgamma += *dv * (*xv - mean) * inv_std;
            dbeta += *dv;
            *dv *= scale;
        }
        grads[bn.gamma.start + c] += dgamma;
        grads[bn.beta.start + c] += dbeta;
    }
}

fn maxpool_forward(x: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let (oh, ow) = (pool_out(h), pool_out(w));
    let mut out = vec![0f32; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = (ch * h * w + best_idx) as u32;
            }
        }
    }
    (out, arg, oh, ow)
}

fn maxpool_backward(d: &[f32], arg: &[u32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0f32; in_len];
    for (g, &a) in d.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}

fn im2col(x: &[f32], h: usize, w: usize, conv: &Conv, oh: usize, ow: usize) -> Vec<f32> {
    let k = conv.k;
    let np = oh * ow;
    let mut cols = vec![0f32; conv.in_c * k * k * np];
    for ci in 0..conv.in_c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], h: usize, w: usize, conv: &Conv, oh: usize, ow: usize) -> Vec<f32> {
    let k = conv.k;
    let np = oh * ow;
    let mut x = vec![0f32; conv.in_c * h * w];
    for ci in 0..conv.in_c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn is_pointwise(conv: &Conv) -> bool {
    conv.k == 1 && conv.stride == 1 && conv.pad == 0
}

fn conv_forward(x: &[f32], h: usize, w: usize, conv: &Conv, p: &[f32]) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (conv.out_dim(h), conv.out_dim(w));
    let np = oh * ow;
    let kk = conv.in_c * conv.k * conv.k;
    let owned;
    let cols: &[f32] = if is_pointwise(conv) {
        x
    } else {
        owned = im2col(x, h, w, conv, oh, ow);
        &owned
    };
    let mut y = vec![0f32; conv.out_c * np];
    gemm(
        conv.out_c,
        kk,
        np,
        &p[conv.w.clone()],
        (kk as isize, 1),
        cols,
        (np as isize, 1),
        0.0,
        &mut y,
        np,
    );
    (y, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    h: usize,
    w: usize,
    dy: &[f32],
    conv: &Conv,
    p: &[f32],
    grads: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (oh, ow) = (conv.out_dim(h), conv.out_dim(w));
    let np = oh * ow;
    let kk = conv.in_c * conv.k * conv.k;
    let owned;
    let cols: &[f32] = if is_pointwise(conv) {
        x
    } else {
        owned = im2col(x, h, w, conv, oh, ow);
        &owned
    };
    // dW[oc, q] += sum_p dy[oc, p] * cols[q, p]
    gemm(
        conv.out_c,
        np,
        kk,
        dy,
        (np as isize, 1),
        cols,
        (1, np as isize),
        1.0,
        &mut grads[conv.w.clone()],
        kk,
    );
    if !need_dx {
        return None;
    }
    // dcols[q, p] = sum_oc W[oc, q] * dy[oc, p]
    let mut dcols = vec![0f32; kk * np];
    gemm(
        kk,
        conv.out_c,
        np,
        &p[conv.w.clone()],
        (1, kk as isize),
        dy,
        (np as isize, 1),
        0.0,
        &mut dcols,
        np,
    );
    if is_pointwise(conv) {
        Some(dcols)
    } else {
        Some(col2im(&dcols, h, w, conv, oh, ow))
    }
}

/// `c = a·b + beta·c` with `c` row-major (`m`×`n`, row stride `ldc`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(ldc >= n && c.len() >= span(m, n, ldc as isize, 1));
    // SAFETY: every index reachable through the strides is in bounds (checked above).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
