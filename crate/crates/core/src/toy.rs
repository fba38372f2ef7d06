//! Procedural street-scene corpus with a "real" family and two perturbed
//! clones sharing scene content.
//!
//! `mild` is a slight warm color shift; `strong` boosts saturation,
//! posterizes and adds sensor noise. All three families of one scene share
//! its `scene_id` and weather tag.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{validation, Error, Result};
use crate::ingest::{write_manifest, ImageRecord, Realism};

pub const REAL_ID: &str = "toy-real";
pub const MILD_ID: &str = "toy-mild";
pub const STRONG_ID: &str = "toy-strong";

const WEATHERS: [&str; 3] = ["clear", "overcast", "dusk"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub scenes: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            scenes: 300,
            size: 128,
            seed: 0,
        }
    }
}

/// Manifest paths of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub real: PathBuf,
    pub mild: PathBuf,
    pub strong: PathBuf,
}

impl ToyCorpus {
    pub fn manifests(&self) -> [&Path; 3] {
        [&self.real, &self.mild, &self.strong]
    }
}

type Color = [f32; 3];

fn lerp(a: Color, b: Color, t: f32) -> Color {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn jitter(rng: &mut ChaCha8Rng, c: Color, amount: f32) -> Color {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 255.0))
}

/// Multi-octave lattice noise in roughly [0, 1].
struct ValueNoise {
    grids: Vec<(usize, Vec<f32>)>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, base_cells: usize, octaves: usize) -> Self {
        let grids = (0..octaves)
            .map(|o| {
                let cells = base_cells << o;
                let vals = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f32>()).collect();
                (cells, vals)
            })
            .collect();
        ValueNoise { grids }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (cells, vals) in &self.grids {
            let x = u.clamp(0.0, 1.0) * *cells as f32;
            let y = v.clamp(0.0, 1.0) * *cells as f32;
            let (x0, y0) = ((x as usize).min(cells - 1), (y as usize).min(cells - 1));
            let (fx, fy) = (x - x0 as f32, y - y0 as f32);
            let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            let g = |i: usize, j: usize| vals[j * (cells + 1) + i];
            let top = g(x0, y0) + (g(x0 + 1, y0) - g(x0, y0)) * sx;
            let bot = g(x0, y0 + 1) + (g(x0 + 1, y0 + 1) - g(x0, y0 + 1)) * sx;
            total += amp * (top + (bot - top) * sy);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

struct Canvas {
    size: usize,
    px: Vec<Color>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, mut shade: impl FnMut(usize, usize) -> Color) {
        let s = self.size as f32;
        let (xa, xb) = (x0.clamp(0.0, s) as usize, x1.clamp(0.0, s) as usize);
        let (ya, yb) = (y0.clamp(0.0, s) as usize, y1.clamp(0.0, s) as usize);
        for y in ya..yb {
            for x in xa..xb {
                self.px[y * self.size + x] = shade(x, y);
            }
        }
    }

    fn fill_disc(&mut self, cx: f32, cy: f32, r: f32, mut shade: impl FnMut(usize, usize) -> Color) {
        let s = self.size as f32;
        let (xa, xb) = ((cx - r).clamp(0.0, s) as usize, (cx + r + 1.0).clamp(0.0, s) as usize);
        let (ya, yb) = ((cy - r).clamp(0.0, s) as usize, (cy + r + 1.0).clamp(0.0, s) as usize);
        for y in ya..yb {
            for x in xa..xb {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.px[y * self.size + x] = shade(x, y);
                }
            }
        }
    }
}

/// Renders one street-like scene. The same `seed` always gives the same image.
pub fn render_scene(seed: u64, size: u32, weather: &str) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as usize;
    let s = size as f32;
    let mut cv = Canvas {
        size: n,
        px: vec![[0.0; 3]; n * n],
    };

    let (sky_top, sky_bottom, light): (Color, Color, f32) = match weather {
        "overcast" => ([150.0, 155.0, 165.0], [200.0, 200.0, 205.0], 0.8),
        "dusk" => ([60.0, 50.0, 110.0], [240.0, 140.0, 80.0], 0.65),
        _ => ([70.0, 130.0, 220.0], [180.0, 210.0, 240.0], 1.0),
    };
    let sky_top = jitter(&mut rng, sky_top, 20.0);
    let sky_bottom = jitter(&mut rng, sky_bottom, 20.0);
    let horizon = s * rng.random_range(0.35..0.6);
    let clouds = ValueNoise::new(&mut rng, 3, 4);
    let cloud_amount = if weather == "overcast" { 0.6 } else { rng.random_range(0.0..0.35) };
    cv.fill_rect(0.0, 0.0, s, horizon, |x, y| {
        let base = lerp(sky_top, sky_bottom, y as f32 / horizon.max(1.0));
        let c = (clouds.at(x as f32 / s, y as f32 / s) - 0.45).max(0.0) * 2.0 * cloud_amount;
        lerp(base, [235.0, 235.0, 240.0], c.min(1.0))
    });

    let grass = jitter(&mut rng, [90.0, 120.0, 60.0], 25.0);
    let ground_noise = ValueNoise::new(&mut rng, 6, 4);
    cv.fill_rect(0.0, horizon, s, s, |x, y| {
        let t = ground_noise.at(x as f32 / s, y as f32 / s);
        grass.map(|v| v * (0.75 + 0.5 * t))
    });

    // buildings along the horizon
    let facade_noise = ValueNoise::new(&mut rng, 8, 3);
    for _ in 0..rng.random_range(2..7) {
        let w = s * rng.random_range(0.1..0.3);
        let h = s * rng.random_range(0.1..0.35);
        let x0 = rng.random_range(-0.1..0.95) * s;
        let base = horizon + s * 0.04;
        let wall = jitter(&mut rng, [150.0, 130.0, 115.0], 60.0);
        let window = jitter(&mut rng, [60.0, 70.0, 85.0], 25.0);
        let pitch = rng.random_range(4.0..9.0f32);
        cv.fill_rect(x0, base - h, x0 + w, base, |x, y| {
            let (lx, ly) = (x as f32 - x0, y as f32 - (base - h));
            let tex = 0.85 + 0.3 * facade_noise.at(x as f32 / s, y as f32 / s);
            if lx % pitch > pitch * 0.45 && ly % pitch > pitch * 0.5 {
                window
            } else {
                wall.map(|v| v * tex)
            }
        });
    }

    // road in perspective towards a vanishing point on the horizon
    let vx = s * rng.random_range(0.3..0.7);
    let half_bottom = s * rng.random_range(0.3..0.55);
    let asphalt = jitter(&mut rng, [85.0, 85.0, 90.0], 15.0);
    let road_noise = ValueNoise::new(&mut rng, 16, 3);
    for y in horizon.ceil() as usize..n {
        let t = (y as f32 - horizon) / (s - horizon).max(1.0);
        let (left, right) = (vx - half_bottom * t, vx + half_bottom * t);
        let dash = ((t * 12.0 + 0.3).fract() < 0.5) && t > 0.05;
        cv.fill_rect(left, y as f32, right, y as f32 + 1.0, |x, _| {
            let centre = (x as f32 - vx).abs() < 0.6 + 1.2 * t;
            if centre && dash {
                [225.0, 215.0, 170.0]
            } else {
                asphalt.map(|v| v * (0.85 + 0.3 * road_noise.at(x as f32 / s, y as f32 / s)))
            }
        });
    }

    // trees and cars
    let foliage_noise = ValueNoise::new(&mut rng, 12, 3);
    for _ in 0..rng.random_range(1..6) {
        let cx = rng.random_range(0.0..1.0) * s;
        let cy = horizon + rng.random_range(-0.05..0.25) * s;
        let r = s * rng.random_range(0.04..0.12);
        let leaf = jitter(&mut rng, [50.0, 100.0, 45.0], 20.0);
        cv.fill_rect(cx - r * 0.12, cy, cx + r * 0.12, cy + r * 1.6, |_, _| [80.0, 60.0, 40.0]);
        cv.fill_disc(cx, cy, r, |x, y| leaf.map(|v| v * (0.6 + 0.8 * foliage_noise.at(x as f32 / s, y as f32 / s))));
    }
    for _ in 0..rng.random_range(0..4) {
        let t = rng.random_range(0.15..0.9f32);
        let y = horizon + t * (s - horizon);
        let w = s * 0.18 * t + 2.0;
        let x = vx + rng.random_range(-0.6..0.6) * half_bottom * t;
        let body = jitter(&mut rng, [120.0, 120.0, 120.0], 110.0);
        cv.fill_rect(x - w / 2.0, y - w * 0.45, x + w / 2.0, y, |_, yy| {
            if (yy as f32) < y - w * 0.3 {
                body.map(|v| v * 0.6)
            } else {
                body
            }
        });
    }

    // global lighting, vignette and mild sensor noise
    let sensor = Normal::new(0.0f32, 2.5).unwrap();
    let mut img = RgbImage::new(size, size);
    for (i, p) in img.pixels_mut().enumerate() {
        let (x, y) = ((i % n) as f32 / s - 0.5, (i / n) as f32 / s - 0.5);
        let vignette = 1.0 - 0.35 * (x * x + y * y);
        let c = cv.px[i];
        *p = Rgb(c.map(|v| (v * light * vignette + sensor.sample(&mut rng)).round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// Slight warm tint: red up, blue down.
pub fn mild_shift(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let [r, g, b] = p.0.map(f32::from);
        *p = Rgb([
            (r * 1.10 + 10.0).round().clamp(0.0, 255.0) as u8,
            (g * 1.02 + 3.0).round().clamp(0.0, 255.0) as u8,
            (b * 0.86).round().clamp(0.0, 255.0) as u8,
        ]);
    }
    out
}

/// Saturation boost, 4-level posterization and additive noise.
pub fn strong_shift(img: &RgbImage, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 14.0).unwrap();
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let c = p.0.map(f32::from);
        let luma = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        *p = Rgb(c.map(|v| {
            let sat = (luma + (v - luma) * 1.8).clamp(0.0, 255.0);
            let level = (sat / 256.0 * 4.0).floor().min(3.0);
            let post = level * 85.0;
            (post + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
        }));
    }
    out
}

/// Writes `scenes` images per family under `dir` plus one JSON-Lines
/// manifest per family, with paths relative to `dir`.
pub fn generate(dir: &Path, spec: &ToySpec) -> Result<ToyCorpus> {
    if spec.scenes == 0 || spec.size < 16 {
        return validation(format!("toy corpus needs scenes > 0 and size ≥ 16, got {spec:?}"));
    }
    for family in ["real", "mild", "strong"] {
        fs::create_dir_all(dir.join(family)).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut picker = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut real = Vec::with_capacity(spec.scenes);
    let mut mild = Vec::with_capacity(spec.scenes);
    let mut strong = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let weather = WEATHERS[picker.random_range(0..WEATHERS.len())];
        let scene_seed: u64 = picker.random();
        let base = render_scene(scene_seed, spec.size, weather);
        let scene_id = format!("scene-{i:04}");
        let name = format!("{scene_id}.png");
        let families = [
            ("real", REAL_ID, Realism::Real, base.clone(), &mut real),
            ("mild", MILD_ID, Realism::Synthetic, mild_shift(&base), &mut mild),
            ("strong", STRONG_ID, Realism::Synthetic, strong_shift(&base, scene_seed ^ 0x5eed), &mut strong),
        ];
        for (family, id, realism, img, records) in families {
            let rel = PathBuf::from(family).join(&name);
            img.save(dir.join(&rel))
                .map_err(|e| Error::Decode {
                    path: dir.join(&rel),
                    message: e.to_string(),
                })?;
            records.push(ImageRecord {
                path: rel,
                dataset_id: id.to_string(),
                realism,
                weather: Some(weather.to_string()),
                split: None,
                scene_id: Some(scene_id.clone()),
            });
        }
    }
    let corpus = ToyCorpus {
        real: dir.join("real.jsonl"),
        mild: dir.join("mild.jsonl"),
        strong: dir.join("strong.jsonl"),
    };
    write_manifest(&corpus.real, &real)?;
    write_manifest(&corpus.mild, &mild)?;
    write_manifest(&corpus.strong, &strong)?;
    Ok(corpus)
}
