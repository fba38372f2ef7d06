//! Exact (O(n²)) t-SNE for 2-D visualization of style embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

fn sq_dists(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetric joint probabilities with each row calibrated to `perplexity`.
fn joint_probabilities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let d = sq_dists(points);
    let target = perplexity.ln();
    let mut p = vec![0f64; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        // scale-free start
        let mean: f64 = row.iter().sum::<f64>() / (n - 1).max(1) as f64;
        if mean > 0.0 {
            beta = 1.0 / mean;
        }
        let mut probs = vec![0f64; n];
        for _ in 0..100 {
            let min_d = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-(row[j] - min_d) * beta).exp() };
                sum += probs[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                if probs[j] > 0.0 {
                    probs[j] /= sum;
                    h -= probs[j] * probs[j].ln();
                }
            }
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&probs);
    }
    let mut joint = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Embeds `points` into 2-D. Deterministic for a fixed seed.
pub fn tsne(points: &[Vec<f64>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 2 {
        return validation(format!("t-SNE needs at least 2 points, got {n}"));
    }
    let perplexity = params.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = joint_probabilities(points, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-2).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0f64; 2]; n];
    let mut gains = vec![[1f64; 2]; n];
    let mut num = vec![0f64; n * n];

    for iter in 0..params.iterations {
        let exaggeration = if iter < params.exaggeration_iters { params.early_exaggeration } else { 1.0 };
        let momentum = if iter < params.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let mult = (exaggeration * p[i * n + j] - q / z) * q;
                g[0] += mult * (y[i][0] - y[j][0]);
                g[1] += mult * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let grad = 4.0 * g[d];
                gains[i][d] = if (grad > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - params.learning_rate * gains[i][d] * grad;
            }
        }
        let mut mean = [0f64; 2];
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
            mean[0] += y[i][0];
            mean[1] += y[i][1];
        }
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    Ok(y)
}
