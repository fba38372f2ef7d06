//! Metric-learning pieces: cross-batch memory, class centers, batch-hard
//! mining, center loss and NT-Xent, each with its analytic gradient.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// FIFO of detached `(embedding, label)` pairs from earlier batches.
#[derive(Debug, Clone)]
pub struct EmbeddingMemory {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, u32)>,
}

impl EmbeddingMemory {
    pub fn new(capacity: usize) -> Self {
        EmbeddingMemory {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, embedding: Vec<f64>, label: u32) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((embedding, label));
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u32)> {
        self.entries.iter().map(|(e, l)| (e.as_slice(), *l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterLossForm {
    /// Mean Euclidean distance to the class center.
    Unsquared,
    /// Mean squared Euclidean distance.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterUpdate {
    /// Plain gradient descent on the center loss.
    Gradient,
    /// Move each center toward its batch mean: `c += min(η, 1)·Σ(z − c)/(1 + n)`.
    MeanShift,
}

/// Learnable per-class centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub centers: BTreeMap<u32, Vec<f64>>,
    pub center_lr: f64,
}

impl ClassCenters {
    /// Zero-initialized centers for `labels`.
    pub fn zeros(labels: impl IntoIterator<Item = u32>, dim: usize, center_lr: f64) -> Self {
        ClassCenters {
            centers: labels.into_iter().map(|l| (l, vec![0.0; dim])).collect(),
            center_lr,
        }
    }

    pub fn get(&self, label: u32) -> Result<&[f64]> {
        self.centers
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Validation(format!("no center registered for class {label}")))
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return validation(format!("dimension mismatch {} vs {}", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Hard pairs mined per anchor. Indices refer to the pool that was mined.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Anchors dropped for lacking a positive or a negative.
    pub skipped: usize,
}

impl MinedPairs {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Cosine similarity matrix of `pool` (row-major).
pub fn similarity_matrix(pool: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = pool.len();
    let norms: Vec<f64> = pool.iter().map(|v| norm(v)).collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0 || !x.is_finite()) {
        return Err(Error::Numeric(format!("pool entry {i} has zero or non-finite norm")));
    }
    let mut s = vec![0f64; n * n];
    for i in 0..n {
        s[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = (dot(&pool[i], &pool[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Ok(s)
}

/// For each anchor: the same-class entry with the lowest cosine similarity
/// (hard positive) and the other-class entry with the highest (hard
/// negative). Exact copies of the anchor never count as positives. Ties go
/// to the lowest index.
pub fn batch_hard_mine(pool: &[Vec<f64>], labels: &[u32], anchors: &[usize]) -> Result<MinedPairs> {
    if pool.len() != labels.len() {
        return validation("pool and labels differ in length");
    }
    let n = pool.len();
    let sim = similarity_matrix(pool)?;
    let mut out = MinedPairs::default();
    for &a in anchors {
        if a >= n {
            return validation(format!("anchor {a} outside pool of {n}"));
        }
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let s = sim[a * n + j];
            if labels[j] == labels[a] {
                if pool[j] == pool[a] {
                    continue;
                }
                if pos.is_none_or(|(_, best)| s < best) {
                    pos = Some((j, s));
                }
            } else if neg.is_none_or(|(_, best)| s > best) {
                neg = Some((j, s));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((q, _))) => {
                out.anchors.push(a);
                out.positives.push(p);
                out.negatives.push(q);
            }
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Center loss value and its gradients w.r.t. the embeddings and centers.
#[derive(Debug, Clone)]
pub struct CenterLossGrad {
    pub loss: f64,
    pub d_embeddings: Vec<Vec<f64>>,
    pub d_centers: BTreeMap<u32, Vec<f64>>,
}

pub fn center_loss(embeddings: &[Vec<f64>], labels: &[u32], centers: &ClassCenters, form: CenterLossForm) -> Result<f64> {
    center_loss_grad(embeddings, labels, centers, form).map(|g| g.loss)
}

pub fn center_loss_grad(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    centers: &ClassCenters,
    form: CenterLossForm,
) -> Result<CenterLossGrad> {
    if embeddings.len() != labels.len() {
        return validation("embeddings and labels differ in length");
    }
    let m = embeddings.len();
    if m == 0 {
        return validation("center loss of an empty batch");
    }
    let mut loss = 0.0;
    let mut d_embeddings = Vec::with_capacity(m);
    let mut d_centers: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (z, &y) in embeddings.iter().zip(labels) {
        let c = centers.get(y)?;
        if c.len() != z.len() {
            return validation(format!("center {y} has dim {} but embedding {}", c.len(), z.len()));
        }
        let diff: Vec<f64> = z.iter().zip(c).map(|(a, b)| a - b).collect();
        let dist = norm(&diff);
        let coef = match form {
            CenterLossForm::Unsquared => {
                loss += dist;
                // subgradient 0 at the center
                if dist > 0.0 {
                    1.0 / (m as f64 * dist)
                } else {
                    0.0
                }
            }
            CenterLossForm::Squared => {
                loss += dist * dist;
                2.0 / m as f64
            }
        };
        let g: Vec<f64> = diff.iter().map(|d| d * coef).collect();
        let dc = d_centers.entry(y).or_insert_with(|| vec![0.0; z.len()]);
        dc.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
        d_embeddings.push(g);
    }
    Ok(CenterLossGrad {
        loss: loss / m as f64,
        d_embeddings,
        d_centers,
    })
}

/// `η⁰ · γ^t`.
pub fn decay_center_lr(t: u32, initial: f64, gamma: f64) -> f64 {
    initial * gamma.powi(t as i32)
}

/// One update step on the centers touched by this batch; other centers are
/// left bit-identical.
pub fn update_centers(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    centers: &mut ClassCenters,
    lr: f64,
    form: CenterLossForm,
    rule: CenterUpdate,
) -> Result<()> {
    if !(lr > 0.0) {
        return validation(format!("center learning rate must be positive, got {lr}"));
    }
    centers.center_lr = lr;
    match rule {
        CenterUpdate::Gradient => {
            let g = center_loss_grad(embeddings, labels, centers, form)?;
            for (label, dc) in g.d_centers {
                let c = centers.centers.get_mut(&label).expect("checked by center_loss_grad");
                c.iter_mut().zip(&dc).for_each(|(ci, gi)| *ci -= lr * gi);
            }
        }
        CenterUpdate::MeanShift => {
            let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
            for (z, &y) in embeddings.iter().zip(labels) {
                let c = centers.get(y)?;
                let e = sums.entry(y).or_insert_with(|| (vec![0.0; z.len()], 0));
                e.0.iter_mut().zip(z.iter().zip(c)).for_each(|(s, (zi, ci))| *s += zi - ci);
                e.1 += 1;
            }
            let step = lr.min(1.0);
            for (label, (sum, count)) in sums {
                let c = centers.centers.get_mut(&label).unwrap();
                c.iter_mut()
                    .zip(&sum)
                    .for_each(|(ci, s)| *ci += step * s / (1 + count) as f64);
            }
        }
    }
    Ok(())
}

/// NT-Xent over `(anchor, positive)` index pairs into `pool`:
/// `Σ −log( exp(s_ap/τ) / Σ_{k≠a} exp(s_ak/τ) )`.
pub fn ntxent_loss(pool: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64) -> Result<f64> {
    ntxent_impl(pool, pairs, tau, false).map(|(l, _)| l)
}

/// Loss plus d(loss)/d(pool entry) for every pool entry.
pub fn ntxent_grad(pool: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    ntxent_impl(pool, pairs, tau, true).map(|(l, g)| (l, g.unwrap()))
}

fn ntxent_impl(
    pool: &[Vec<f64>],
    pairs: &[(usize, usize)],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return validation(format!("temperature must be positive, got {tau}"));
    }
    let n = pool.len();
    for &(a, p) in pairs {
        if a >= n || p >= n || a == p {
            return validation(format!("invalid pair ({a}, {p}) for pool of {n}"));
        }
    }
    if pairs.is_empty() {
        return Ok((0.0, want_grad.then(|| vec![vec![0.0; pool.first().map_or(0, Vec::len)]; n])));
    }
    let sim = similarity_matrix(pool)?;
    let mut loss = 0.0;
    // d(loss)/d(sim[a][k])
    let mut dsim = if want_grad { vec![0f64; n * n] } else { Vec::new() };
    for &(a, p) in pairs {
        let logits: Vec<(usize, f64)> = (0..n).filter(|&k| k != a).map(|k| (k, sim[a * n + k] / tau)).collect();
        let max = logits.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|(_, v)| (v - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - sim[a * n + p] / tau;
        if want_grad {
            for &(k, v) in &logits {
                let softmax = (v - lse).exp();
                dsim[a * n + k] += softmax / tau;
            }
            dsim[a * n + p] -= 1.0 / tau;
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let dim = pool[0].len();
    let norms: Vec<f64> = pool.iter().map(|v| norm(v)).collect();
    let mut grads = vec![vec![0f64; dim]; n];
    for (idx, &g) in dsim.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (i, j) = (idx / n, idx % n);
        let s = sim[i * n + j];
        // ∂cos(u,v)/∂u = v/(|u||v|) − cos·u/|u|²
        for d in 0..dim {
            grads[i][d] += g * (pool[j][d] / (norms[i] * norms[j]) - s * pool[i][d] / (norms[i] * norms[i]));
            grads[j][d] += g * (pool[i][d] / (norms[i] * norms[j]) - s * pool[j][d] / (norms[j] * norms[j]));
        }
    }
    Ok((loss, Some(grads)))
}

pub fn total_loss(ntxent: f64, center: f64, lambda: f64) -> f64 {
    ntxent + lambda * center
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    fn random_pool(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn cosine_examples() {
        let a = vec![0.3, -1.0, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&unit(64, 0, 1.0), &unit(64, 1, 2.0)).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&unit(64, 0, 1.0), &unit(64, 0, -1.0)).unwrap(), -1.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn memory_is_fifo() {
        let mut mem = EmbeddingMemory::new(3);
        for i in 0..5 {
            mem.push(vec![i as f64], i);
        }
        let labels: Vec<u32> = mem.iter().map(|(_, l)| l).collect();
        assert_eq!(labels, vec![2, 3, 4]);
        assert_eq!(mem.len(), 3);
    }

    #[test]
    fn hard_positive_is_least_similar() {
        // anchor along x; P1 nearly parallel, P2 nearly orthogonal
        let pool = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.435_889_894_354_067_4],
            vec![0.1, 0.994_987_437_106_62],
            vec![-1.0, 0.2],
        ];
        let labels = [0, 0, 0, 1];
        let mined = batch_hard_mine(&pool, &labels, &[0]).unwrap();
        assert_eq!(mined.positives, vec![2]);
        assert_eq!(mined.negatives, vec![3]);
    }

    #[test]
    fn single_class_pool_skips_everything() {
        let pool = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let mined = batch_hard_mine(&pool, &[4, 4, 4], &[0, 1, 2]).unwrap();
        assert!(mined.is_empty());
        assert_eq!(mined.skipped, 3);
    }

    #[test]
    fn duplicates_of_anchor_are_not_positives() {
        let pool = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mined = batch_hard_mine(&pool, &[0, 0, 1], &[0]).unwrap();
        assert_eq!(mined.skipped, 1);
    }

    fn mine_oracle(pool: &[Vec<f64>], labels: &[u32]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (mut an, mut po, mut ne) = (vec![], vec![], vec![]);
        for a in 0..pool.len() {
            let same: Vec<usize> = (0..pool.len()).filter(|&j| j != a && labels[j] == labels[a] && pool[j] != pool[a]).collect();
            let diff: Vec<usize> = (0..pool.len()).filter(|&j| labels[j] != labels[a]).collect();
            if same.is_empty() || diff.is_empty() {
                continue;
            }
            let mut p = same[0];
            for &j in &same {
                if cos(&pool[a], &pool[j]) < cos(&pool[a], &pool[p]) {
                    p = j;
                }
            }
            let mut q = diff[0];
            for &j in &diff {
                if cos(&pool[a], &pool[j]) > cos(&pool[a], &pool[q]) {
                    q = j;
                }
            }
            an.push(a);
            po.push(p);
            ne.push(q);
        }
        (an, po, ne)
    }

    #[test]
    fn miner_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=12 {
            for _ in 0..10 {
                let pool = random_pool(&mut rng, n, 5);
                let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
                let all: Vec<usize> = (0..n).collect();
                let mined = batch_hard_mine(&pool, &labels, &all).unwrap();
                let (a, p, q) = mine_oracle(&pool, &labels);
                assert_eq!((mined.anchors, mined.positives, mined.negatives), (a, p, q));
            }
        }
    }

    proptest! {
        #[test]
        fn mining_is_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = random_pool(&mut rng, 9, 4);
            let labels: Vec<u32> = (0..9).map(|i| (i % 3) as u32).collect();
            let scaled: Vec<Vec<f64>> = pool.iter().map(|v| v.iter().map(|x| x * alpha).collect()).collect();
            let all: Vec<usize> = (0..9).collect();
            prop_assert_eq!(
                batch_hard_mine(&pool, &labels, &all).unwrap(),
                batch_hard_mine(&scaled, &labels, &all).unwrap()
            );
        }
    }

    #[test]
    fn center_loss_examples() {
        let mut centers = ClassCenters::zeros([0, 1], 3, 10.0);
        let z = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]];
        centers.centers.insert(0, z[0].clone());
        centers.centers.insert(1, z[1].clone());
        assert_eq!(center_loss(&z, &[0, 1], &centers, CenterLossForm::Unsquared).unwrap(), 0.0);

        let origin = ClassCenters::zeros([0, 1], 64, 10.0);
        let z = vec![unit(64, 0, 1.0), vec![0.0; 64]];
        assert_eq!(center_loss(&z, &[0, 1], &origin, CenterLossForm::Unsquared).unwrap(), 0.5);
        assert!(matches!(
            center_loss(&z, &[0, 7], &origin, CenterLossForm::Unsquared),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn center_lr_schedule() {
        assert_eq!(decay_center_lr(0, 10.0, 0.9), 10.0);
        assert!((decay_center_lr(2, 10.0, 0.9) - 8.1).abs() < 1e-12);
        for t in 0..20 {
            assert_eq!(decay_center_lr(t, 10.0, 1.0), 10.0);
        }
    }

    #[test]
    fn untouched_centers_are_unchanged() {
        let mut centers = ClassCenters::zeros([0, 1, 2], 2, 10.0);
        centers.centers.insert(2, vec![0.123, -4.5]);
        let before = centers.centers[&2].clone();
        update_centers(&[vec![1.0, 1.0]], &[0], &mut centers, 1.0, CenterLossForm::Unsquared, CenterUpdate::Gradient)
            .unwrap();
        assert_eq!(centers.centers[&2], before);
        assert_ne!(centers.centers[&0], vec![0.0, 0.0]);
    }

    #[test]
    fn sample_at_center_leaves_center() {
        let mut centers = ClassCenters::zeros([0], 2, 10.0);
        centers.centers.insert(0, vec![1.5, -2.0]);
        update_centers(&[vec![1.5, -2.0]], &[0], &mut centers, 10.0, CenterLossForm::Unsquared, CenterUpdate::Gradient)
            .unwrap();
        assert_eq!(centers.centers[&0], vec![1.5, -2.0]);
    }

    #[test]
    fn center_step_matches_finite_difference_gradient() {
        let z = vec![vec![0.7, -0.2, 1.1]];
        let mut centers = ClassCenters::zeros([0], 3, 10.0);
        centers.centers.insert(0, vec![0.1, 0.3, -0.4]);
        let lr = 0.01;
        let before = centers.centers[&0].clone();
        let mut fd = vec![0.0; 3];
        for d in 0..3 {
            let h = 1e-6;
            let mut up = centers.clone();
            up.centers.get_mut(&0).unwrap()[d] += h;
            let mut down = centers.clone();
            down.centers.get_mut(&0).unwrap()[d] -= h;
            fd[d] = (center_loss(&z, &[0], &up, CenterLossForm::Unsquared).unwrap()
                - center_loss(&z, &[0], &down, CenterLossForm::Unsquared).unwrap())
                / (2.0 * h);
        }
        update_centers(&z, &[0], &mut centers, lr, CenterLossForm::Unsquared, CenterUpdate::Gradient).unwrap();
        for d in 0..3 {
            let moved = centers.centers[&0][d] - before[d];
            let expected = -lr * fd[d];
            assert!((moved - expected).abs() <= 1e-3 * expected.abs(), "{moved} vs {expected}");
        }
    }

    #[test]
    fn ntxent_examples() {
        let pool = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        assert!(ntxent_loss(&pool, &[(0, 1)], 0.5).unwrap().abs() < 1e-15);

        let pool = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let expected = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        let got = ntxent_loss(&pool, &[(0, 1)], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.1269).abs() < 1e-4);

        assert!(matches!(ntxent_loss(&pool, &[(0, 1)], 0.0), Err(Error::Validation(_))));
    }

    fn ntxent_oracle(pool: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| cosine_similarity(a, b).unwrap();
        let mut total = 0.0;
        for &(i, j) in pairs {
            let num = (cos(&pool[i], &pool[j]) / tau).exp();
            let mut den = 0.0;
            for k in 0..pool.len() {
                if k != i {
                    den += (cos(&pool[i], &pool[k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total
    }

    #[test]
    fn ntxent_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pool = random_pool(&mut rng, 8, 6);
            let pairs: Vec<(usize, usize)> = (0..4).map(|a| (a, 4 + rng.random_range(0..4))).collect();
            let tau = rng.random_range(0.1..2.0);
            let got = ntxent_loss(&pool, &pairs, tau).unwrap();
            let want = ntxent_oracle(&pool, &pairs, tau);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn ntxent_decreases_as_positive_aligns() {
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let angle = std::f64::consts::PI * (1.0 - step as f64 / 10.0);
            let pool = vec![vec![1.0, 0.0], vec![angle.cos(), angle.sin()], vec![0.0, -1.0], vec![-0.5, 0.5]];
            let l = ntxent_loss(&pool, &[(0, 1)], 0.3).unwrap();
            assert!(l < last);
            assert!(l >= 0.0 || step < 10);
            last = l;
        }
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = random_pool(&mut rng, 6, 4);
        let pairs = [(0, 3), (1, 4), (2, 5)];
        let (_, grads) = ntxent_grad(&pool, &pairs, 0.2).unwrap();
        for i in 0..6 {
            for d in 0..4 {
                let h = 1e-6;
                let mut up = pool.clone();
                up[i][d] += h;
                let mut down = pool.clone();
                down[i][d] -= h;
                let fd = (ntxent_loss(&up, &pairs, 0.2).unwrap() - ntxent_loss(&down, &pairs, 0.2).unwrap()) / (2.0 * h);
                assert!((fd - grads[i][d]).abs() <= 1e-5 * fd.abs().max(1.0), "{i},{d}: {fd} vs {}", grads[i][d]);
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.3, 5.0, 0.0), 1.3);
        assert!((total_loss(1.0, 0.4, 0.5) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 1.0), 0.0);
    }
}
