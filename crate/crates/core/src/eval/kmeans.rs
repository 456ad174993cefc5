use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dot, normalized, Rows};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// Row-major `[k, dim]`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Cosine: sum of similarities to the assigned centroid (maximised).
    /// Positional: sum of squared distances (minimised).
    pub objective: f64,
    pub iterations: usize,
    /// Objective after initial assignment and after every iteration.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn argmax_sim(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.chunks(d).enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// Spherical k-means on the row directions. Initial centroids are `k`
/// distinct rows chosen by `seed`; an emptied cluster is reseeded with the
/// sample least similar to its own centroid.
pub fn spherical_kmeans(data: Rows<'_>, k: usize, max_iters: usize, seed: u64) -> Result<ClusterResult> {
    let x = normalized(data, "spherical_kmeans")?;
    let (s, d) = (data.len(), data.cols);
    if k == 0 {
        return Err(Error::invalid("spherical_kmeans", "k must be >= 1"));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    for &i in &order {
        let row = &x[i * d..(i + 1) * d];
        if !centroids.chunks(d).any(|c| c == row) {
            centroids.extend_from_slice(row);
            if centroids.len() == k * d {
                break;
            }
        }
    }
    if centroids.len() < k * d {
        return Err(Error::invalid(
            "spherical_kmeans",
            format!("k = {k} exceeds {} distinct directions", centroids.len() / d),
        ));
    }

    let assign = |centroids: &[f64]| -> (Vec<usize>, f64) {
        let mut labels = Vec::with_capacity(s);
        let mut obj = 0.0;
        for i in 0..s {
            let (j, sim) = argmax_sim(&x[i * d..(i + 1) * d], centroids, d);
            labels.push(j);
            obj += sim;
        }
        (labels, obj)
    };
    let objective_of = |labels: &[usize], centroids: &[f64]| -> f64 {
        (0..s).map(|i| dot(&x[i * d..(i + 1) * d], &centroids[labels[i] * d..(labels[i] + 1) * d])).sum()
    };

    let (mut labels, obj) = assign(&centroids);
    let mut history = vec![obj];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        update_centroids(&x, d, k, &mut labels, &mut centroids);
        let (new_labels, obj) = assign(&centroids);
        history.push(obj);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    let objective = objective_of(&labels, &centroids);
    Ok(ClusterResult { assignments: labels, centroids, k, dim: d, objective, iterations, history })
}

/// Normalised member means; empty (or cancelling) clusters take over the
/// worst-fitting sample.
fn update_centroids(x: &[f64], d: usize, k: usize, labels: &mut [usize], centroids: &mut [f64]) {
    let s = labels.len();
    loop {
        let mut sums = vec![0.0; k * d];
        for (i, &l) in labels.iter().enumerate() {
            sums[l * d..(l + 1) * d].iter_mut().zip(&x[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
        }
        let mut empty = None;
        for j in 0..k {
            let m = &sums[j * d..(j + 1) * d];
            let n = dot(m, m).sqrt();
            if n <= 1e-12 {
                empty.get_or_insert(j);
            } else {
                centroids[j * d..(j + 1) * d].iter_mut().zip(m).for_each(|(c, v)| *c = v / n);
            }
        }
        let Some(j) = empty else { return };
        let mut worst = (usize::MAX, f64::INFINITY);
        for i in 0..s {
            if labels[i] == j {
                continue;
            }
            let sim = dot(&x[i * d..(i + 1) * d], &centroids[labels[i] * d..(labels[i] + 1) * d]);
            if sim < worst.1 {
                worst = (i, sim);
            }
        }
        if worst.0 == usize::MAX {
            return;
        }
        labels[worst.0] = j;
        centroids[j * d..(j + 1) * d].copy_from_slice(&x[worst.0 * d..(worst.0 + 1) * d]);
    }
}

/// Best objective over `restarts` seeds `seed, seed + 1, ...`.
pub fn spherical_kmeans_best_of(data: Rows<'_>, k: usize, max_iters: usize, seed: u64, restarts: usize) -> Result<ClusterResult> {
    let mut best: Option<ClusterResult> = None;
    for r in 0..restarts.max(1) as u64 {
        let res = spherical_kmeans(data, k, max_iters, seed.wrapping_add(r))?;
        if best.as_ref().is_none_or(|b| res.objective > b.objective) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm on every `(row, col)` of a `height x width` grid.
/// Initial centers are `init` when given, else `k` distinct random pixels.
pub fn positional_kmeans(
    height: usize,
    width: usize,
    k: usize,
    seed: u64,
    init: Option<&[[f64; 2]]>,
    max_iters: usize,
) -> Result<ClusterResult> {
    let s = height * width;
    if k == 0 || k > s {
        return Err(Error::invalid("positional_kmeans", format!("k = {k} for {s} pixels")));
    }
    let x: Vec<f64> = (0..s).flat_map(|i| [(i / width) as f64, (i % width) as f64]).collect();
    let mut centroids: Vec<f64> = match init {
        Some(c) if c.len() == k => c.iter().flatten().copied().collect(),
        Some(c) => return Err(Error::invalid("positional_kmeans", format!("{} initial centers for k = {k}", c.len()))),
        None => {
            let mut order: Vec<usize> = (0..s).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order[..k].iter().flat_map(|&i| [x[2 * i], x[2 * i + 1]]).collect()
        }
    };
    let assign = |centroids: &[f64]| -> (Vec<usize>, f64) {
        let mut labels = Vec::with_capacity(s);
        let mut obj = 0.0;
        for i in 0..s {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.chunks(2).enumerate() {
                let dd = sq_dist(&x[2 * i..2 * i + 2], c);
                if dd < best.1 {
                    best = (j, dd);
                }
            }
            labels.push(best.0);
            obj += best.1;
        }
        (labels, obj)
    };
    let (mut labels, obj) = assign(&centroids);
    let mut history = vec![obj];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![0.0; 2 * k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums[2 * l] += x[2 * i];
            sums[2 * l + 1] += x[2 * i + 1];
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[2 * j] = sums[2 * j] / counts[j] as f64;
                centroids[2 * j + 1] = sums[2 * j + 1] / counts[j] as f64;
            }
        }
        let (new_labels, obj) = assign(&centroids);
        history.push(obj);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    let objective = (0..s).map(|i| sq_dist(&x[2 * i..2 * i + 2], &centroids[2 * labels[i]..2 * labels[i] + 2])).sum();
    Ok(ClusterResult { assignments: labels, centroids, k, dim: 2, objective, iterations, history })
}
