//! Codebook learning: k-means++ seeding and Lloyd's iteration.
//!
//! Codewords live in the projected descriptor space; the encoder aggregates
//! residuals against them. Training is deterministic for a fixed seed, and
//! nearest-centroid ties always resolve to the lowest index so assignment is
//! reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A set of `k` codewords of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    /// Row-major `k x dim`.
    centroids: Vec<f64>,
    inertia: Option<f64>,
}

impl Codebook {
    /// Builds a codebook from a flat row-major centroid matrix.
    pub fn from_centroids(centroids: Vec<f64>, k: usize, dim: usize) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidInput("codebook dimensions must be positive".into()));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimensionMismatch { expected: k * dim, found: centroids.len() });
        }
        Ok(Self { k, dim, centroids, inertia: None })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat row-major `k x dim` centroid matrix.
    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Final within-cluster sum of squares from training, if known.
    pub fn inertia(&self) -> Option<f64> {
        self.inertia
    }

    pub fn set_inertia(&mut self, inertia: Option<f64>) {
        self.inertia = inertia;
    }
}

/// Stopping rules for Lloyd's iteration.
#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    /// Upper bound on centroid update rounds.
    pub max_iter: usize,
    /// Relative inertia improvement below which iteration stops.
    pub tol: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

/// Result of a Lloyd's run: the codebook plus the inertia after the initial
/// seeding and after every centroid update.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub codebook: Codebook,
    /// Non-increasing; the last entry is the inertia of the final centroids.
    pub inertia_trace: Vec<f64>,
}

/// Index of the nearest centroid to `x` (squared Euclidean, ties to the
/// lowest index).
pub fn assign(codebook: &Codebook, x: &[f64]) -> Result<usize> {
    if x.len() != codebook.dim {
        return Err(Error::DimensionMismatch { expected: codebook.dim, found: x.len() });
    }
    Ok(nearest(&codebook.centroids, codebook.dim, x).0)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Strict `<` scan, so equal distances keep the earlier centroid.
fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = squared_distance(&centroids[..dim], x);
    for j in 1..centroids.len() / dim {
        let d = squared_distance(&centroids[j * dim..(j + 1) * dim], x);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

fn check_points<S: AsRef<[f64]>>(points: &[S]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(Error::InvalidInput("points must have positive dimension".into()));
    }
    for p in points {
        if p.as_ref().len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: p.as_ref().len() });
        }
    }
    Ok(dim)
}

/// Counts distinct points by exact value (`-0.0` and `0.0` coincide).
fn count_distinct<S: AsRef<[f64]>>(points: &[S]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.as_ref().iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding: the first centroid is uniform, each later one is drawn
/// with probability proportional to its squared distance from the nearest
/// centroid chosen so far. Returns a flat row-major `k x dim` matrix.
pub fn seed_plusplus<S: AsRef<[f64]>>(points: &[S], k: usize, seed: u64) -> Result<Vec<f64>> {
    let dim = check_points(points)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::TooFewDistinctPoints { distinct, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * dim);

    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(points[first].as_ref());

    // d2[i] tracks the squared distance to the nearest chosen centroid and
    // only needs updating against the newest one.
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), points[first].as_ref()))
        .collect();

    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        debug_assert!(total > 0.0, "fewer distinct points than centroids requested");
        let r = rng.gen::<f64>() * total;
        let mut cum = 0.0;
        let mut chosen = None;
        let mut last_positive = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                last_positive = Some(i);
            }
            cum += w;
            if cum > r && w > 0.0 {
                chosen = Some(i);
                break;
            }
        }
        // rounding can leave cum marginally below r at the end of the scan;
        // the last point with positive weight is then the draw
        let idx = chosen.or(last_positive).expect("positive total weight");
        centroids.extend_from_slice(points[idx].as_ref());
        for (w, p) in d2.iter_mut().zip(points) {
            let d = squared_distance(p.as_ref(), points[idx].as_ref());
            if d < *w {
                *w = d;
            }
        }
    }
    Ok(centroids)
}

/// Assigns every point, returning per-point nearest index, per-point squared
/// distance, and the total inertia.
fn assign_all<S: AsRef<[f64]>>(
    points: &[S],
    centroids: &[f64],
    dim: usize,
) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (j, d) = nearest(centroids, dim, p.as_ref());
        labels.push(j);
        dists.push(d);
        inertia += d;
    }
    (labels, dists, inertia)
}

/// Lloyd's iteration from explicit initial centroids (flat `k x dim`).
///
/// Each round replaces every centroid with the mean of its assigned points.
/// A centroid that loses all its points is moved to the point farthest from
/// its own assigned centroid (ties to the lowest point index); with one
/// relocation per empty centroid, repeated within the round as needed.
/// Iteration stops when the relative inertia improvement drops to `tol` or
/// after `max_iter` update rounds.
pub fn lloyd<S: AsRef<[f64]>>(
    points: &[S],
    init: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<LloydRun> {
    let dim = check_points(points)?;
    if init.is_empty() || !init.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim.max(1),
            found: init.len(),
        });
    }
    let k = init.len() / dim;
    let mut centroids = init;
    let mut trace = Vec::new();

    let (mut labels, mut dists, mut inertia) = assign_all(points, &centroids, dim);
    trace.push(inertia);

    for _ in 0..max_iter {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&labels) {
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        // one point may repair only one empty centroid per round
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                let mut far = None;
                for (i, &d) in dists.iter().enumerate() {
                    if taken[i] {
                        continue;
                    }
                    match far {
                        None => far = Some((i, d)),
                        Some((_, fd)) if d > fd => far = Some((i, d)),
                        _ => {}
                    }
                }
                let (i, _) = far.expect("point set is non-empty");
                taken[i] = true;
                centroids[j * dim..(j + 1) * dim].copy_from_slice(points[i].as_ref());
            }
        }

        let (new_labels, new_dists, new_inertia) = assign_all(points, &centroids, dim);
        trace.push(new_inertia);
        let done = new_inertia == 0.0 || (inertia - new_inertia) <= tol * inertia;
        labels = new_labels;
        dists = new_dists;
        inertia = new_inertia;
        if done {
            break;
        }
    }

    let mut codebook = Codebook::from_centroids(centroids, k, dim)?;
    codebook.set_inertia(Some(inertia));
    Ok(LloydRun { codebook, inertia_trace: trace })
}

/// Seeds with k-means++ and runs Lloyd's to convergence.
pub fn train_codebook<S: AsRef<[f64]>>(
    points: &[S],
    k: usize,
    seed: u64,
    params: TrainParams,
) -> Result<LloydRun> {
    let init = seed_plusplus(points, k, seed)?;
    lloyd(points, init, params.max_iter, params.tol)
}
