//! Neighborhood-averaged features, their per-pixel Gaussian field, and the
//! k-means centroid bank used for image-level scoring.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::gaussian_field::{fit_pixel_gaussians, GaussianField};
use crate::neighbor_sim::window;

pub const DEFAULT_RATIO: f64 = 0.1;
pub const DEFAULT_MAX_POINTS: usize = 100_000;
const MAX_LLOYD_ITERS: usize = 100;
const SHIFT_TOL: f64 = 1e-4;

/// Mean of the feature vectors over each pixel's clipped `p`-window.
pub fn aggregate_features(fm: &FeatureMap, p: usize) -> FeatureMap {
    let (h, w, c) = fm.dims();
    let radius = p / 2;
    if radius == 0 {
        return fm.clone();
    }
    let data: Vec<f64> = (0..h * w)
        .into_par_iter()
        .flat_map_iter(|idx| {
            let mut acc = vec![0.0; c];
            let mut count = 0usize;
            for (i, j) in window(idx / w, idx % w, radius, h, w) {
                for (a, x) in acc.iter_mut().zip(fm.at(i, j)) {
                    *a += x;
                }
                count += 1;
            }
            acc.iter_mut().for_each(|a| *a /= count as f64);
            acc
        })
        .collect();
    FeatureMap::new(h, w, c, data).expect("aggregation preserves shape")
}

/// Plain Gaussian field over `p`-aggregated training maps.
pub fn fit_aggregate_field(maps: &[FeatureMap], p: usize, epsilon: f64) -> Result<GaussianField> {
    let aggregated: Vec<FeatureMap> = maps.iter().map(|m| aggregate_features(m, p)).collect();
    fit_pixel_gaussians(&aggregated, epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankParams {
    pub ratio: f64,
    pub seed: u64,
    pub max_points: usize,
    /// Replace every centroid by its nearest pool member.
    pub medoid: bool,
}

impl Default for BankParams {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_RATIO,
            seed: 0,
            max_points: DEFAULT_MAX_POINTS,
            medoid: false,
        }
    }
}

/// k-means centroids of aggregated nominal features.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    dim: usize,
    centroids: Vec<f64>,
    norms: Vec<f64>,
    pub ratio: f64,
    pub seed: u64,
    pub inertia: f64,
    /// Inertia after each assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl CentroidBank {
    pub fn from_centroids(dim: usize, centroids: Vec<f64>, ratio: f64, seed: u64, inertia: f64) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} centroid values do not form rows of dimension {dim}",
                centroids.len()
            )));
        }
        if !centroids.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("centroids must be finite".into()));
        }
        let norms = centroids.chunks_exact(dim).map(norm).collect();
        Ok(Self {
            dim,
            centroids,
            norms,
            ratio,
            seed,
            inertia,
            inertia_history: Vec::new(),
            iterations: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Smallest Euclidean distance from `v` to any centroid.
    ///
    /// Centroids whose norm differs from `|v|` by more than the best distance
    /// found so far are skipped (reverse triangle inequality); the result is
    /// the exact minimum.
    pub fn nearest_distance(&self, v: &[f64]) -> f64 {
        let vn = norm(v);
        let mut best = f64::INFINITY;
        for (k, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let gap = (vn - self.norms[k]).abs();
            if gap > best * (1.0 + 1e-9) {
                continue;
            }
            let d = euclidean(v, c);
            if d < best {
                best = d;
            }
        }
        best
    }
}

pub fn nearest_centroid_distance(v: &[f64], bank: &CentroidBank) -> f64 {
    bank.nearest_distance(v)
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Pools every pixel vector of `aggregated` and clusters it.
pub fn build_centroid_bank(aggregated: &[FeatureMap], params: &BankParams) -> Result<CentroidBank> {
    if !(params.ratio > 0.0 && params.ratio <= 1.0) {
        return Err(Error::Config(format!("centroid ratio must lie in (0, 1], got {}", params.ratio)));
    }
    if params.max_points == 0 {
        return Err(Error::Config("max_points must be positive".into()));
    }
    let dim = crate::feature::common_dims(aggregated)
        .map_err(|_| Error::InvalidInput("centroid pool is empty".into()))?
        .2;
    let total: usize = aggregated.iter().map(|m| m.pixels()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let chosen: Vec<usize> = if total > params.max_points {
        let mut v = index::sample(&mut rng, total, params.max_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };
    let per_map = aggregated[0].pixels();
    let mut pool = Vec::with_capacity(chosen.len() * dim);
    for &i in &chosen {
        pool.extend_from_slice(aggregated[i / per_map].pixel(i % per_map));
    }
    let k = ((params.ratio * chosen.len() as f64).ceil() as usize).clamp(1, chosen.len());
    kmeans(&pool, dim, k, params, &mut rng)
}

/// Lloyd iterations from a k-means++ start.
fn kmeans(pool: &[f64], dim: usize, k: usize, params: &BankParams, rng: &mut ChaCha8Rng) -> Result<CentroidBank> {
    let n = pool.len() / dim;
    if n == 0 {
        return Err(Error::InvalidInput("centroid pool is empty".into()));
    }
    let point = |i: usize| &pool[i * dim..(i + 1) * dim];
    let mut centroids = kmeans_pp(pool, dim, k, rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    let (mut labels, mut dists) = assign(pool, dim, &centroids);
    history.push(dists.iter().sum::<f64>());
    while iterations < MAX_LLOYD_ITERS {
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        // empty clusters take the points farthest from their current centroid
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        let mut far = far.into_iter();
        let mut updated = vec![0.0; k * dim];
        for j in 0..k {
            let dst = &mut updated[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                for (u, s) in dst.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *u = s / counts[j] as f64;
                }
            } else {
                match far.next().filter(|&i| dists[i] > 0.0) {
                    Some(i) => dst.copy_from_slice(point(i)),
                    None => dst.copy_from_slice(&centroids[j * dim..(j + 1) * dim]),
                }
            }
        }
        let scale = centroids.chunks_exact(dim).map(norm).fold(1.0, f64::max);
        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| euclidean(a, b))
            .fold(0.0, f64::max);
        centroids = updated;
        (labels, dists) = assign(pool, dim, &centroids);
        history.push(dists.iter().sum::<f64>());
        if shift <= SHIFT_TOL * scale {
            break;
        }
    }

    if params.medoid {
        centroids = centroids
            .chunks_exact(dim)
            .flat_map(|c| {
                let best = (0..n)
                    .min_by(|&a, &b| sq_dist(point(a), c).total_cmp(&sq_dist(point(b), c)))
                    .expect("non-empty pool");
                point(best).to_vec()
            })
            .collect();
        (_, dists) = assign(pool, dim, &centroids);
        history.push(dists.iter().sum::<f64>());
    }

    let inertia = *history.last().expect("at least one assignment");
    let mut bank = CentroidBank::from_centroids(dim, centroids, params.ratio, params.seed, inertia)?;
    bank.inertia_history = history;
    bank.iterations = iterations;
    Ok(bank)
}

/// Nearest centroid (lowest index on ties) and squared distance for every point.
fn assign(pool: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    pool.par_chunks_exact(dim)
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_pp(pool: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = pool.len() / dim;
    let point = |i: usize| &pool[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = point(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|&i| !chosen[i]).unwrap_or(first)
        };
        chosen[next] = true;
        centroids.extend_from_slice(point(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(next)));
        }
    }
    centroids
}
