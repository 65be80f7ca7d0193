//! Neighborhood similarity weighting.
//!
//! Each pixel's plain Gaussian is compared with the Gaussians of its square
//! neighborhood through the Bhattacharyya distance `BC`. The similarities
//! `exp(-BC / gamma)` are normalized per pixel and used to pool the training
//! features of the whole neighborhood into a weighted mean and covariance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{common_dims, FeatureMap};
use crate::gaussian_field::{check_epsilon, finish_covariance, GaussianField};
use crate::linalg;

/// Default similarity temperature.
pub const DEFAULT_GAMMA: f64 = 0.25;

/// Square window of radius `p / 2` around a pixel, clipped to the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: (usize, usize),
    pub radius: usize,
    pub members: Vec<(usize, usize)>,
}

pub fn neighborhood(h: usize, w: usize, p: usize, height: usize, width: usize) -> Neighborhood {
    let radius = p / 2;
    let members = window(h, w, radius, height, width).collect();
    Neighborhood {
        center: (h, w),
        radius,
        members,
    }
}

/// Row-major members of the clipped window of `radius` around `(h, w)`.
pub(crate) fn window(
    h: usize,
    w: usize,
    radius: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (h0, h1) = (h.saturating_sub(radius), (h + radius).min(height - 1));
    let (w0, w1) = (w.saturating_sub(radius), (w + radius).min(width - 1));
    (h0..=h1).flat_map(move |i| (w0..=w1).map(move |j| (i, j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcForm {
    /// Mean term only; the log-determinant ratio is dropped.
    #[default]
    Simplified,
    /// Mean term plus the log-determinant ratio.
    Full,
}

/// Bhattacharyya distance between `N(mu1, cov1)` and `N(mu2, cov2)`.
pub fn bhattacharyya_bc(
    mu1: &[f64],
    cov1: &[f64],
    mu2: &[f64],
    cov2: &[f64],
    form: BcForm,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.len() != d * d || cov2.len() != d * d {
        return Err(Error::ShapeMismatch("Gaussian parameters disagree in dimension".into()));
    }
    let log_dets = match form {
        BcForm::Simplified => None,
        BcForm::Full => {
            let ld = |cov: &[f64]| {
                linalg::cholesky(cov, d)
                    .map(|l| linalg::log_det_from_chol(&l, d))
                    .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))
            };
            Some((ld(cov1)?, ld(cov2)?))
        }
    };
    bc_with_log_dets(mu1, cov1, mu2, cov2, log_dets)
        .ok_or_else(|| Error::InvalidInput("averaged covariance is singular".into()))
}

/// BC core; `log_dets` carries `(log det cov1, log det cov2)` for the full form.
fn bc_with_log_dets(
    mu1: &[f64],
    cov1: &[f64],
    mu2: &[f64],
    cov2: &[f64],
    log_dets: Option<(f64, f64)>,
) -> Option<f64> {
    let d = mu1.len();
    let mut avg: Vec<f64> = cov1.iter().zip(cov2).map(|(a, b)| (a + b) * 0.5).collect();
    if !linalg::cholesky_in_place(&mut avg, d) {
        return None;
    }
    let mut diff: Vec<f64> = mu1.iter().zip(mu2).map(|(a, b)| a - b).collect();
    linalg::forward_solve(&avg, d, &mut diff);
    let quad: f64 = diff.iter().map(|v| v * v).sum();
    let mut bc = quad / 8.0;
    if let Some((ld1, ld2)) = log_dets {
        let ld_avg = linalg::log_det_from_chol(&avg, d);
        bc += 0.5 * (ld_avg - 0.5 * (ld1 + ld2));
    }
    Some(bc.max(0.0))
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || gamma.is_nan() {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `exp(-bc / gamma)`.
pub fn similarity_weight(bc: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(bc >= 0.0) {
        return Err(Error::InvalidInput(format!("BC must be non-negative, got {bc}")));
    }
    Ok((-bc / gamma).exp())
}

/// How neighbor weights are assigned before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "scheme")]
pub enum Weighting {
    /// `exp(-BC / gamma)` against the center pixel's distribution.
    #[default]
    Similarity,
    /// Every member gets `1 / |N_p|`.
    Uniform,
    /// Seeded uniform draws in `(0, 1]`.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelWeights {
    pub members: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

/// Normalized neighbor weights for every pixel, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub height: usize,
    pub width: usize,
    pub p: usize,
    pub pixels: Vec<PixelWeights>,
}

impl WeightField {
    /// Builds a weight field from raw per-member weights; each pixel is normalized to sum 1.
    pub fn from_raw(
        height: usize,
        width: usize,
        p: usize,
        raw: impl Fn(usize, usize, &[(usize, usize)]) -> Vec<f64> + Sync,
    ) -> Result<Self> {
        let radius = p / 2;
        let pixels = (0..height * width)
            .into_par_iter()
            .map(|idx| {
                let (h, w) = (idx / width, idx % width);
                let members: Vec<_> = window(h, w, radius, height, width).collect();
                let m = raw(h, w, &members);
                if m.len() != members.len() || m.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidInput(format!("bad raw weights at pixel ({h}, {w})")));
                }
                let total: f64 = m.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::InvalidInput(format!("weights at pixel ({h}, {w}) sum to zero")));
                }
                let weights = m.iter().map(|x| x / total).collect();
                Ok(PixelWeights { members, weights })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height,
            width,
            p,
            pixels,
        })
    }
}

/// Offsets `(dh, dw)` of the half window that come after the center in row-major order.
fn forward_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dh in 0..=r {
        for dw in -r..=r {
            if dh > 0 || dw > 0 {
                out.push((dh, dw));
            }
        }
    }
    out
}

/// Raw similarities `m_a` for every pixel of `base`, computing each unordered pair once.
fn similarity_weights(base: &GaussianField, p: usize, gamma: f64, form: BcForm) -> Result<WeightField> {
    let (height, width) = (base.height(), base.width());
    let radius = p / 2;
    let offsets = forward_offsets(radius);
    let k = offsets.len();
    let log_dets: Option<Vec<f64>> = (form == BcForm::Full)
        .then(|| (0..base.pixels()).into_par_iter().map(|i| base.log_det_at(i)).collect());

    let mut pair_bc = vec![f64::NAN; base.pixels() * k];
    let failed = pair_bc
        .par_chunks_mut(k.max(1))
        .enumerate()
        .filter_map(|(idx, row)| {
            let (h, w) = ((idx / width) as i64, (idx % width) as i64);
            for (slot, &(dh, dw)) in row.iter_mut().zip(&offsets) {
                let (nh, nw) = (h + dh, w + dw);
                if nh < 0 || nw < 0 || nh >= height as i64 || nw >= width as i64 {
                    continue;
                }
                let other = nh as usize * width + nw as usize;
                let lds = log_dets.as_ref().map(|ld| (ld[idx], ld[other]));
                match bc_with_log_dets(
                    base.mean_at(idx),
                    base.cov_at(idx),
                    base.mean_at(other),
                    base.cov_at(other),
                    lds,
                ) {
                    Some(bc) => *slot = bc,
                    None => return Some(idx),
                }
            }
            None
        })
        .min();
    if let Some(idx) = failed {
        return Err(Error::NotPositiveDefinite {
            h: idx / width,
            w: idx % width,
        });
    }
    let r = radius as i64;
    let slot_of = |dh: i64, dw: i64| -> usize {
        // position of (dh, dw) in `forward_offsets`
        if dh == 0 {
            (dw - 1) as usize
        } else {
            (r + (dh - 1) * (2 * r + 1) + (dw + r)) as usize
        }
    };
    WeightField::from_raw(height, width, p, |h, w, members| {
        let idx = h * width + w;
        members
            .iter()
            .map(|&(mh, mw)| {
                let (dh, dw) = (mh as i64 - h as i64, mw as i64 - w as i64);
                let bc = if dh == 0 && dw == 0 {
                    0.0
                } else if dh > 0 || (dh == 0 && dw > 0) {
                    pair_bc[idx * k + slot_of(dh, dw)]
                } else {
                    pair_bc[(mh * width + mw) * k + slot_of(-dh, -dw)]
                };
                (-bc / gamma).exp()
            })
            .collect()
    })
}

/// Normalized neighbor weights for every pixel under the chosen scheme.
pub fn compute_weights(
    base: &GaussianField,
    p: usize,
    gamma: f64,
    form: BcForm,
    weighting: Weighting,
) -> Result<WeightField> {
    check_gamma(gamma)?;
    if p == 0 {
        return Err(Error::Config("p must be at least 1".into()));
    }
    let (height, width) = (base.height(), base.width());
    match weighting {
        Weighting::Similarity => similarity_weights(base, p, gamma, form),
        Weighting::Uniform => WeightField::from_raw(height, width, p, |_, _, m| vec![1.0; m.len()]),
        Weighting::Random { seed } => WeightField::from_raw(height, width, p, |h, w, m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((h * width + w) as u64);
            m.iter().map(|_| 1.0 - rng.gen::<f64>()).collect()
        }),
    }
}

/// Weighted mean and covariance of every pixel's neighborhood under `weights`, plus `epsilon * I`.
pub fn fit_with_weights(maps: &[FeatureMap], weights: &WeightField, epsilon: f64) -> Result<GaussianField> {
    check_epsilon(epsilon)?;
    let (h, w, d) = common_dims(maps)?;
    if (weights.height, weights.width) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "weight field is {}x{}, feature maps are {h}x{w}",
            weights.height, weights.width
        )));
    }
    let n = maps.len() as f64;
    let dd = d * d;
    let mut mean = vec![0.0; h * w * d];
    let mut covariance = vec![0.0; h * w * dd];
    let failed = mean
        .par_chunks_mut(d)
        .zip(covariance.par_chunks_mut(dd))
        .enumerate()
        .filter_map(|(idx, (mu, cov))| {
            let pw = &weights.pixels[idx];
            let sum_sq: f64 = pw.weights.iter().map(|m| m * m).sum();
            let denominator = n - sum_sq;
            if !(denominator > 0.0) {
                return Some((idx, denominator));
            }
            let members: Vec<usize> = pw.members.iter().map(|&(i, j)| i * w + j).collect();
            // accumulated relative to the center pixel of the first map
            let origin = maps[0].pixel(idx);
            for m in maps {
                for (&a, &wt) in members.iter().zip(&pw.weights) {
                    for ((acc, x), o) in mu.iter_mut().zip(m.pixel(a)).zip(origin) {
                        *acc += wt * (x - o);
                    }
                }
            }
            for (a, o) in mu.iter_mut().zip(origin) {
                *a = o + *a / n;
            }

            let mut centered = vec![0.0; d];
            for m in maps {
                for (&a, &wt) in members.iter().zip(&pw.weights) {
                    for ((c, x), u) in centered.iter_mut().zip(m.pixel(a)).zip(mu.iter()) {
                        *c = x - u;
                    }
                    for r in 0..d {
                        let cr = wt * centered[r];
                        for s in r..d {
                            cov[r * d + s] += cr * centered[s];
                        }
                    }
                }
            }
            finish_covariance(cov, d, denominator, epsilon);
            None
        })
        .min_by_key(|(idx, _)| *idx);
    if let Some((idx, denominator)) = failed {
        return Err(Error::DegenerateDenominator {
            h: idx / w,
            w: idx % w,
            denominator,
        });
    }
    GaussianField::from_moments(h, w, d, epsilon, mean, covariance)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedFitParams {
    pub p: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub bc_form: BcForm,
    pub weighting: Weighting,
}

impl Default for WeightedFitParams {
    fn default() -> Self {
        Self {
            p: 3,
            gamma: DEFAULT_GAMMA,
            epsilon: crate::gaussian_field::DEFAULT_EPSILON,
            bc_form: BcForm::Simplified,
            weighting: Weighting::Similarity,
        }
    }
}

/// Weights from the plain field `base`, then the weighted field over `maps`.
pub fn fit_weighted_field(
    maps: &[FeatureMap],
    base: &GaussianField,
    params: &WeightedFitParams,
) -> Result<(WeightField, GaussianField)> {
    let (h, w, d) = common_dims(maps)?;
    if (base.height(), base.width(), base.dim()) != (h, w, d) {
        return Err(Error::ShapeMismatch("base field does not match the training maps".into()));
    }
    let weights = compute_weights(base, params.p, params.gamma, params.bc_form, params.weighting)?;
    let field = fit_with_weights(maps, &weights, params.epsilon)?;
    Ok((weights, field))
}
