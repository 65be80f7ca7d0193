//! Per-pixel multivariate Gaussian fields and Mahalanobis distance.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::{common_dims, FeatureMap};
use crate::linalg;

/// Default diagonal regularizer added to every covariance.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Mean and covariance for every pixel of an `H x W` grid, with cached
/// lower Cholesky factors of the covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    h: usize,
    w: usize,
    dim: usize,
    epsilon: f64,
    mean: Vec<f64>,
    covariance: Vec<f64>,
    chol: Vec<f64>,
}

impl GaussianField {
    /// Builds a field from per-pixel moments. `covariance` must already include
    /// the `epsilon * I` regularizer; the Cholesky factors are computed here.
    pub fn from_moments(
        h: usize,
        w: usize,
        dim: usize,
        epsilon: f64,
        mean: Vec<f64>,
        covariance: Vec<f64>,
    ) -> Result<Self> {
        if mean.len() != h * w * dim || covariance.len() != h * w * dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "moments do not match a {h}x{w} grid of dimension {dim}"
            )));
        }
        let dd = dim * dim;
        let mut chol = covariance.clone();
        let failed = chol
            .par_chunks_mut(dd.max(1))
            .enumerate()
            .filter_map(|(idx, block)| (!linalg::cholesky_in_place(block, dim)).then_some(idx))
            .min();
        if let Some(idx) = failed {
            return Err(Error::NotPositiveDefinite {
                h: idx / w,
                w: idx % w,
            });
        }
        Ok(Self {
            h,
            w,
            dim,
            epsilon,
            mean,
            covariance,
            chol,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariances(&self) -> &[f64] {
        &self.covariance
    }

    #[inline]
    pub fn mean_at(&self, idx: usize) -> &[f64] {
        &self.mean[idx * self.dim..(idx + 1) * self.dim]
    }

    #[inline]
    pub fn cov_at(&self, idx: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.covariance[idx * dd..(idx + 1) * dd]
    }

    #[inline]
    pub fn chol_at(&self, idx: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.chol[idx * dd..(idx + 1) * dd]
    }

    pub fn log_det_at(&self, idx: usize) -> f64 {
        linalg::log_det_from_chol(self.chol_at(idx), self.dim)
    }

    /// Mahalanobis distance of `x` to the distribution at `(h, w)`.
    pub fn mahalanobis(&self, x: &[f64], h: usize, w: usize) -> Result<f64> {
        if h >= self.h || w >= self.w {
            return Err(Error::InvalidInput(format!(
                "pixel ({h}, {w}) outside {}x{} grid",
                self.h, self.w
            )));
        }
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "vector has {} entries, field dimension is {}",
                x.len(),
                self.dim
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature vector".into()));
        }
        let mut scratch = vec![0.0; self.dim];
        Ok(self.mahalanobis_idx(x, h * self.w + w, &mut scratch))
    }

    /// Unchecked variant on a flat pixel index; `scratch` holds at least `dim` values.
    #[inline]
    pub(crate) fn mahalanobis_idx(&self, x: &[f64], idx: usize, scratch: &mut [f64]) -> f64 {
        let mu = self.mean_at(idx);
        for ((s, a), b) in scratch.iter_mut().zip(x).zip(mu) {
            *s = a - b;
        }
        let d = self.dim;
        linalg::forward_solve(self.chol_at(idx), d, &mut scratch[..d]);
        scratch[..d].iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Free-function form of [`GaussianField::mahalanobis`].
pub fn mahalanobis(x: &[f64], field: &GaussianField, h: usize, w: usize) -> Result<f64> {
    field.mahalanobis(x, h, w)
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Fits sample mean and unbiased sample covariance (plus `epsilon * I`) at every pixel.
pub fn fit_pixel_gaussians(maps: &[FeatureMap], epsilon: f64) -> Result<GaussianField> {
    check_epsilon(epsilon)?;
    let (h, w, d) = common_dims(maps)?;
    let n = maps.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "covariance needs at least 2 training maps, got {n}"
        )));
    }
    let dd = d * d;
    let mut mean = vec![0.0; h * w * d];
    let mut covariance = vec![0.0; h * w * dd];
    mean.par_chunks_mut(d)
        .zip(covariance.par_chunks_mut(dd))
        .enumerate()
        .for_each(|(idx, (mu, cov))| {
            // shifted by the first sample: exact when all samples coincide
            let origin = maps[0].pixel(idx);
            for m in &maps[1..] {
                for ((a, x), o) in mu.iter_mut().zip(m.pixel(idx)).zip(origin) {
                    *a += x - o;
                }
            }
            for (a, o) in mu.iter_mut().zip(origin) {
                *a = o + *a / n as f64;
            }

            let mut centered = vec![0.0; d];
            for m in maps {
                for ((c, x), u) in centered.iter_mut().zip(m.pixel(idx)).zip(mu.iter()) {
                    *c = x - u;
                }
                for r in 0..d {
                    let cr = centered[r];
                    for s in r..d {
                        cov[r * d + s] += cr * centered[s];
                    }
                }
            }
            finish_covariance(cov, d, (n - 1) as f64, epsilon);
        });
    GaussianField::from_moments(h, w, d, epsilon, mean, covariance)
}

/// Scales the accumulated upper triangle by `1 / denominator`, mirrors it, and adds `epsilon` to the diagonal.
pub(crate) fn finish_covariance(cov: &mut [f64], d: usize, denominator: f64, epsilon: f64) {
    for r in 0..d {
        for s in r..d {
            let v = cov[r * d + s] / denominator;
            cov[r * d + s] = v;
            cov[s * d + r] = v;
        }
        cov[r * d + r] += epsilon;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_maps(values: &[f64]) -> Vec<FeatureMap> {
        values
            .iter()
            .map(|&v| FeatureMap::from_fn(1, 1, 1, |_, _, _| v))
            .collect()
    }

    #[test]
    fn two_sample_hand_fixture() {
        let f = fit_pixel_gaussians(&scalar_maps(&[1.0, 3.0]), 0.01).unwrap();
        assert_eq!(f.mean_at(0), &[2.0]);
        assert!((f.cov_at(0)[0] - 2.01).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_give_epsilon_identity() {
        let m = FeatureMap::from_fn(2, 3, 3, |i, j, k| (i + 2 * j + 3 * k) as f64 * 0.7);
        let f = fit_pixel_gaussians(&[m.clone(), m.clone(), m], 0.01).unwrap();
        for idx in 0..f.pixels() {
            let cov = f.cov_at(idx);
            for r in 0..3 {
                for s in 0..3 {
                    assert_eq!(cov[r * 3 + s], if r == s { 0.01 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn rejects_single_map_and_bad_epsilon() {
        assert!(fit_pixel_gaussians(&scalar_maps(&[1.0]), 0.01).is_err());
        assert!(fit_pixel_gaussians(&scalar_maps(&[1.0, 2.0]), 0.0).is_err());
        assert!(fit_pixel_gaussians(&[], 0.01).is_err());
    }

    #[test]
    fn mahalanobis_basic_cases() {
        let field = GaussianField::from_moments(1, 1, 2, 0.0, vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(field.mahalanobis(&[3.0, 4.0], 0, 0).unwrap(), 5.0);
        assert_eq!(mahalanobis(&[0.0, 0.0], &field, 0, 0).unwrap(), 0.0);
        assert!(field.mahalanobis(&[f64::NAN, 0.0], 0, 0).is_err());
        assert!(field.mahalanobis(&[0.0, 0.0], 1, 0).is_err());
    }

    #[test]
    fn non_pd_moments_report_pixel() {
        let mut cov = vec![1.0; 4];
        cov[3] = -1.0;
        let err = GaussianField::from_moments(2, 2, 1, 0.0, vec![0.0; 4], cov).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { h: 1, w: 1 }));
    }
}
