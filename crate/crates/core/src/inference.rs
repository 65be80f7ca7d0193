//! Pixel anomaly maps and image scores.

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate_bank::{aggregate_features, CentroidBank};
use crate::error::{Error, Result};
use crate::feature::{clamp_index, FeatureMap};
use crate::gaussian_field::GaussianField;
use crate::neighbor_sim::window;

pub const DEFAULT_K_TOP: usize = 5;

/// An `H x W` grid of non-negative scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: format!("anomaly map holds {} values", values.len()),
            });
        }
        Ok(Self { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.w + w]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn same_dims(&self, other: &AnomalyMap) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::ShapeMismatch(format!(
                "anomaly maps are {}x{} and {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }

    /// Undoes a content shift: `out[h, w] = self[h - a, w - b]` with edge replication.
    pub fn translated_back(&self, a: i32, b: i32) -> AnomalyMap {
        let mut values = Vec::with_capacity(self.values.len());
        for i in 0..self.h {
            let si = clamp_index(i as i64 - a as i64, self.h);
            for j in 0..self.w {
                let sj = clamp_index(j as i64 - b as i64, self.w);
                values.push(self.at(si, sj));
            }
        }
        AnomalyMap { h: self.h, w: self.w, values }
    }

    /// Separable Gaussian blur with edge replication; `sigma <= 0` returns a copy.
    pub fn smoothed(&self, sigma: f64) -> AnomalyMap {
        if !(sigma > 0.0) {
            return self.clone();
        }
        let radius = (4.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
        let pass = |src: &[f64], h: usize, w: usize, horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (t, k) in kernel.iter().enumerate() {
                        let off = t as i64 - radius;
                        let (si, sj) = if horizontal {
                            (i, clamp_index(j as i64 + off, w))
                        } else {
                            (clamp_index(i as i64 + off, h), j)
                        };
                        acc += k * src[si * w + sj];
                    }
                    out[i * w + j] = acc;
                }
            }
            out
        };
        let tmp = pass(&self.values, self.h, self.w, true);
        let values = pass(&tmp, self.h, self.w, false);
        AnomalyMap { h: self.h, w: self.w, values }
    }
}

fn check_field(fm: &FeatureMap, field: &GaussianField) -> Result<()> {
    if fm.dims() != (field.height(), field.width(), field.dim()) {
        return Err(Error::ShapeMismatch(format!(
            "feature map is {:?}, model expects {:?}",
            fm.dims(),
            (field.height(), field.width(), field.dim())
        )));
    }
    if !fm.is_finite() {
        return Err(Error::InvalidInput("feature map contains non-finite values".into()));
    }
    Ok(())
}

/// Minimum Mahalanobis distance from each test vector to the weighted
/// distributions of its clipped `q`-window.
pub fn score_d1(fm: &FeatureMap, field: &GaussianField, q: usize) -> Result<AnomalyMap> {
    check_field(fm, field)?;
    let (h, w, d) = fm.dims();
    let radius = q / 2;
    let values = (0..h * w)
        .into_par_iter()
        .map_init(
            || vec![0.0; d],
            |scratch, idx| {
                let x = fm.pixel(idx);
                window(idx / w, idx % w, radius, h, w)
                    .map(|(i, j)| field.mahalanobis_idx(x, i * w + j, scratch))
                    .fold(f64::INFINITY, f64::min)
            },
        )
        .collect();
    AnomalyMap::new(h, w, values)
}

/// Mahalanobis distance of the `p`-aggregated test vector to the aggregate field.
pub fn score_d2(fm: &FeatureMap, field: &GaussianField, p: usize) -> Result<AnomalyMap> {
    check_field(fm, field)?;
    let agg = aggregate_features(fm, p);
    score_aggregated(&agg, field)
}

/// As [`score_d2`] for a map that is already aggregated.
pub fn score_aggregated(agg: &FeatureMap, field: &GaussianField) -> Result<AnomalyMap> {
    check_field(agg, field)?;
    let (h, w, d) = agg.dims();
    let values = (0..h * w)
        .into_par_iter()
        .map_init(|| vec![0.0; d], |scratch, idx| field.mahalanobis_idx(agg.pixel(idx), idx, scratch))
        .collect();
    AnomalyMap::new(h, w, values)
}

/// Pointwise geometric mean.
pub fn combine_maps(d1: &AnomalyMap, d2: &AnomalyMap) -> Result<AnomalyMap> {
    d1.same_dims(d2)?;
    let values = d1.values.iter().zip(&d2.values).map(|(a, b)| (a * b).sqrt()).collect();
    AnomalyMap::new(d1.h, d1.w, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub value: f64,
    /// Pixels holding the `k` largest D1 values, largest first.
    pub top_pixels: Vec<(usize, usize)>,
    /// Nearest-centroid distances at `top_pixels`, ascending.
    pub e_k: Vec<f64>,
    /// The `k` largest D1 values, ascending.
    pub q_k: Vec<f64>,
}

/// Top-`k` D1 values paired, after independent ascending sorts, with the
/// nearest-centroid distances of the aggregated features at those pixels.
pub fn image_score(d1: &AnomalyMap, agg: &FeatureMap, bank: &CentroidBank, k_top: usize) -> Result<ImageScore> {
    let n = d1.values.len();
    if k_top == 0 || k_top > n {
        return Err(Error::Config(format!("k_top must lie in [1, {n}], got {k_top}")));
    }
    if (agg.height(), agg.width()) != (d1.h, d1.w) || agg.channels() != bank.dim() {
        return Err(Error::ShapeMismatch(
            "aggregated features, D1 map and centroid bank disagree".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d1.values[b].total_cmp(&d1.values[a]).then(a.cmp(&b)));
    order.truncate(k_top);
    let mut q_k: Vec<f64> = order.iter().map(|&i| d1.values[i]).collect();
    let mut e_k: Vec<f64> = order.iter().map(|&i| bank.nearest_distance(agg.pixel(i))).collect();
    q_k.sort_by(f64::total_cmp);
    e_k.sort_by(f64::total_cmp);
    let value = e_k.iter().zip(&q_k).map(|(e, q)| e * q).sum();
    Ok(ImageScore {
        value,
        top_pixels: order.iter().map(|&i| (i / d1.w, i % d1.w)).collect(),
        e_k,
        q_k,
    })
}

/// All offsets `(a, b)` with `|a|, |b| <= r / 2`, row-major.
pub fn shift_offsets(r: usize) -> Vec<(i32, i32)> {
    let half = (r / 2) as i32;
    (-half..=half).flat_map(|a| (-half..=half).map(move |b| (a, b))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVariant {
    /// Shift offset at image scale.
    pub offset: (i32, i32),
    pub map: AnomalyMap,
    pub score: f64,
}

/// Averages shift variants of one image.
///
/// Each map is translated back by its offset converted to feature pixels
/// (`scale` = feature size / image size per axis, truncated toward zero),
/// then maps and scores are averaged.
pub fn shifted_manifest_scores(variants: &[ShiftVariant], r: usize, scale: (f64, f64)) -> Result<(AnomalyMap, f64)> {
    let half = (r / 2) as i32;
    let mut seen = std::collections::BTreeSet::new();
    for v in variants {
        let (a, b) = v.offset;
        if a.abs() > half || b.abs() > half {
            return Err(Error::InvalidInput(format!("shift ({a}, {b}) outside [-{half}, {half}]^2")));
        }
        if !seen.insert(v.offset) {
            return Err(Error::InvalidInput(format!("duplicate shift ({a}, {b})")));
        }
    }
    if !seen.contains(&(0, 0)) {
        return Err(Error::InvalidInput("shift variants lack the unshifted (0, 0) member".into()));
    }
    let first = &variants[0].map;
    let mut acc = vec![0.0; first.values.len()];
    let mut score = 0.0;
    for v in variants {
        v.map.same_dims(first)?;
        let a = (v.offset.0 as f64 * scale.0).trunc() as i32;
        let b = (v.offset.1 as f64 * scale.1).trunc() as i32;
        let back = v.map.translated_back(a, b);
        acc.iter_mut().zip(&back.values).for_each(|(s, x)| *s += x);
        score += v.score;
    }
    let n = variants.len() as f64;
    acc.iter_mut().for_each(|s| *s /= n);
    Ok((AnomalyMap::new(first.h, first.w, acc)?, score / n))
}

/// Linear-interpolated quantile of an ascending slice, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

/// 8-bit binary PGM with values clipped to the 20th..80th percentile range.
pub fn preview_pgm(map: &AnomalyMap) -> Vec<u8> {
    let mut sorted = map.values.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.2);
    let hi = quantile_sorted(&sorted, 0.8);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend(map.values.iter().map(|&v| {
        let t = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        (t * 255.0).round() as u8
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> AnomalyMap {
        AnomalyMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn combine_examples() {
        let c = combine_maps(&map(1, 2, &[4.0, 2.0]), &map(1, 2, &[9.0, 2.0])).unwrap();
        assert_eq!(c.values()[0], 6.0);
        assert!((c.values()[1] - 2.0).abs() < 1e-15);
        assert!(combine_maps(&map(1, 2, &[1.0, 1.0]), &map(2, 1, &[1.0, 1.0])).is_err());
    }

    #[test]
    fn image_score_hand_instance() {
        let d1 = map(2, 2, &[0.1, 0.5, 0.9, 0.3]);
        // nearest-centroid distance 1 at pixel 1 and 2 at pixel 2
        let agg = FeatureMap::new(2, 2, 1, vec![7.0, 1.0, 2.0, 7.0]).unwrap();
        let bank = CentroidBank::from_centroids(1, vec![0.0], 1.0, 0, 0.0).unwrap();
        let s = image_score(&d1, &agg, &bank, 2).unwrap();
        assert_eq!(s.top_pixels, vec![(1, 0), (0, 1)]);
        assert_eq!(s.q_k, vec![0.5, 0.9]);
        assert_eq!(s.e_k, vec![1.0, 2.0]);
        assert!((s.value - 2.3).abs() < 1e-12);

        let one = image_score(&d1, &agg, &bank, 1).unwrap();
        assert!((one.value - 0.9 * 2.0).abs() < 1e-15);
        assert!(image_score(&d1, &agg, &bank, 0).is_err());
        assert!(image_score(&d1, &agg, &bank, 5).is_err());
    }

    #[test]
    fn image_score_ties_break_row_major() {
        let d1 = map(1, 4, &[0.5, 0.9, 0.5, 0.5]);
        let agg = FeatureMap::new(1, 4, 1, vec![0.0; 4]).unwrap();
        let bank = CentroidBank::from_centroids(1, vec![0.0], 1.0, 0, 0.0).unwrap();
        let s = image_score(&d1, &agg, &bank, 2).unwrap();
        assert_eq!(s.top_pixels, vec![(0, 1), (0, 0)]);
    }

    #[test]
    fn offsets_count() {
        assert_eq!(shift_offsets(0), vec![(0, 0)]);
        assert_eq!(shift_offsets(4).len(), 25);
        assert_eq!(shift_offsets(4)[0], (-2, -2));
        assert_eq!(shift_offsets(1), vec![(0, 0)]);
    }

    #[test]
    fn shift_aggregation_rules() {
        let m = map(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let single = [ShiftVariant { offset: (0, 0), map: m.clone(), score: 3.5 }];
        assert_eq!(shifted_manifest_scores(&single, 0, (1.0, 1.0)).unwrap(), (m.clone(), 3.5));

        let same: Vec<_> = shift_offsets(2)
            .into_iter()
            .map(|offset| ShiftVariant { offset, map: map(2, 2, &[5.0; 4]), score: 2.0 })
            .collect();
        let (out, s) = shifted_manifest_scores(&same, 2, (1.0, 1.0)).unwrap();
        assert_eq!(out.values(), &[5.0; 4]);
        assert_eq!(s, 2.0);

        let missing = [ShiftVariant { offset: (1, 0), map: m.clone(), score: 0.0 }];
        assert!(shifted_manifest_scores(&missing, 2, (1.0, 1.0)).is_err());
        let dup = [single[0].clone(), single[0].clone()];
        assert!(shifted_manifest_scores(&dup, 2, (1.0, 1.0)).is_err());
        let far = [single[0].clone(), ShiftVariant { offset: (2, 0), map: m, score: 0.0 }];
        assert!(shifted_manifest_scores(&far, 2, (1.0, 1.0)).is_err());
    }

    #[test]
    fn sub_feature_offsets_leave_map_in_place() {
        let m = map(1, 3, &[1.0, 2.0, 3.0]);
        let variants = [
            ShiftVariant { offset: (0, 0), map: m.clone(), score: 0.0 },
            ShiftVariant { offset: (0, 1), map: m.clone(), score: 0.0 },
        ];
        // one image pixel is a quarter feature pixel
        let (out, _) = shifted_manifest_scores(&variants, 2, (0.25, 0.25)).unwrap();
        assert_eq!(out, m);
        let (out, _) = shifted_manifest_scores(&variants, 2, (1.0, 1.0)).unwrap();
        assert_eq!(out.values(), &[1.0, 1.5, 2.5]);
    }

    #[test]
    fn translate_back_inverts_feature_shift() {
        let fm = FeatureMap::from_fn(4, 4, 1, |i, j, _| (i * 4 + j) as f64);
        let shifted = fm.shifted(1, -1);
        let as_map = AnomalyMap::new(4, 4, shifted.data().to_vec()).unwrap();
        let back = as_map.translated_back(1, -1);
        // interior pixels come back exactly
        for i in 1..4 {
            for j in 0..3 {
                assert_eq!(back.at(i, j), fm.at(i, j)[0]);
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let m = map(3, 4, &[2.0; 12]);
        let s = m.smoothed(1.5);
        assert!(s.values().iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert_eq!(m.smoothed(0.0), m);
    }

    #[test]
    fn pgm_preview_layout() {
        let m = map(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let pgm = preview_pgm(&m);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 6);
        assert_eq!(px[0], 0);
        assert_eq!(px[5], 255);
    }
}
