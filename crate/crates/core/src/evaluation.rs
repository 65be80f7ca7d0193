//! Detection and segmentation metrics: AUROC and the per-region overlap (PRO) score.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{quantile_sorted, AnomalyMap};

pub const DEFAULT_FPR_CAP: f64 = 0.3;
pub const DEFAULT_PRO_THRESHOLDS: usize = 200;

/// Bilinear resize with corner-aligned sampling.
pub fn upsample_map(map: &AnomalyMap, out_h: usize, out_w: usize) -> Result<AnomalyMap> {
    let (h, w) = (map.height(), map.width());
    if out_h < h || out_w < w {
        return Err(Error::InvalidInput(format!(
            "cannot upsample {h}x{w} to smaller {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(map.clone());
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| coord(j, w, out_w)).collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, ty) = coord(i, h, out_h);
        for &(c0, c1, tx) in &cols {
            let top = map.at(r0, c0) + (map.at(r0, c1) - map.at(r0, c0)) * tx;
            let bottom = map.at(r1, c0) + (map.at(r1, c1) - map.at(r1, c0)) * tx;
            let v = top + (bottom - top) * ty;
            // keep within the source range despite rounding
            let lo = map.at(r0, c0).min(map.at(r0, c1)).min(map.at(r1, c0)).min(map.at(r1, c1));
            let hi = map.at(r0, c0).max(map.at(r0, c1)).max(map.at(r1, c0)).max(map.at(r1, c1));
            values.push(v.clamp(lo, hi));
        }
    }
    AnomalyMap::new(out_h, out_w, values)
}

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("AUROC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// Rank-based (Mann-Whitney) AUROC; tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.par_sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok((twice_u as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// ROC points from the highest threshold down, starting at `(0, 0)` and ending at `(1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch("scores and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.par_sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        tpr: vec![0.0],
        fpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.fpr.push(fp as f64 / neg as f64);
    }
    Ok(curve)
}

/// 8-connected components of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub h: usize,
    pub w: usize,
    /// 0 for background, otherwise `1..=count` in first-seen row-major order.
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Components {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

pub fn connected_components(mask: &[u8], h: usize, w: usize) -> Result<Components> {
    if mask.len() != h * w {
        return Err(Error::ShapeMismatch(format!("mask has {} values for {h}x{w}", mask.len())));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (i, j) = ((idx / w) as i64, (idx % w) as i64);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let n = ni as usize * w + nj as usize;
                    if mask[n] == 1 && labels[n] == 0 {
                        labels[n] = count;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    Ok(Components {
        h,
        w,
        labels,
        count: count as usize,
    })
}

/// Mean per-component overlap against global false-positive rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub pro: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProParams {
    pub fpr_cap: f64,
    pub n_thresholds: usize,
}

impl Default for ProParams {
    fn default() -> Self {
        Self {
            fpr_cap: DEFAULT_FPR_CAP,
            n_thresholds: DEFAULT_PRO_THRESHOLDS,
        }
    }
}

/// PRO curve over thresholds at evenly spaced quantiles of the pooled scores,
/// preceded by the empty prediction `(0, 0)`.
pub fn pro_curve(maps: &[AnomalyMap], masks: &[Vec<u8>], n_thresholds: usize) -> Result<ProCurve> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    if n_thresholds < 2 {
        return Err(Error::Config("PRO needs at least 2 thresholds".into()));
    }
    let mut components = Vec::with_capacity(maps.len());
    let mut region_sizes = Vec::new();
    let mut nominal_pixels = 0u64;
    for (m, mask) in maps.iter().zip(masks) {
        let cc = connected_components(mask, m.height(), m.width())?;
        nominal_pixels += mask.iter().filter(|&&v| v == 0).count() as u64;
        region_sizes.extend(cc.sizes());
        components.push(cc);
    }
    if region_sizes.is_empty() {
        return Err(Error::InvalidInput("no anomalous pixels in any mask".into()));
    }
    if nominal_pixels == 0 {
        return Err(Error::InvalidInput("no nominal pixels; FPR undefined".into()));
    }

    let mut pooled: Vec<f64> = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    pooled.par_sort_unstable_by(f64::total_cmp);
    let thresholds: Vec<f64> = (0..n_thresholds)
        .rev()
        .map(|t| quantile_sorted(&pooled, t as f64 / (n_thresholds - 1) as f64))
        .collect();

    // global component index offset per image
    let mut offsets = Vec::with_capacity(components.len());
    let mut acc = 0usize;
    for cc in &components {
        offsets.push(acc);
        acc += cc.count;
    }
    let points: Vec<(f64, f64)> = thresholds
        .par_iter()
        .map(|&t| {
            let mut hits = vec![0u64; region_sizes.len()];
            let mut false_pos = 0u64;
            for ((m, cc), &off) in maps.iter().zip(&components).zip(&offsets) {
                for (&v, &l) in m.values().iter().zip(&cc.labels) {
                    if v >= t {
                        if l == 0 {
                            false_pos += 1;
                        } else {
                            hits[off + l as usize - 1] += 1;
                        }
                    }
                }
            }
            let pro = hits
                .iter()
                .zip(&region_sizes)
                .map(|(&h, &s)| h as f64 / s as f64)
                .sum::<f64>()
                / region_sizes.len() as f64;
            (false_pos as f64 / nominal_pixels as f64, pro)
        })
        .collect();

    let mut curve = ProCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        pro: vec![0.0],
    };
    for (t, (f, p)) in thresholds.into_iter().zip(points) {
        curve.thresholds.push(t);
        curve.fpr.push(f);
        curve.pro.push(p);
    }
    Ok(curve)
}

/// Trapezoid area under `(x, y)` for `x` in `[0, cap]`, divided by `cap`.
/// Points must be ordered by non-decreasing `x`.
pub fn normalized_area(x: &[f64], y: &[f64], cap: f64) -> f64 {
    let mut area = 0.0;
    for i in 1..x.len() {
        let (x0, x1, y0, y1) = (x[i - 1], x[i], y[i - 1], y[i]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yc = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + yc) / 2.0;
            break;
        }
    }
    area / cap
}

/// Normalized area under the PRO curve up to `fpr_cap`.
pub fn pro_score(maps: &[AnomalyMap], masks: &[Vec<u8>], params: &ProParams) -> Result<f64> {
    if !(params.fpr_cap > 0.0 && params.fpr_cap <= 1.0) {
        return Err(Error::Config(format!("fpr_cap must lie in (0, 1], got {}", params.fpr_cap)));
    }
    let curve = pro_curve(maps, masks, params.n_thresholds)?;
    Ok(normalized_area(&curve.fpr, &curve.pro, params.fpr_cap).clamp(0.0, 1.0))
}
