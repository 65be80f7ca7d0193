//! End-to-end fit, score, evaluate and ablation runs over feature maps.

use std::collections::HashMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate_bank::{
    aggregate_features, build_centroid_bank, BankParams, CentroidBank, DEFAULT_MAX_POINTS, DEFAULT_RATIO,
};
use crate::channel_reduce::{apply_selection, count_nonzero_per_channel, select_channels, ChannelSelection, DEFAULT_CHANNELS};
use crate::error::{Error, Result};
use crate::evaluation::{auroc, pro_curve, normalized_area, roc_curve, upsample_map, ProCurve, RocCurve};
use crate::evaluation::{DEFAULT_FPR_CAP, DEFAULT_PRO_THRESHOLDS};
use crate::feature::{common_dims, FeatureMap};
use crate::gaussian_field::{fit_pixel_gaussians, GaussianField, DEFAULT_EPSILON};
use crate::inference::{
    combine_maps, image_score, score_aggregated, score_d1, shift_offsets, shifted_manifest_scores, AnomalyMap,
    ShiftVariant, DEFAULT_K_TOP,
};
use crate::neighbor_sim::{fit_weighted_field, BcForm, WeightField, WeightedFitParams, Weighting, DEFAULT_GAMMA};
use crate::tensor_store::{read_tensor, DatasetManifest, ManifestEntry, TensorData};

/// Every tunable of a run. Missing JSON keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training neighborhood size.
    pub p: usize,
    /// Inference neighborhood size for D1.
    pub q: usize,
    /// Shift range; offsets span `[-r/2, r/2]^2`.
    pub r: usize,
    pub gamma: f64,
    pub epsilon: f64,
    /// Channels kept after reduction (clamped to the available count).
    pub d: usize,
    /// Centroids as a fraction of pooled training vectors.
    pub ratio: f64,
    pub k_top: usize,
    pub seed: u64,
    pub max_points: usize,
    pub bc_form: BcForm,
    pub weighting: Weighting,
    /// Count `|x| > 0` rather than `x > 0` during channel reduction.
    pub nonzero_abs: bool,
    pub medoid: bool,
    /// Without manifest shift variants, shift feature maps directly by feature-pixel offsets.
    pub feature_shift: bool,
    /// Gaussian blur of final maps; 0 disables.
    pub smooth_sigma: f64,
    pub fpr_cap: f64,
    pub pro_thresholds: usize,
    /// Warn when the fitted fields are projected to exceed this many MiB.
    pub memory_budget_mb: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            p: 3,
            q: 2,
            r: 4,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            d: DEFAULT_CHANNELS,
            ratio: DEFAULT_RATIO,
            k_top: DEFAULT_K_TOP,
            seed: 0,
            max_points: DEFAULT_MAX_POINTS,
            bc_form: BcForm::Simplified,
            weighting: Weighting::Similarity,
            nonzero_abs: false,
            medoid: false,
            feature_shift: false,
            smooth_sigma: 0.0,
            fpr_cap: DEFAULT_FPR_CAP,
            pro_thresholds: DEFAULT_PRO_THRESHOLDS,
            memory_budget_mb: 4096.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || self.q == 0 {
            return fail(format!("p and q must be at least 1, got p={} q={}", self.p, self.q));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return fail(format!("ratio must lie in (0, 1], got {}", self.ratio));
        }
        if self.d == 0 || self.k_top == 0 || self.max_points == 0 {
            return fail("d, k_top and max_points must be positive".into());
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return fail(format!("smooth_sigma must be non-negative, got {}", self.smooth_sigma));
        }
        if !(self.fpr_cap > 0.0 && self.fpr_cap <= 1.0) {
            return fail(format!("fpr_cap must lie in (0, 1], got {}", self.fpr_cap));
        }
        if self.pro_thresholds < 2 {
            return fail("pro_thresholds must be at least 2".into());
        }
        if !(self.memory_budget_mb > 0.0) {
            return fail("memory_budget_mb must be positive".into());
        }
        Ok(())
    }

    fn weighted_params(&self) -> WeightedFitParams {
        WeightedFitParams {
            p: self.p,
            gamma: self.gamma,
            epsilon: self.epsilon,
            bc_form: self.bc_form,
            weighting: self.weighting,
        }
    }

    fn bank_params(&self) -> BankParams {
        BankParams {
            ratio: self.ratio,
            seed: self.seed,
            max_points: self.max_points,
            medoid: self.medoid,
        }
    }
}

/// Bytes held by the two fitted fields (mean, covariance and Cholesky factor each).
pub fn projected_model_bytes(h: usize, w: usize, d: usize) -> u64 {
    2 * (h * w) as u64 * (d as u64 + 2 * (d * d) as u64) * 8
}

/// Everything needed to score new feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Effective configuration; `d` is the number of channels actually kept.
    pub config: RunConfig,
    pub selection: ChannelSelection,
    pub weighted: GaussianField,
    pub aggregate: GaussianField,
    pub bank: CentroidBank,
}

impl ModelBundle {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.weighted.height(), self.weighted.width(), self.weighted.dim())
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let dims = self.dims();
        let agg = (self.aggregate.height(), self.aggregate.width(), self.aggregate.dim());
        if agg != dims || self.bank.dim() != dims.2 || self.selection.len() != dims.2 || self.config.d != dims.2 {
            return Err(Error::ShapeMismatch(format!(
                "bundle parts disagree: weighted {dims:?}, aggregate {agg:?}, bank dim {}, {} selected channels, d={}",
                self.bank.dim(),
                self.selection.len(),
                self.config.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub bundle: ModelBundle,
    pub weights: WeightField,
}

fn choose_channels(counts: &[u64], config: &RunConfig) -> Result<ChannelSelection> {
    let d = config.d.min(counts.len());
    if d < config.d {
        warn!("d={} exceeds the {} available channels; keeping all", config.d, counts.len());
    }
    select_channels(counts, d)
}

/// Fits a bundle from in-memory training maps (all channels).
pub fn fit(maps: &[FeatureMap], config: &RunConfig) -> Result<FitOutput> {
    config.validate()?;
    let counts = count_nonzero_per_channel(maps, config.nonzero_abs)?;
    let selection = choose_channels(&counts, config)?;
    let reduced = maps
        .par_iter()
        .map(|m| apply_selection(m, &selection))
        .collect::<Result<Vec<_>>>()?;
    fit_reduced(&reduced, selection, config)
}

/// Fits from the training entries of a manifest, reading tensors twice so only
/// channel-reduced maps are held in memory.
pub fn fit_manifest(manifest: &DatasetManifest, config: &RunConfig, limit_train: Option<usize>) -> Result<FitOutput> {
    config.validate()?;
    let entries = train_entries(manifest, limit_train)?;
    let mut counts = vec![0u64; manifest.channels];
    for e in &entries {
        let fm = FeatureMap::load(&e.tensor)?;
        let c = count_nonzero_per_channel(std::slice::from_ref(&fm), config.nonzero_abs)?;
        counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    let selection = choose_channels(&counts, config)?;
    let reduced = entries
        .iter()
        .map(|e| apply_selection(&FeatureMap::load(&e.tensor)?, &selection))
        .collect::<Result<Vec<_>>>()?;
    fit_reduced(&reduced, selection, config)
}

/// Unshifted training entries, optionally truncated to the first `limit`.
pub fn train_entries(manifest: &DatasetManifest, limit: Option<usize>) -> Result<Vec<&ManifestEntry>> {
    let mut entries: Vec<&ManifestEntry> = manifest.train().filter(|e| e.offset() == (0, 0)).collect();
    if let Some(n) = limit {
        if n == 0 {
            return Err(Error::Config("limit-train must be positive".into()));
        }
        entries.truncate(n);
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput("manifest has no training entries".into()));
    }
    Ok(entries)
}

/// Fits from maps that already carry only the selected channels.
pub fn fit_reduced(reduced: &[FeatureMap], selection: ChannelSelection, config: &RunConfig) -> Result<FitOutput> {
    config.validate()?;
    let (h, w, d) = common_dims(reduced)?;
    if d != selection.len() {
        return Err(Error::ShapeMismatch(format!(
            "maps carry {d} channels, selection keeps {}",
            selection.len()
        )));
    }
    let bytes = projected_model_bytes(h, w, d);
    if bytes as f64 > config.memory_budget_mb * 1024.0 * 1024.0 {
        warn!(
            "fitted fields need about {:.0} MiB (budget {:.0} MiB); consider lowering d",
            bytes as f64 / 1048576.0,
            config.memory_budget_mb
        );
    }
    info!("fitting {} maps of {h}x{w}x{d}", reduced.len());
    let base = fit_pixel_gaussians(reduced, config.epsilon)?;
    let (weights, weighted) = fit_weighted_field(reduced, &base, &config.weighted_params())?;
    drop(base);
    let aggregated: Vec<FeatureMap> = reduced.par_iter().map(|m| aggregate_features(m, config.p)).collect();
    let aggregate = fit_pixel_gaussians(&aggregated, config.epsilon)?;
    let bank = build_centroid_bank(&aggregated, &config.bank_params())?;
    info!("centroid bank: {} centroids after {} iterations", bank.len(), bank.iterations);
    let config = RunConfig { d, ..config.clone() };
    let bundle = ModelBundle {
        config,
        selection,
        weighted,
        aggregate,
        bank,
    };
    Ok(FitOutput { bundle, weights })
}

/// Which parts of the model contribute to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modules {
    /// Weighted neighborhood field (D1).
    pub weighted: bool,
    /// Aggregate field (D2).
    pub aggregate: bool,
    /// Centroid bank for the image score.
    pub bank: bool,
    /// Shift ensembling.
    pub shift: bool,
}

impl Modules {
    pub const FULL: Modules = Modules {
        weighted: true,
        aggregate: true,
        bank: true,
        shift: true,
    };

    fn check(&self) -> Result<()> {
        if !self.weighted && !self.aggregate {
            return Err(Error::Config("at least one of the two fields must be enabled".into()));
        }
        Ok(())
    }
}

/// One test image with all of its shift variants (already on the full channel set).
#[derive(Debug, Clone)]
pub struct TestImage {
    pub id: String,
    pub label: u8,
    /// Offsets at image scale with their feature maps; always contains `(0, 0)`.
    pub variants: Vec<((i32, i32), FeatureMap)>,
    /// Image-scale ground-truth mask; `None` means all nominal.
    pub mask: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreOptions {
    pub modules: Modules,
    /// Use feature-pixel shifts when an image has no manifest variants.
    pub feature_shift: bool,
}

impl ScoreOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            modules: Modules::FULL,
            feature_shift: config.feature_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub map: AnomalyMap,
}

/// Map and image score of one reduced feature map without shift handling.
pub fn score_single(bundle: &ModelBundle, fm: &FeatureMap, modules: Modules) -> Result<(AnomalyMap, f64)> {
    modules.check()?;
    let cfg = &bundle.config;
    let d1 = if modules.weighted || modules.bank {
        Some(score_d1(fm, &bundle.weighted, cfg.q)?)
    } else {
        None
    };
    let agg = (modules.aggregate || modules.bank).then(|| aggregate_features(fm, cfg.p));
    let d2 = match (&agg, modules.aggregate) {
        (Some(a), true) => Some(score_aggregated(a, &bundle.aggregate)?),
        _ => None,
    };
    let map = match (modules.weighted, d1.as_ref(), d2) {
        (true, Some(d1), Some(d2)) => combine_maps(d1, &d2)?,
        (true, Some(d1), None) => d1.clone(),
        (_, _, Some(d2)) => d2,
        _ => unreachable!("checked above"),
    };
    let score = match (modules.bank, &agg) {
        (true, Some(agg)) => {
            let source = if modules.weighted { d1.as_ref().expect("computed") } else { &map };
            image_score(source, agg, &bundle.bank, cfg.k_top)?.value
        }
        _ => map.max(),
    };
    Ok((map, score))
}

/// Scores one test image, averaging over shift variants when enabled.
pub fn score_image(
    bundle: &ModelBundle,
    image: &TestImage,
    scale: (f64, f64),
    options: &ScoreOptions,
) -> Result<ScoredImage> {
    let cfg = &bundle.config;
    let base = image
        .variants
        .iter()
        .find(|(o, _)| *o == (0, 0))
        .map(|(_, fm)| fm)
        .ok_or_else(|| Error::InvalidInput(format!("image {} has no unshifted variant", image.id)))?;
    let reduce = |fm: &FeatureMap| {
        apply_selection(fm, &bundle.selection).map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("image {}: {m}", image.id)),
            other => other,
        })
    };
    let modules = options.modules;
    let (map, score) = if !modules.shift || (image.variants.len() == 1 && !options.feature_shift) {
        score_single(bundle, &reduce(base)?, modules)?
    } else if image.variants.len() > 1 {
        let variants = image
            .variants
            .iter()
            .map(|(offset, fm)| {
                let (map, score) = score_single(bundle, &reduce(fm)?, modules)?;
                Ok(ShiftVariant { offset: *offset, map, score })
            })
            .collect::<Result<Vec<_>>>()?;
        shifted_manifest_scores(&variants, cfg.r, scale)?
    } else {
        let reduced = reduce(base)?;
        let variants = shift_offsets(cfg.r)
            .into_iter()
            .map(|(a, b)| {
                let (map, score) = score_single(bundle, &reduced.shifted(a, b), modules)?;
                Ok(ShiftVariant { offset: (a, b), map, score })
            })
            .collect::<Result<Vec<_>>>()?;
        shifted_manifest_scores(&variants, cfg.r, (1.0, 1.0))?
    };
    Ok(ScoredImage {
        id: image.id.clone(),
        label: image.label,
        score,
        map: map.smoothed(cfg.smooth_sigma),
    })
}

/// Scores every test image; results keep the input order.
pub fn score_all(
    bundle: &ModelBundle,
    images: &[TestImage],
    scale: (f64, f64),
    options: &ScoreOptions,
) -> Result<Vec<ScoredImage>> {
    bundle.check()?;
    images
        .par_iter()
        .map(|img| score_image(bundle, img, scale, options))
        .collect()
}

/// Feature pixels per image pixel along each axis.
pub fn feature_scale(manifest: &DatasetManifest) -> (f64, f64) {
    (
        manifest.feature_hw.0 as f64 / manifest.image_hw.0 as f64,
        manifest.feature_hw.1 as f64 / manifest.image_hw.1 as f64,
    )
}

pub fn load_mask(path: &std::path::Path, image_hw: (usize, usize)) -> Result<Vec<u8>> {
    let t = read_tensor(path)?;
    let shape_ok = t.shape() == [image_hw.0, image_hw.1];
    match t.into_data() {
        TensorData::U8(v) if shape_ok => Ok(v),
        _ => Err(Error::Manifest {
            path: path.to_path_buf(),
            detail: format!("mask must be u8 of shape {}x{}", image_hw.0, image_hw.1),
        }),
    }
}

/// Test entries grouped by image id in first-appearance order.
pub fn test_groups(manifest: &DatasetManifest) -> Result<Vec<(String, Vec<&ManifestEntry>)>> {
    let mut order: Vec<(String, Vec<&ManifestEntry>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in manifest.test() {
        match index.get(e.id.as_str()) {
            Some(&i) => order[i].1.push(e),
            None => {
                index.insert(&e.id, order.len());
                order.push((e.id.clone(), vec![e]));
            }
        }
    }
    for (id, entries) in &order {
        if entries.iter().any(|e| e.label != entries[0].label) {
            return Err(Error::Manifest {
                path: manifest.path.clone(),
                detail: format!("variants of image {id} disagree on the label"),
            });
        }
        let mut offsets: Vec<_> = entries.iter().map(|e| e.offset()).collect();
        offsets.sort_unstable();
        if offsets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Manifest {
                path: manifest.path.clone(),
                detail: format!("image {id} repeats a shift offset"),
            });
        }
        if !offsets.contains(&(0, 0)) {
            return Err(Error::Manifest {
                path: manifest.path.clone(),
                detail: format!("image {id} lacks an unshifted entry"),
            });
        }
    }
    Ok(order)
}

/// Ground-truth label and mask of each test image id.
pub fn test_truth(manifest: &DatasetManifest) -> Result<Vec<(String, u8, Option<Vec<u8>>)>> {
    test_groups(manifest)?
        .into_iter()
        .map(|(id, entries)| {
            let label = entries[0].label.unwrap_or(0);
            let mask = entries
                .iter()
                .find_map(|e| e.mask.as_ref())
                .map(|p| load_mask(p, manifest.image_hw))
                .transpose()?;
            Ok((id, label, mask))
        })
        .collect()
}

pub fn load_test_images(manifest: &DatasetManifest) -> Result<Vec<TestImage>> {
    let truth = test_truth(manifest)?;
    let groups = test_groups(manifest)?;
    groups
        .into_iter()
        .zip(truth)
        .map(|((id, entries), (_, label, mask))| {
            let variants = entries
                .iter()
                .map(|e| Ok((e.offset(), FeatureMap::load(&e.tensor)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(TestImage {
                id,
                label,
                variants,
                mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub max_pixel: f64,
}

/// Metrics over one scored test set. Undefined metrics (a class is absent) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro_score: Option<f64>,
    pub fpr_cap: f64,
    pub pro_thresholds: usize,
    pub per_image: Vec<PerImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurves {
    pub image_roc: Option<RocCurve>,
    pub pro: Option<ProCurve>,
}

/// Evaluates scored images against ground truth; maps are upsampled to `image_hw`.
pub fn evaluate(
    scored: &[ScoredImage],
    masks: &[Option<Vec<u8>>],
    image_hw: (usize, usize),
    fpr_cap: f64,
    pro_thresholds: usize,
) -> Result<(EvalReport, EvalCurves)> {
    if scored.len() != masks.len() || scored.is_empty() {
        return Err(Error::InvalidInput(format!("{} scored images for {} masks", scored.len(), masks.len())));
    }
    let (hi, wi) = image_hw;
    let upsampled = scored
        .par_iter()
        .map(|s| upsample_map(&s.map, hi, wi))
        .collect::<Result<Vec<_>>>()?;
    let full_masks: Vec<Vec<u8>> = masks
        .iter()
        .map(|m| m.clone().unwrap_or_else(|| vec![0; hi * wi]))
        .collect();
    for (s, m) in scored.iter().zip(&full_masks) {
        if m.len() != hi * wi {
            return Err(Error::ShapeMismatch(format!("mask of {} has {} pixels, expected {}", s.id, m.len(), hi * wi)));
        }
    }

    let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let both = |l: &[u8]| l.contains(&0) && l.contains(&1);
    let (image_auroc, image_roc) = if both(&labels) {
        (Some(auroc(&scores, &labels)?), Some(roc_curve(&scores, &labels)?))
    } else {
        warn!("image AUROC undefined: test set has a single class");
        (None, None)
    };

    let pixel_scores: Vec<f64> = upsampled.iter().flat_map(|m| m.values().iter().copied()).collect();
    let pixel_labels: Vec<u8> = full_masks.iter().flat_map(|m| m.iter().map(|&v| u8::from(v > 0))).collect();
    let (pixel_auroc, pro_score, pro) = if both(&pixel_labels) {
        let curve = pro_curve(&upsampled, &full_masks, pro_thresholds)?;
        let area = normalized_area(&curve.fpr, &curve.pro, fpr_cap).clamp(0.0, 1.0);
        (Some(auroc(&pixel_scores, &pixel_labels)?), Some(area), Some(curve))
    } else {
        warn!("pixel metrics undefined: masks lack anomalous or nominal pixels");
        (None, None, None)
    };
    let per_image = scored
        .iter()
        .map(|s| PerImage {
            id: s.id.clone(),
            label: s.label,
            score: s.score,
            max_pixel: s.map.max(),
        })
        .collect();
    Ok((
        EvalReport {
            image_auroc,
            pixel_auroc,
            pro_score,
            fpr_cap,
            pro_thresholds,
            per_image,
        },
        EvalCurves { image_roc, pro },
    ))
}

/// One cell of the ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub name: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

/// Module combinations in table order.
pub fn ablation_experiments() -> Vec<(&'static str, Modules)> {
    let m = |weighted, aggregate, bank, shift| Modules {
        weighted,
        aggregate,
        bank,
        shift,
    };
    vec![
        ("experiment1", m(true, false, false, false)),
        ("experiment2", m(false, true, false, false)),
        ("experiment3", m(true, true, false, false)),
        ("experiment4", m(true, false, true, false)),
        ("experiment5", m(true, true, true, false)),
        ("full", Modules::FULL),
    ]
}

pub const ABLATION_K_TOP: [usize; 4] = [1, 3, 5, 10];

/// Runs the module ablation, the weighting-scheme comparison and the `k_top`
/// sweep on one dataset.
///
/// Weighting schemes are compared with D1 alone at `q = 1`, so the pixel
/// score depends only on each pixel's own weighted distribution.
pub fn run_ablation(
    train: &[FeatureMap],
    test: &[TestImage],
    image_hw: (usize, usize),
    scale: (f64, f64),
    config: &RunConfig,
) -> Result<Vec<AblationRow>> {
    let fitted = fit(train, config)?;
    let bundle = &fitted.bundle;
    let masks: Vec<Option<Vec<u8>>> = test.iter().map(|t| t.mask.clone()).collect();
    let run = |bundle: &ModelBundle, modules: Modules| -> Result<EvalReport> {
        let options = ScoreOptions {
            modules,
            // the full row falls back to feature shifts when the data carries none
            feature_shift: true,
        };
        let scored = score_all(bundle, test, scale, &options)?;
        Ok(evaluate(&scored, &masks, image_hw, config.fpr_cap, config.pro_thresholds)?.0)
    };
    let row = |table: &str, name: String, r: EvalReport| AblationRow {
        table: table.into(),
        name,
        image_auroc: r.image_auroc,
        pixel_auroc: r.pixel_auroc,
    };

    let mut rows = Vec::new();
    for (name, modules) in ablation_experiments() {
        info!("ablation: {name}");
        rows.push(row("modules", name.into(), run(bundle, modules)?));
    }

    let schemes = [
        ("uniform".to_string(), Weighting::Uniform),
        (format!("random_seed{}", config.seed), Weighting::Random { seed: config.seed }),
        (format!("random_seed{}", config.seed + 1), Weighting::Random { seed: config.seed + 1 }),
        ("similarity".to_string(), Weighting::Similarity),
    ];
    let a_only = ablation_experiments()[0].1;
    let reduced: Vec<FeatureMap> = train
        .par_iter()
        .map(|m| apply_selection(m, &bundle.selection))
        .collect::<Result<_>>()?;
    let base = fit_pixel_gaussians(&reduced, config.epsilon)?;
    for (name, weighting) in schemes {
        info!("ablation: weighting {name}");
        let params = WeightedFitParams {
            weighting,
            ..bundle.config.weighted_params()
        };
        let (_, weighted) = fit_weighted_field(&reduced, &base, &params)?;
        let variant = ModelBundle {
            config: RunConfig { q: 1, ..bundle.config.clone() },
            weighted,
            ..bundle.clone()
        };
        rows.push(row("weighting", name, run(&variant, a_only)?));
    }

    for k in ABLATION_K_TOP {
        let hw = bundle.weighted.pixels();
        if k > hw {
            continue;
        }
        let variant = ModelBundle {
            config: RunConfig { k_top: k, ..bundle.config.clone() },
            ..bundle.clone()
        };
        rows.push(row("k_top", format!("k{k}"), run(&variant, Modules::FULL)?));
    }
    Ok(rows)
}
