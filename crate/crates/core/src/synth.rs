//! Seeded synthetic feature-map datasets: a smooth per-channel template plus
//! smooth unit-variance noise, with mean-shifted rectangular patches as anomalies.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::tensor_store::{save_manifest, write_tensor, EntryRecord, ManifestRecord, Role, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test_nominal: usize,
    pub n_test_anomalous: usize,
    /// Patch shift in units of the nominal per-pixel standard deviation.
    pub amplitude: f64,
    pub patch_min: usize,
    pub patch_max: usize,
    /// Maximum global misalignment in feature pixels, drawn per map.
    pub jitter: usize,
    /// Image pixels per feature pixel, used for masks.
    pub image_scale: usize,
    /// Spatial correlation length of the noise.
    pub noise_sigma: f64,
    pub template_sigma: f64,
    pub template_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 8,
            n_train: 50,
            n_test_nominal: 20,
            n_test_anomalous: 20,
            amplitude: 3.0,
            patch_min: 2,
            patch_max: 4,
            jitter: 0,
            image_scale: 4,
            noise_sigma: 1.0,
            template_sigma: 3.0,
            template_amplitude: 2.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.image_scale == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.patch_min == 0 || self.patch_min > self.patch_max || self.patch_max > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "patch size range [{}, {}] does not fit a {}x{} grid",
                self.patch_min, self.patch_max, self.height, self.width
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config("amplitude must be finite and non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.template_sigma >= 0.0) {
            return Err(Error::Config("smoothing scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.height * self.image_scale, self.width * self.image_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub map: FeatureMap,
    pub label: u8,
    /// Image-scale mask, row-major `u8` in {0, 1}.
    pub mask: Vec<u8>,
    /// Feature-grid rectangle `(top, left, height, width)` of the anomaly.
    pub patch: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub params: SynthParams,
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

// stream ids keep every sample independent of generation order
const TEMPLATE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1 << 32;
const TEST_STREAM: u64 = 2 << 32;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| v / total).collect()
}

/// Unit-variance smooth random field of size `h x w`, one per channel,
/// channel-interleaved like a feature map.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let (hh, ww) = (h + 2 * r, w + 2 * r);
    // blurring white noise scales its variance by (sum k^2)^2 for a separable kernel
    let gain: f64 = kernel.iter().map(|k| k * k).sum();
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        let noise: Vec<f64> = (0..hh * ww).map(|_| rng.sample(StandardNormal)).collect();
        let mut rows = vec![0.0; hh * w];
        for i in 0..hh {
            for j in 0..w {
                rows[i * w + j] = kernel.iter().enumerate().map(|(t, k)| k * noise[i * ww + j + t]).sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                let v: f64 = kernel.iter().enumerate().map(|(t, k)| k * rows[(i + t) * w + j]).sum();
                out[(i * w + j) * c + ch] = v / gain;
            }
        }
    }
    out
}

/// Feature index nearest to image index `i` under the corner-aligned
/// geometry used when anomaly maps are upsampled for evaluation.
fn nearest_source(i: usize, n_out: usize, n_in: usize) -> usize {
    if n_out <= 1 {
        return 0;
    }
    (i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64).round() as usize
}

struct Generator<'a> {
    params: &'a SynthParams,
    template: Vec<f64>,
    canvas: (usize, usize),
}

impl Generator<'_> {
    fn sample(&self, stream: u64, anomalous: bool, id: String) -> SynthSample {
        let p = self.params;
        let (h, w, c) = (p.height, p.width, p.channels);
        let (ch, cw) = self.canvas;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(stream);
        let j = p.jitter as i64;
        let dy = (rng.gen_range(-j..=j) + j) as usize;
        let dx = (rng.gen_range(-j..=j) + j) as usize;
        let noise = smooth_field(&mut rng, h, w, c, p.noise_sigma);
        let mut data = vec![0.0; h * w * c];
        for i in 0..h {
            for jj in 0..w {
                let src = ((i + dy) * cw + jj + dx) * c;
                let dst = (i * w + jj) * c;
                for k in 0..c {
                    data[dst + k] = self.template[src + k] + noise[dst + k];
                }
            }
        }
        debug_assert!(dy + h <= ch);

        let (hi, wi) = p.image_hw();
        let mut mask = vec![0u8; hi * wi];
        let mut patch = None;
        if anomalous {
            let ph = rng.gen_range(p.patch_min..=p.patch_max);
            let pw = rng.gen_range(p.patch_min..=p.patch_max);
            let top = rng.gen_range(0..=h - ph);
            let left = rng.gen_range(0..=w - pw);
            let signs: Vec<f64> = (0..c).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            for i in top..top + ph {
                for jj in left..left + pw {
                    let dst = (i * w + jj) * c;
                    for (k, s) in signs.iter().enumerate() {
                        data[dst + k] += s * p.amplitude;
                    }
                }
            }
            let rows: Vec<bool> = (0..hi).map(|y| (top..top + ph).contains(&nearest_source(y, hi, h))).collect();
            let cols: Vec<bool> = (0..wi).map(|x| (left..left + pw).contains(&nearest_source(x, wi, w))).collect();
            for (y, &in_row) in rows.iter().enumerate() {
                for (x, &in_col) in cols.iter().enumerate() {
                    mask[y * wi + x] = u8::from(in_row && in_col);
                }
            }
            patch = Some((top, left, ph, pw));
        }
        // round through f32 so the in-memory maps equal what is written to disk
        data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        SynthSample {
            id,
            map: FeatureMap::new(h, w, c, data).expect("consistent synthetic shape"),
            label: u8::from(anomalous),
            mask,
            patch,
        }
    }
}

pub fn generate(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let j = params.jitter;
    let canvas = (params.height + 2 * j, params.width + 2 * j);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(TEMPLATE_STREAM);
    let mut template = smooth_field(&mut rng, canvas.0, canvas.1, params.channels, params.template_sigma);
    template.iter_mut().for_each(|v| *v *= params.template_amplitude);
    let gen = Generator { params, template, canvas };

    let train = (0..params.n_train)
        .map(|i| gen.sample(TRAIN_STREAM + i as u64, false, format!("train_{i:04}")))
        .collect();
    let n_nom = params.n_test_nominal;
    let test = (0..n_nom + params.n_test_anomalous)
        .map(|i| {
            let anomalous = i >= n_nom;
            let id = if anomalous {
                format!("test_anomalous_{:04}", i - n_nom)
            } else {
                format!("test_nominal_{i:04}")
            };
            gen.sample(TEST_STREAM + i as u64, anomalous, id)
        })
        .collect();
    Ok(SynthDataset {
        params: params.clone(),
        train,
        test,
    })
}

impl SynthDataset {
    /// Writes tensors, masks, `manifest.json` and `synth.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["train", "test", "masks"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let (hi, wi) = self.params.image_hw();
        let mut entries = Vec::new();
        for s in &self.train {
            let rel = format!("train/{}.npad", s.id);
            s.map.save(dir.join(&rel))?;
            entries.push(EntryRecord {
                id: Some(s.id.clone()),
                tensor: rel,
                role: Role::Train,
                label: Some(0),
                mask: None,
                shift: None,
            });
        }
        for s in &self.test {
            let rel = format!("test/{}.npad", s.id);
            s.map.save(dir.join(&rel))?;
            let mask_rel = format!("masks/{}.npad", s.id);
            write_tensor(dir.join(&mask_rel), &Tensor::from_u8(vec![hi, wi], s.mask.clone())?)?;
            entries.push(EntryRecord {
                id: Some(s.id.clone()),
                tensor: rel,
                role: Role::Test,
                label: Some(s.label),
                mask: Some(mask_rel),
                shift: None,
            });
        }
        let record = ManifestRecord {
            feature_hw: [self.params.height, self.params.width],
            image_hw: [hi, wi],
            entries,
        };
        save_manifest(dir.join("manifest.json"), &record)?;
        let echo = serde_json::to_vec_pretty(&self.params).expect("params serialize");
        fs::write(dir.join("synth.json"), echo).map_err(|e| Error::io(dir.join("synth.json"), e))
    }

    pub fn train_maps(&self) -> Vec<FeatureMap> {
        self.train.iter().map(|s| s.map.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            n_train: 4,
            n_test_nominal: 2,
            n_test_anomalous: 2,
            seed: 3,
            ..SynthParams::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthParams { seed: 4, ..small() };
        assert_ne!(generate(&small()).unwrap().train, generate(&other).unwrap().train);
    }

    #[test]
    fn masks_follow_patches() {
        let ds = generate(&small()).unwrap();
        for s in &ds.test {
            let ones = s.mask.iter().filter(|&&m| m == 1).count();
            match s.patch {
                None => assert_eq!((s.label, ones), (0, 0)),
                Some((_, _, ph, pw)) => {
                    assert_eq!(s.label, 1);
                    assert!((2..=4).contains(&ph) && (2..=4).contains(&pw));
                    let (top, left) = (s.patch.unwrap().0, s.patch.unwrap().1);
                    let (hi, wi) = (64, 64);
                    for y in 0..hi {
                        for x in 0..wi {
                            let inside = (top..top + ph).contains(&nearest_source(y, hi, 16))
                                && (left..left + pw).contains(&nearest_source(x, wi, 16));
                            assert_eq!(s.mask[y * wi + x], u8::from(inside));
                        }
                    }
                    assert!(ones > 0);
                }
            }
            assert_eq!(s.mask.len(), 64 * 64);
        }
    }

    #[test]
    fn nearest_source_matches_corner_alignment() {
        assert_eq!(nearest_source(0, 64, 16), 0);
        assert_eq!(nearest_source(63, 64, 16), 15);
        assert_eq!(nearest_source(5, 64, 16), 1);
        assert_eq!(nearest_source(3, 1, 16), 0);
    }

    #[test]
    fn noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = smooth_field(&mut rng, 40, 40, 4, 1.0);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((var - 1.0).abs() < 0.25, "variance {var}");
    }

    #[test]
    fn patch_sizes_must_fit() {
        let bad = SynthParams { patch_max: 20, ..small() };
        assert!(generate(&bad).is_err());
    }
}
