//! On-disk model bundles: a directory of NPAD tensors plus `meta.json`,
//! written atomically and checked against a SHA-256 content hash on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate_bank::CentroidBank;
use crate::channel_reduce::ChannelSelection;
use crate::error::{Error, Result};
use crate::gaussian_field::GaussianField;
use crate::pipeline::{ModelBundle, RunConfig};
use crate::tensor_store::Tensor;

pub const META_FILE: &str = "meta.json";
const FORMAT: &str = "npad-bundle";
const FORMAT_VERSION: u32 = 1;
const TENSOR_FILES: [&str; 5] = [
    "weighted_mean.npad",
    "weighted_cov.npad",
    "aggregate_mean.npad",
    "aggregate_cov.npad",
    "centroids.npad",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BankMeta {
    count: usize,
    ratio: f64,
    seed: u64,
    inertia: f64,
    inertia_history: Vec<f64>,
    iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    config: RunConfig,
    selection: ChannelSelection,
    /// `[height, width, dim]`
    grid: [usize; 3],
    bank: BankMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_hash: Option<String>,
}

fn field_tensors(f: &GaussianField) -> Result<(Tensor, Tensor)> {
    let (h, w, d) = (f.height(), f.width(), f.dim());
    Ok((
        Tensor::from_f64(vec![h, w, d], f.means().to_vec())?,
        Tensor::from_f64(vec![h, w, d, d], f.covariances().to_vec())?,
    ))
}

fn hash_parts(files: &[(&str, Vec<u8>)], meta: &Meta) -> String {
    let mut hasher = Sha256::new();
    for (name, bytes) in files {
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let unhashed = Meta {
        content_hash: None,
        ..meta.clone()
    };
    hasher.update(serde_json::to_vec(&unhashed).expect("meta serializes"));
    hex::encode(hasher.finalize())
}

fn encode(bundle: &ModelBundle) -> Result<(Vec<(&'static str, Vec<u8>)>, Meta)> {
    bundle.check()?;
    let (wm, wc) = field_tensors(&bundle.weighted)?;
    let (am, ac) = field_tensors(&bundle.aggregate)?;
    let bank = &bundle.bank;
    let centroids = Tensor::from_f64(vec![bank.len(), bank.dim()], bank.centroids().to_vec())?;
    let files: Vec<(&str, Vec<u8>)> = TENSOR_FILES
        .iter()
        .zip([wm, wc, am, ac, centroids])
        .map(|(&n, t)| (n, t.to_bytes()))
        .collect();
    let (h, w, d) = bundle.dims();
    let mut meta = Meta {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        config: bundle.config.clone(),
        selection: bundle.selection.clone(),
        grid: [h, w, d],
        bank: BankMeta {
            count: bank.len(),
            ratio: bank.ratio,
            seed: bank.seed,
            inertia: bank.inertia,
            inertia_history: bank.inertia_history.clone(),
            iterations: bank.iterations,
        },
        content_hash: None,
    };
    meta.content_hash = Some(hash_parts(&files, &meta));
    Ok((files, meta))
}

/// SHA-256 over the bundle's tensors and metadata, as stored in `meta.json`.
pub fn content_hash(bundle: &ModelBundle) -> Result<String> {
    Ok(encode(bundle)?.1.content_hash.expect("hash set by encode"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `bundle` to `dir` through a sibling temporary directory and a rename,
/// so a failed write never leaves a partial bundle. An existing bundle at `dir`
/// is replaced; any other existing path is an error. Returns the content hash.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<String> {
    let (files, meta) = encode(bundle)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("bundle path {} has no final component", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    if dir.exists() && !dir.join(META_FILE).is_file() {
        return Err(Error::InvalidInput(format!(
            "{} exists and is not a model bundle; refusing to replace it",
            dir.display()
        )));
    }
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let result = (|| {
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (file, bytes) in &files {
            write_file(&tmp.join(file), bytes)?;
        }
        let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        write_file(&tmp.join(META_FILE), &json)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result?;
    Ok(meta.content_hash.expect("hash set by encode"))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_field(dir: &Path, mean: &[u8], cov: &[u8], names: (&str, &str), grid: [usize; 3], eps: f64) -> Result<GaussianField> {
    let [h, w, d] = grid;
    let mp = dir.join(names.0);
    let cp = dir.join(names.1);
    let mt = Tensor::from_bytes(mean, &mp)?;
    let ct = Tensor::from_bytes(cov, &cp)?;
    if mt.shape() != [h, w, d] || ct.shape() != [h, w, d, d] {
        return Err(format_err(&mp, "field tensors do not match the bundle grid"));
    }
    GaussianField::from_moments(h, w, d, eps, mt.to_f64_vec(), ct.to_f64_vec())
}

/// Loads a bundle written by [`save_bundle`], verifying its content hash.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.format != FORMAT || meta.version != FORMAT_VERSION {
        return Err(format_err(&meta_path, format!("unsupported bundle {} v{}", meta.format, meta.version)));
    }
    let mut files = Vec::with_capacity(TENSOR_FILES.len());
    for name in TENSOR_FILES {
        let p = dir.join(name);
        files.push((name, fs::read(&p).map_err(|e| Error::io(&p, e))?));
    }
    let expected = hash_parts(&files, &meta);
    if meta.content_hash.as_deref() != Some(expected.as_str()) {
        return Err(format_err(&meta_path, "content hash mismatch; bundle is corrupt or was edited"));
    }
    let eps = meta.config.epsilon;
    let weighted = read_field(dir, &files[0].1, &files[1].1, (TENSOR_FILES[0], TENSOR_FILES[1]), meta.grid, eps)?;
    let aggregate = read_field(dir, &files[2].1, &files[3].1, (TENSOR_FILES[2], TENSOR_FILES[3]), meta.grid, eps)?;
    let cp = dir.join(TENSOR_FILES[4]);
    let ct = Tensor::from_bytes(&files[4].1, &cp)?;
    if ct.shape() != [meta.bank.count, meta.grid[2]] {
        return Err(format_err(&cp, "centroid tensor does not match the bundle metadata"));
    }
    let b = &meta.bank;
    let mut bank = CentroidBank::from_centroids(meta.grid[2], ct.to_f64_vec(), b.ratio, b.seed, b.inertia)?;
    bank.inertia_history = b.inertia_history.clone();
    bank.iterations = b.iterations;
    let bundle = ModelBundle {
        config: meta.config,
        selection: ChannelSelection::new(meta.selection.indices().to_vec(), meta.selection.source_channels())?,
        weighted,
        aggregate,
        bank,
    };
    bundle.check()?;
    Ok(bundle)
}
