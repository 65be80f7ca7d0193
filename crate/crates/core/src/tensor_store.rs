//! NPAD binary tensors and the JSON dataset manifest.
//!
//! Layout of an NPAD file (all integers little-endian):
//!
//! ```text
//! "NPAD" | u8 version (=1) | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim | ndim x u32 dims | payload
//! ```
//!
//! The payload holds `product(dims)` values in row-major order.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NPAD";
pub const VERSION: u8 = 1;
const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }
}

/// A dense row-major tensor with 1 to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_DIMS {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("expected 1 to {MAX_DIMS} dimensions"),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    if shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimension does not fit in u32".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} values but shape needs {numel}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Values widened to f64, whatever the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    /// Serialized byte image of this tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header_len = 7 + 4 * self.shape.len();
        let mut out = Vec::with_capacity(header_len + self.numel() * self.dtype().size_of());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = parse_header(bytes, path)?;
        let payload = &bytes[header.header_len..];
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("payload has {} bytes, header promises {expected}", payload.len()),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes after payload", payload.len() - expected),
            });
        }
        let data = match header.dtype {
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(payload.to_vec()),
        };
        Tensor::new(header.shape, data)
    }
}

/// Parsed NPAD header, without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub header_len: usize,
}

impl TensorHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<TensorHeader> {
    let truncated = |detail: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 4 {
        return Err(truncated("missing magic"));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    if bytes.len() < 7 {
        return Err(truncated("incomplete header"));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: bytes[4],
        });
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or(Error::UnknownDtype {
        path: path.to_path_buf(),
        code: bytes[5],
    })?;
    let ndim = bytes[6] as usize;
    let header_len = 7 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(truncated("incomplete dimension list"));
    }
    let shape: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    check_shape(&shape).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(TensorHeader {
        dtype,
        shape,
        header_len,
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

/// Reads only the header and checks the file length against it.
pub fn read_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut head = vec![0u8; 7 + 4 * MAX_DIMS];
    let mut filled = 0;
    while filled < head.len() {
        let n = file.read(&mut head[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    head.truncate(filled);
    let header = parse_header(&head, path)?;
    let expected = header.header_len + header.payload_len();
    if file_len < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("file has {file_len} bytes, header promises {expected}"),
        });
    }
    if file_len > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after payload", file_len - expected),
        });
    }
    Ok(header)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// One manifest row as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    /// Image identifier; shift variants of one image share it. Defaults to the tensor file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub tensor: String,
    pub role: Role,
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub shift: Option<[i32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub feature_hw: [usize; 2],
    pub image_hw: [usize; 2],
    pub entries: Vec<EntryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub tensor: PathBuf,
    pub role: Role,
    pub label: Option<u8>,
    pub mask: Option<PathBuf>,
    pub shift: Option<(i32, i32)>,
}

impl ManifestEntry {
    pub fn offset(&self) -> (i32, i32) {
        self.shift.unwrap_or((0, 0))
    }
}

/// A validated manifest; paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub feature_hw: (usize, usize),
    pub image_hw: (usize, usize),
    pub channels: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.role == Role::Test)
    }

    /// Checks every shift offset against `[-r/2, r/2]^2`.
    pub fn check_shifts(&self, r: usize) -> Result<()> {
        let half = (r / 2) as i32;
        for e in &self.entries {
            if let Some((a, b)) = e.shift {
                if a.abs() > half || b.abs() > half {
                    return Err(self.err(format!(
                        "entry {} has shift ({a}, {b}) outside [-{half}, {half}]^2 for r = {r}",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn err(&self, detail: String) -> Error {
        Error::Manifest {
            path: self.path.clone(),
            detail,
        }
    }
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: ManifestRecord = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_manifest(record, base, path)
}

pub fn resolve_manifest(record: ManifestRecord, base: &Path, path: &Path) -> Result<DatasetManifest> {
    let err = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    let (fh, fw) = (record.feature_hw[0], record.feature_hw[1]);
    let (ih, iw) = (record.image_hw[0], record.image_hw[1]);
    if fh == 0 || fw == 0 || ih == 0 || iw == 0 {
        return Err(err("feature_hw and image_hw must be positive".into()));
    }
    let mut channels: Option<(usize, String)> = None;
    let mut entries = Vec::with_capacity(record.entries.len());
    for rec in record.entries {
        let tensor = base.join(&rec.tensor);
        let id = rec.id.clone().unwrap_or_else(|| stem_of(&rec.tensor));
        match (rec.role, rec.label) {
            (Role::Train, Some(l)) if l != 0 => {
                return Err(err(format!(
                    "train entry {id} has label {l}; training data must be nominal"
                )))
            }
            (Role::Test, None) => return Err(err(format!("test entry {id} has no label"))),
            (_, Some(l)) if l > 1 => return Err(err(format!("entry {id} has label {l}, expected 0 or 1"))),
            _ => {}
        }

        let header = read_header(&tensor)?;
        if header.dtype == Dtype::U8 || header.shape.len() != 3 {
            return Err(err(format!(
                "{} must be an H x W x C float tensor, found {:?} {:?}",
                tensor.display(),
                header.dtype,
                header.shape
            )));
        }
        let (h, w, c) = (header.shape[0], header.shape[1], header.shape[2]);
        if (h, w) != (fh, fw) {
            return Err(Error::ShapeMismatch(format!(
                "{} is {h}x{w}, manifest feature_hw is {fh}x{fw}",
                tensor.display()
            )));
        }
        match &channels {
            None => channels = Some((c, tensor.display().to_string())),
            Some((c0, first)) if *c0 != c => {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {c} channels but {first} has {c0}",
                    tensor.display()
                )))
            }
            _ => {}
        }

        let mask = match rec.mask {
            Some(m) => {
                let mask = base.join(m);
                let mh = read_header(&mask)?;
                if mh.dtype != Dtype::U8 || mh.shape != [ih, iw] {
                    return Err(Error::ShapeMismatch(format!(
                        "mask {} must be u8 {ih}x{iw}, found {:?} {:?}",
                        mask.display(),
                        mh.dtype,
                        mh.shape
                    )));
                }
                Some(mask)
            }
            None => None,
        };

        entries.push(ManifestEntry {
            id,
            tensor,
            role: rec.role,
            label: rec.label,
            mask,
            shift: rec.shift.map(|[a, b]| (a, b)),
        });
    }
    let channels = channels.map(|(c, _)| c).ok_or_else(|| err("manifest has no entries".into()))?;
    Ok(DatasetManifest {
        path: path.to_path_buf(),
        feature_hw: (fh, fw),
        image_hw: (ih, iw),
        channels,
        entries,
    })
}

pub fn save_manifest(path: impl AsRef<Path>, record: &ManifestRecord) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(record).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
