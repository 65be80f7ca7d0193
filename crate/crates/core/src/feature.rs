use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_store::{read_tensor, write_tensor, Tensor, TensorData};

/// An `H x W x C` grid of feature vectors, stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w, c],
                reason: "feature map dimensions must be positive".into(),
            });
        }
        if data.len() != h * w * c {
            return Err(Error::InvalidShape {
                shape: vec![h, w, c],
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector at flat pixel index `h * W + w`.
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.c..(idx + 1) * self.c]
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        self.pixel(h * self.w + w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "feature map tensor must be H x W x C".into(),
            });
        }
        if matches!(t.data(), TensorData::U8(_)) {
            return Err(Error::InvalidInput("feature map tensor must be f32 or f64".into()));
        }
        Self::new(shape[0], shape[1], shape[2], t.to_f64_vec())
    }

    /// Narrows to an f32 tensor (the on-disk feature format).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x as f32).collect();
        Tensor::from_f32(vec![self.h, self.w, self.c], data).expect("valid feature map shape")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(&read_tensor(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &self.to_tensor())
    }

    /// Translates the map so that `out[h - a, w - b] = self[h, w]`, replicating edge pixels.
    pub fn shifted(&self, a: i32, b: i32) -> Self {
        let (h, w, c) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..h {
            let si = clamp_index(i as i64 + a as i64, h);
            for j in 0..w {
                let sj = clamp_index(j as i64 + b as i64, w);
                data.extend_from_slice(self.at(si, sj));
            }
        }
        Self { h, w, c, data }
    }
}

#[inline]
pub(crate) fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Checks that all maps share one shape and returns it.
pub fn common_dims(maps: &[FeatureMap]) -> Result<(usize, usize, usize)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("no feature maps given".into()))?
        .dims();
    for (i, m) in maps.iter().enumerate() {
        if m.dims() != first {
            return Err(Error::ShapeMismatch(format!(
                "feature map {i} is {:?}, expected {:?}",
                m.dims(),
                first
            )));
        }
    }
    Ok(first)
}
