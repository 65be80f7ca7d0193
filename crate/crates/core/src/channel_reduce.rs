//! Channel selection by sparsity: keep the `d` channels whose nominal
//! activations are nonzero least often.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{common_dims, FeatureMap};

/// Default number of kept channels.
pub const DEFAULT_CHANNELS: usize = 550;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    indices: Vec<usize>,
    source_channels: usize,
}

impl ChannelSelection {
    pub fn new(indices: Vec<usize>, source_channels: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("channel selection is empty".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("channel indices must be strictly increasing".into()));
        }
        if indices.last().is_some_and(|&i| i >= source_channels) {
            return Err(Error::Config(format!(
                "channel index out of range for {source_channels} channels"
            )));
        }
        Ok(Self {
            indices,
            source_channels,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            indices: (0..channels).collect(),
            source_channels: channels,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_channels(&self) -> usize {
        self.source_channels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-channel count of nonzero entries over all maps and pixels.
///
/// A value counts as nonzero when it is strictly positive, or when its
/// magnitude is positive if `use_abs` is set (for features exported before the ReLU).
pub fn count_nonzero_per_channel(maps: &[FeatureMap], use_abs: bool) -> Result<Vec<u64>> {
    let (_, _, c) = common_dims(maps)?;
    let nonzero = |x: f64| if use_abs { x.abs() > 0.0 } else { x > 0.0 };
    let counts = maps
        .par_iter()
        .map(|m| {
            let mut counts = vec![0u64; c];
            for px in m.data().chunks_exact(c) {
                for (n, &x) in counts.iter_mut().zip(px) {
                    *n += u64::from(nonzero(x));
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; c],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(counts)
}

/// Picks the `d` channels with the smallest counts; ties go to the lower index.
pub fn select_channels(counts: &[u64], d: usize) -> Result<ChannelSelection> {
    if d == 0 {
        return Err(Error::Config("d must be positive".into()));
    }
    if d > counts.len() {
        return Err(Error::Config(format!(
            "cannot select {d} channels out of {}",
            counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let mut indices = order[..d].to_vec();
    indices.sort_unstable();
    ChannelSelection::new(indices, counts.len())
}

pub fn apply_selection(fm: &FeatureMap, sel: &ChannelSelection) -> Result<FeatureMap> {
    let (h, w, c) = fm.dims();
    if c != sel.source_channels {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {c} channels, selection expects {}",
            sel.source_channels
        )));
    }
    let d = sel.len();
    let mut data = Vec::with_capacity(h * w * d);
    for px in fm.data().chunks_exact(c) {
        data.extend(sel.indices.iter().map(|&i| px[i]));
    }
    FeatureMap::new(h, w, d, data)
}
