//! Compact convolutional patch classifier with three ways of seeing the
//! DfB prior:
//!
//! * [`FusionMode::Baseline`] ignores it.
//! * [`FusionMode::DfbChannel`] appends a constant fourth input channel
//!   holding the normalised mean DfB of the patch.
//! * [`FusionMode::DfbFeature`] appends the normalised mean DfB to the
//!   pooled feature vector, in front of the fully connected head.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed order, so
//! training is bit-reproducible for a given seed.

mod adam;
mod checkpoint;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{Gradients, Network};
pub(crate) use train::argmax_class;
pub use train::{evaluate, predict, train, transfer_init, EpochLog, NetworkState, TrainConfig, TrainOutcome};

use crate::error::{invalid, Result};
use crate::imgproc::RgbImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[default]
    #[serde(rename = "baseline")]
    Baseline,
    /// Method 1, "DfB+CNN".
    #[serde(rename = "dfb_cnn")]
    DfbChannel,
    /// Method 2, "DfB+FC".
    #[serde(rename = "dfb_fc")]
    DfbFeature,
}

impl FusionMode {
    pub fn input_channels(self) -> usize {
        match self {
            FusionMode::DfbChannel => 4,
            _ => 3,
        }
    }

    pub fn uses_aux(self) -> bool {
        self == FusionMode::DfbFeature
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [FusionMode::Baseline, FusionMode::DfbChannel, FusionMode::DfbFeature].get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::DfbChannel => "dfb_cnn",
            FusionMode::DfbFeature => "dfb_fc",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(FusionMode::Baseline),
            "dfb_cnn" | "method1" => Ok(FusionMode::DfbChannel),
            "dfb_fc" | "method2" => Ok(FusionMode::DfbFeature),
            _ => Err(invalid(format!("unknown fusion mode {s:?}"))),
        }
    }
}

/// One convolution block: same-padded `kernel`×`kernel` convolution with
/// the given stride, ReLU, then an optional 2×2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pool: bool) -> Self {
        Self { out_channels, kernel, stride, pool }
    }
}

/// Layer layout shared by all fusion modes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Side length of the square input tile.
    pub input_size: usize,
    pub conv: Vec<ConvSpec>,
    /// Widths of the hidden fully connected layers.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    /// 16→32→64 channels with 3×3 kernels and pooling, global average pool
    /// to 64 features, then 64→32→3.
    pub fn standard(input_size: usize) -> Self {
        Self {
            input_size,
            conv: vec![ConvSpec::new(16, 3, 1, true), ConvSpec::new(32, 3, 1, true), ConvSpec::new(64, 3, 1, true)],
            hidden: vec![32],
            classes: 3,
        }
    }

    /// A lighter stack for single-core runs: a strided 8-channel stem, then
    /// 16 and 16 channels, all pooled, with one 16-wide hidden layer.
    pub fn compact(input_size: usize) -> Self {
        Self {
            input_size,
            conv: vec![ConvSpec::new(8, 3, 2, true), ConvSpec::new(16, 3, 1, true), ConvSpec::new(16, 3, 1, true)],
            hidden: vec![16],
            classes: 3,
        }
    }

    /// Width of the pooled feature vector (before any auxiliary input).
    pub fn feature_dim(&self) -> usize {
        self.conv.last().map_or(0, |c| c.out_channels)
    }

    /// Spatial side length after each conv block.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut s = self.input_size;
        self.conv
            .iter()
            .map(|c| {
                s = conv_out_size(s, c.kernel, c.stride);
                if c.pool {
                    s /= 2;
                }
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.classes < 2 || self.conv.is_empty() {
            return Err(invalid("architecture needs an input size, conv layers and >= 2 classes"));
        }
        for c in &self.conv {
            if c.out_channels == 0 || c.kernel == 0 || c.kernel % 2 == 0 || c.stride == 0 {
                return Err(invalid(format!("bad conv block {c:?}: kernel must be odd, sizes positive")));
            }
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if self.spatial_sizes().into_iter().any(|s| s == 0) {
            return Err(invalid(format!("input size {} collapses to zero in the conv stack", self.input_size)));
        }
        Ok(())
    }
}

pub(crate) fn conv_out_size(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

/// A prepared network input: channel-major tensor plus the optional
/// auxiliary feature.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
    pub aux: Option<f64>,
}

/// Scales pixels to `[0, 1]` and attaches the normalised mean DfB the way
/// `mode` expects it.
pub fn build_input(mode: FusionMode, tile: &RgbImage, dfb_mean: f64, dfb_norm: f64) -> Result<NetInput> {
    if !(dfb_norm > 0.0) {
        return Err(invalid("dfb_norm must be positive"));
    }
    if tile.width() != tile.height() {
        return Err(invalid("network tiles must be square"));
    }
    let size = tile.width();
    let plane = size * size;
    let channels = mode.input_channels();
    let mut data = vec![0.0; channels * plane];
    for (i, px) in tile.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    let scaled = dfb_mean / dfb_norm;
    if mode == FusionMode::DfbChannel {
        data[3 * plane..].fill(scaled);
    }
    Ok(NetInput { channels, size, data, aux: mode.uses_aux().then_some(scaled) })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Categorical cross-entropy `−ln p[true]`, with `p` floored at 1e-12.
pub fn cross_entropy(probs: &[f64], true_class: usize) -> f64 {
    -probs[true_class].max(PROB_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn inputs_per_mode() {
        let tile = RgbImage::filled(4, 4, [255, 0, 51]).unwrap();
        let b = build_input(FusionMode::Baseline, &tile, 30.0, 140.0).unwrap();
        assert_eq!((b.channels, b.aux), (3, None));
        assert_eq!(b.data[0], 1.0);
        assert_abs_diff_eq!(b.data[2 * 16], 0.2, epsilon = 1e-12);

        let c = build_input(FusionMode::DfbChannel, &tile, 70.0, 140.0).unwrap();
        assert_eq!(c.channels, 4);
        assert!(c.data[48..].iter().all(|&v| v == 0.5));

        let f = build_input(FusionMode::DfbFeature, &tile, 0.0, 140.0).unwrap();
        assert_eq!((f.channels, f.aux), (3, Some(0.0)));
        assert!(build_input(FusionMode::DfbFeature, &tile, 0.0, 0.0).is_err());
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-15);
        let p = softmax(&[0.0; 3]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0), 0.0);
        assert_abs_diff_eq!(cross_entropy(&[1.0 / 3.0; 3], 2), 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy(&[0.5, 0.25, 0.25], 1), 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0, 0.0], 1), -PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn architecture_shapes() {
        let a = Architecture::standard(64);
        a.validate().unwrap();
        assert_eq!(a.spatial_sizes(), vec![32, 16, 8]);
        assert_eq!(a.feature_dim(), 64);
        assert!(Architecture::standard(4).validate().is_err());
        assert_eq!("dfb_fc".parse::<FusionMode>().unwrap(), FusionMode::DfbFeature);
    }
}
