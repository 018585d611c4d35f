//! Browser demo: generate a synthetic slide, segment it, and look at its
//! distance-from-boundary map.

use dfbpath::distance::{distance_transform, DistanceMode, DistanceOptions};
use dfbpath::imgproc::{tissue_mask, TissueMaskParams};
use dfbpath::io::colorize_labels;
use dfbpath::metrics::dfb_class_histogram;
use dfbpath::synth::{generate_wsi, SynthParams, SyntheticSlide};
use dfbpath::{BinaryMask, DfbImage, RgbImage};
use wasm_bindgen::prelude::*;

fn js_err(e: dfbpath::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|[r, g, b]| [r, g, b, 255]).collect()
}

/// Perceptually ordered ramp from dark blue to yellow.
fn ramp(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] =
        [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let x = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

fn heat(values: &[f32], mask: &BinaryMask, max: f32) -> Vec<u8> {
    let max = max.max(f32::MIN_POSITIVE);
    values
        .iter()
        .zip(mask.data())
        .flat_map(|(&v, &m)| {
            if m {
                let [r, g, b] = ramp((v / max) as f64);
                [r, g, b, 255]
            } else {
                [255, 255, 255, 255]
            }
        })
        .collect()
}

#[wasm_bindgen]
pub struct Slide {
    synth: SyntheticSlide,
    factor: usize,
    band: f64,
    mask: BinaryMask,
    exact: DfbImage,
    chamfer: DfbImage,
}

#[wasm_bindgen]
impl Slide {
    /// Renders a `size`×`size` slide and runs the tissue mask and both
    /// distance transforms on it.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, lesion_band: f64, border_is_tissue: bool) -> Result<Slide, JsError> {
        let scale = size as f64 / 1024.0;
        let defaults = SynthParams::default();
        let params = SynthParams {
            width: size,
            height: size,
            lesion_band,
            lesion_radius: defaults.lesion_radius * scale,
            mimic_radius: defaults.mimic_radius * scale,
            seed,
            ..defaults
        };
        let synth = generate_wsi(&params).map_err(js_err)?;
        let mask_params = TissueMaskParams { min_area: (64.0 * scale * scale).ceil() as usize, ..Default::default() };
        let mask = tissue_mask(&synth.image, params.factor, &mask_params).map_err(js_err)?;
        let opts = DistanceOptions { border_is_tissue };
        let exact = distance_transform(&mask, DistanceMode::Exact, opts).map_err(js_err)?;
        let chamfer = distance_transform(&mask, DistanceMode::Chamfer, opts).map_err(js_err)?;
        Ok(Slide { synth, factor: params.factor, band: lesion_band, mask, exact, chamfer })
    }

    pub fn width(&self) -> usize {
        self.synth.image.width()
    }

    pub fn height(&self) -> usize {
        self.synth.image.height()
    }

    /// Side length of the mask, label and DfB rasters.
    pub fn low_width(&self) -> usize {
        self.mask.width()
    }

    pub fn low_height(&self) -> usize {
        self.mask.height()
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.synth.image)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        rgba(&colorize_labels(&self.synth.labels))
    }

    /// DfB heat map; white outside the recovered tissue.
    pub fn dfb_rgba(&self, exact: bool) -> Vec<u8> {
        let d = if exact { &self.exact } else { &self.chamfer };
        heat(d.data(), &self.mask, self.exact.max())
    }

    /// |chamfer − exact| / exact, scaled so 10% is the top of the ramp.
    pub fn error_rgba(&self) -> Vec<u8> {
        let rel: Vec<f32> = self.relative_errors().collect();
        heat(&rel, &self.mask, 0.10)
    }

    pub fn max_dfb(&self) -> f32 {
        self.exact.max()
    }

    pub fn mask_iou(&self) -> f64 {
        self.mask.iou(&self.synth.mask).unwrap_or(0.0)
    }

    pub fn max_relative_error(&self) -> f32 {
        self.relative_errors().fold(0.0, f32::max)
    }

    pub fn mean_relative_error(&self) -> f32 {
        let (sum, n) = self
            .relative_errors()
            .zip(self.mask.data())
            .filter(|(_, &m)| m)
            .fold((0.0, 0), |(s, n), (e, _)| (s + e, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f32
        }
    }

    /// Per-class share of labelled pixels in each `bin_width` DfB bin,
    /// flattened class-major into three rows of equal length.
    pub fn histogram(&self, bin_width: f64) -> Result<Vec<f64>, JsError> {
        let records: Vec<_> = self
            .synth
            .labels
            .data()
            .iter()
            .zip(self.exact.data())
            .enumerate()
            .filter(|(i, _)| self.mask.data()[*i])
            .filter_map(|(_, (&c, &d))| dfbpath::ClassLabel::from_code(c).map(|l| (d as f64, l)))
            .collect();
        let h = dfb_class_histogram(&records, bin_width).map_err(js_err)?;
        let bins = h.per_class.iter().map(Vec::len).max().unwrap_or(0);
        Ok(h.per_class.iter().flat_map(|row| (0..bins).map(|b| row.get(b).copied().unwrap_or(0.0))).collect())
    }

    pub fn lesion_band(&self) -> f64 {
        self.band
    }
}

impl Slide {
    fn relative_errors(&self) -> impl Iterator<Item = f32> + '_ {
        self.exact.data().iter().zip(self.chamfer.data()).map(|(&e, &c)| if e > 0.0 { (c - e).abs() / e } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_slide_round_trip() {
        let s = Slide::new(3, 256, 8.0, false).unwrap_or_else(|_| panic!("slide generates"));
        let n = s.low_width() * s.low_height();
        assert_eq!(s.image_rgba().len(), 256 * 256 * 4);
        assert_eq!(s.dfb_rgba(true).len(), n * 4);
        assert!(s.mask_iou() > 0.9);
        assert!(s.max_relative_error() <= 0.10);
        let h = s.histogram(2.0).unwrap_or_else(|_| panic!("histogram"));
        assert_eq!(h.len() % 3, 0);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), [68, 1, 84]);
        assert_eq!(ramp(1.0), [253, 231, 37]);
        assert_eq!(ramp(7.0), ramp(1.0));
    }
}
