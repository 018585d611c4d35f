//! Tissue segmentation at low magnification: colour conversion, box
//! downscaling, HSV thresholding and binary morphology.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be at least 1x1"));
        }
        if data.len() != width * height * 3 {
            return Err(invalid(format!("RGB buffer has {} bytes, expected {}x{}x3", data.len(), width, height)));
        }
        Ok(Self { width, height, data })
    }

    /// An image filled with one colour.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copies the `w`×`h` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(invalid(format!("crop {w}x{h} at ({x},{y}) outside {}x{} image", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage::new(w, h, data)
    }
}

/// Row-major boolean raster, `true` marks tissue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!("mask buffer has {} entries, expected {}x{}", data.len(), width, height)));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Intersection over union of the foreground sets. Two empty masks give 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(invalid("iou of masks with different dimensions"));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Foreground selection rule in HSV space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvThresholds {
    /// Minimum saturation in `[0, 1]`.
    pub sat_min: f64,
    /// Maximum value (brightness) in `[0, 1]`.
    pub val_max: f64,
    /// Optional hue interval in degrees. `lo > hi` wraps through 0°.
    #[serde(default)]
    pub hue_range: Option<(f64, f64)>,
}

impl Default for HsvThresholds {
    fn default() -> Self {
        Self { sat_min: 0.07, val_max: 0.95, hue_range: None }
    }
}

impl HsvThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sat_min) || !(0.0..=1.0).contains(&self.val_max) {
            return Err(invalid("sat_min and val_max must lie in [0, 1]"));
        }
        if let Some((lo, hi)) = self.hue_range {
            if !(0.0..360.0).contains(&lo) || !(0.0..=360.0).contains(&hi) {
                return Err(invalid("hue_range bounds must lie in [0, 360)"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn accepts(&self, (h, s, v): (f64, f64, f64)) -> bool {
        if s < self.sat_min || v > self.val_max {
            return false;
        }
        match self.hue_range {
            None => true,
            Some((lo, hi)) if lo <= hi => h >= lo && h <= hi,
            Some((lo, hi)) => h >= lo || h <= hi,
        }
    }
}

/// Hexcone RGB→HSV. Hue in degrees `[0, 360)`, 0 for greys.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max / 255.0;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to the nearest 8-bit level.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Box-filter downscale by an integer factor. Partial trailing blocks are
/// dropped; block means round half up.
pub fn downscale(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    if factor == 0 {
        return Err(invalid("downscale factor must be >= 1"));
    }
    if img.width < factor || img.height < factor {
        return Err(invalid(format!("{}x{} image is smaller than downscale factor {factor}", img.width, img.height)));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let n = (factor * factor) as u64;
    let mut sums = vec![0u64; ow * 3];
    let mut out = Vec::with_capacity(ow * oh * 3);
    for oy in 0..oh {
        sums.iter_mut().for_each(|s| *s = 0);
        for y in oy * factor..(oy + 1) * factor {
            let row = &img.data[y * img.width * 3..(y * img.width + ow * factor) * 3];
            for (x, px) in row.chunks_exact(3).enumerate() {
                let o = (x / factor) * 3;
                sums[o] += px[0] as u64;
                sums[o + 1] += px[1] as u64;
                sums[o + 2] += px[2] as u64;
            }
        }
        out.extend(sums.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8));
    }
    RgbImage::new(ow, oh, out)
}

/// Marks pixels whose HSV coordinates pass `t` as tissue.
pub fn threshold_tissue(img: &RgbImage, t: &HsvThresholds) -> BinaryMask {
    let data = img.pixels().map(|px| t.accepts(rgb_to_hsv(px))).collect();
    BinaryMask { width: img.width, height: img.height, data }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected components of pixels equal to `value`. Returns per-pixel
/// component ids (`u32::MAX` for other pixels), component sizes, and
/// whether each component touches the image border.
pub fn label_components(mask: &BinaryMask, value: bool, conn: Connectivity) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![u32::MAX; w * h];
    let mut sizes = Vec::new();
    let mut touches = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    };
    for start in 0..w * h {
        if mask.data[start] != value || labels[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let (mut size, mut border) = (0usize, false);
        labels[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            if x == 0 || y == 0 || x as usize == w - 1 || y as usize == h - 1 {
                border = true;
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.data[q] == value && labels[q] == u32::MAX {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
        touches.push(border);
    }
    (labels, sizes, touches)
}

/// Clears 8-connected foreground components smaller than `min_area`.
pub fn remove_small_objects(mask: &BinaryMask, min_area: usize) -> BinaryMask {
    if min_area == 0 {
        return mask.clone();
    }
    let (labels, sizes, _) = label_components(mask, true, Connectivity::Eight);
    let data = labels.iter().map(|&l| l != u32::MAX && sizes[l as usize] >= min_area).collect();
    BinaryMask { width: mask.width, height: mask.height, data }
}

/// Fills 4-connected background components that do not touch the border
/// and have at most `max_hole_area` pixels.
pub fn fill_small_holes(mask: &BinaryMask, max_hole_area: usize) -> BinaryMask {
    if max_hole_area == 0 {
        return mask.clone();
    }
    let (labels, sizes, border) = label_components(mask, false, Connectivity::Four);
    let data = mask
        .data
        .iter()
        .zip(&labels)
        .map(|(&fg, &l)| fg || (!border[l as usize] && sizes[l as usize] <= max_hole_area))
        .collect();
    BinaryMask { width: mask.width, height: mask.height, data }
}

/// Parameters of the full tissue-mask pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueMaskParams {
    pub thresholds: HsvThresholds,
    /// Components below this many low-res pixels are dropped.
    pub min_area: usize,
    /// Enclosed holes up to this many low-res pixels are filled.
    pub max_hole_area: usize,
}

impl Default for TissueMaskParams {
    fn default() -> Self {
        Self { thresholds: HsvThresholds::default(), min_area: 64, max_hole_area: 256 }
    }
}

/// downscale → threshold → remove small objects → fill small holes.
pub fn tissue_mask(img: &RgbImage, factor: usize, params: &TissueMaskParams) -> Result<BinaryMask> {
    params.thresholds.validate()?;
    let small = downscale(img, factor)?;
    let raw = threshold_tissue(&small, &params.thresholds);
    let cleaned = remove_small_objects(&raw, params.min_area);
    Ok(fill_small_holes(&cleaned, params.max_hole_area))
}
