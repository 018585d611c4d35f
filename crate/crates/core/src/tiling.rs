//! Patch grids, magnification mapping, DfB pooling, single-class labelling
//! and prediction-map stitching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distance::DfbImage;
use crate::error::{invalid, Result};
use crate::imgproc::{BinaryMask, RgbImage};

/// Diagnostic class of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    NonNeop,
    #[serde(rename = "LSIL")]
    Lsil,
    #[serde(rename = "HSIL")]
    Hsil,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::NonNeop, ClassLabel::Lsil, ClassLabel::Hsil];
    pub const COUNT: usize = 3;

    /// Index used by the classifier output and confusion matrices.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Code stored in label rasters (0 is reserved for "no label").
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        code.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::NonNeop => "NonNeop",
            ClassLabel::Lsil => "LSIL",
            ClassLabel::Hsil => "HSIL",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nonneop" | "non-neop" | "non_neop" => Ok(ClassLabel::NonNeop),
            "lsil" => Ok(ClassLabel::Lsil),
            "hsil" => Ok(ClassLabel::Hsil),
            _ => Err(invalid(format!("unknown class label {s:?}"))),
        }
    }
}

/// Label raster: 0 = no label, otherwise [`ClassLabel::code`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelImage {
    pub const NO_LABEL: u8 = 0;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!("label buffer has {} values, expected {width}x{height}", data.len())));
        }
        if let Some(bad) = data.iter().find(|&&c| c > 3) {
            return Err(invalid(format!("label code {bad} outside 0..=3")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, label: Option<ClassLabel>) -> Self {
        let code = label.map_or(Self::NO_LABEL, ClassLabel::code);
        Self { width, height, data: vec![code; width * height] }
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

    #[inline]
    pub fn code(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<ClassLabel> {
        ClassLabel::from_code(self.code(x, y))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: Option<ClassLabel>) {
        self.data[y * self.width + x] = label.map_or(Self::NO_LABEL, ClassLabel::code);
    }
}

/// Square patch, top-left corner at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn new(x: usize, y: usize, size: usize) -> Self {
        Self { x, y, size }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.size <= width && self.y + self.size <= height
    }
}

/// One patch with its pooled DfB and single-class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub wsi_id: String,
    pub rect: PatchRect,
    pub image: RgbImage,
    pub dfb_mean: f64,
    pub label: ClassLabel,
}

/// Non-padded sliding-window grid in row-major order.
pub fn tile_grid(width: usize, height: usize, patch_size: usize, stride: usize) -> Vec<PatchRect> {
    if patch_size == 0 || stride == 0 || width < patch_size || height < patch_size {
        return Vec::new();
    }
    let nx = (width - patch_size) / stride + 1;
    let ny = (height - patch_size) / stride + 1;
    let mut rects = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            rects.push(PatchRect::new(i * stride, j * stride, patch_size));
        }
    }
    rects
}

/// Maps a full-resolution rect to the low-resolution raster: floor the
/// corner, ceil the size, clamp to `(low_w, low_h)`.
pub fn map_to_lowres(rect: PatchRect, factor: usize, low_w: usize, low_h: usize) -> PatchRect {
    let factor = factor.max(1);
    let x = (rect.x / factor).min(low_w.saturating_sub(1));
    let y = (rect.y / factor).min(low_h.saturating_sub(1));
    let size = rect.size.div_ceil(factor).min(low_w - x).min(low_h - y);
    PatchRect::new(x, y, size)
}

/// Mean DfB over `rect`, summed in row-major order.
pub fn mean_dfb(dfb: &DfbImage, rect: PatchRect) -> Result<f64> {
    if rect.size == 0 {
        return Err(invalid("mean_dfb over an empty rect"));
    }
    if !rect.fits(dfb.width(), dfb.height()) {
        return Err(invalid(format!("rect {rect:?} outside {}x{} DfB image", dfb.width(), dfb.height())));
    }
    let mut sum = 0.0f64;
    for y in rect.y..rect.y + rect.size {
        let row = &dfb.data()[y * dfb.width() + rect.x..y * dfb.width() + rect.x + rect.size];
        sum += row.iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok(sum / (rect.size * rect.size) as f64)
}

/// The label shared by every pixel of `rect`, or `None` when the rect is
/// mixed, touches unlabelled pixels, or falls outside the image.
pub fn label_patch(gt: &LabelImage, rect: PatchRect) -> Option<ClassLabel> {
    if rect.size == 0 || !rect.fits(gt.width, gt.height) {
        return None;
    }
    let first = gt.code(rect.x, rect.y);
    let label = ClassLabel::from_code(first)?;
    for y in rect.y..rect.y + rect.size {
        let row = &gt.data[y * gt.width + rect.x..y * gt.width + rect.x + rect.size];
        if row.iter().any(|&c| c != first) {
            return None;
        }
    }
    Some(label)
}

/// Paints each rect with its predicted class, then clears every pixel that
/// is background in `tissue` or unlabelled in `gt_nolabel`.
///
/// The output is `factor` times the size of `tissue`; `rects` are in output
/// coordinates and `gt_nolabel`, when given, has the dimensions of `tissue`.
pub fn stitch_prediction_map(
    rects: &[PatchRect],
    preds: &[ClassLabel],
    tissue: &BinaryMask,
    factor: usize,
    gt_nolabel: Option<&LabelImage>,
) -> Result<LabelImage> {
    if rects.len() != preds.len() {
        return Err(invalid(format!("{} rects but {} predictions", rects.len(), preds.len())));
    }
    if factor == 0 {
        return Err(invalid("stitch factor must be >= 1"));
    }
    if let Some(gt) = gt_nolabel {
        if gt.width != tissue.width() || gt.height != tissue.height() {
            return Err(invalid("no-label image must match the tissue mask dimensions"));
        }
    }
    let (w, h) = (tissue.width() * factor, tissue.height() * factor);
    let mut out = LabelImage::filled(w, h, None);
    for (rect, &pred) in rects.iter().zip(preds) {
        if !rect.fits(w, h) {
            return Err(invalid(format!("rect {rect:?} outside {w}x{h} prediction map")));
        }
        for y in rect.y..rect.y + rect.size {
            out.data[y * w + rect.x..y * w + rect.x + rect.size].fill(pred.code());
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (lx, ly) = (x / factor, y / factor);
            let masked = !tissue.get(lx, ly) || gt_nolabel.is_some_and(|gt| gt.code(lx, ly) == LabelImage::NO_LABEL);
            if masked {
                out.data[y * w + x] = LabelImage::NO_LABEL;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn grid_examples() {
        assert_eq!(tile_grid(512, 512, 256, 256).len(), 4);
        assert!(tile_grid(255, 255, 256, 256).is_empty());
        let r = tile_grid(600, 300, 256, 256);
        assert_eq!(r, vec![PatchRect::new(0, 0, 256), PatchRect::new(256, 0, 256)]);
    }

    #[test]
    fn lowres_mapping() {
        let m = |x, y, s, f| map_to_lowres(PatchRect::new(x, y, s), f, 1000, 1000);
        assert_eq!(m(256, 512, 256, 16), PatchRect::new(16, 32, 16));
        assert_eq!(m(8, 8, 256, 16), PatchRect::new(0, 0, 16));
        assert_eq!(m(40, 72, 30, 1), PatchRect::new(40, 72, 30));
        // clamped at the right edge of a 20-wide low-res raster
        assert_eq!(map_to_lowres(PatchRect::new(300, 0, 64), 16, 20, 20), PatchRect::new(18, 0, 2));
    }

    #[test]
    fn dfb_means() {
        let d = DfbImage::new(4, 4, vec![10.0; 16]).unwrap();
        assert_eq!(mean_dfb(&d, PatchRect::new(1, 1, 2)).unwrap(), 10.0);
        let half: Vec<f32> = (0..256).map(|i| if i < 128 { 0.0 } else { 20.0 }).collect();
        let d = DfbImage::new(16, 16, half).unwrap();
        assert_eq!(mean_dfb(&d, PatchRect::new(0, 0, 16)).unwrap(), 10.0);
        assert!(mean_dfb(&d, PatchRect::new(0, 0, 0)).is_err());
        assert!(mean_dfb(&d, PatchRect::new(10, 0, 8)).is_err());
    }

    #[test]
    fn dfb_mean_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..40 * 30).map(|_| rng.gen_range(0.0..140.0)).collect();
        let d = DfbImage::new(40, 30, data.clone()).unwrap();
        for _ in 0..50 {
            let size = rng.gen_range(1..20);
            let (x, y) = (rng.gen_range(0..=40 - size), rng.gen_range(0..=30 - size));
            let mut total = 0.0;
            let mut n = 0;
            for i in 0..data.len() {
                let (px, py) = (i % 40, i / 40);
                if px >= x && px < x + size && py >= y && py < y + size {
                    total += data[i] as f64;
                    n += 1;
                }
            }
            let got = mean_dfb(&d, PatchRect::new(x, y, size)).unwrap();
            assert!((got - total / n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_rule() {
        let mut gt = LabelImage::filled(8, 8, Some(ClassLabel::Lsil));
        assert_eq!(label_patch(&gt, PatchRect::new(0, 0, 8)), Some(ClassLabel::Lsil));
        for y in 0..8 {
            for x in 0..8 {
                gt.set(x, y, Some(if x < 4 { ClassLabel::NonNeop } else { ClassLabel::Hsil }));
            }
        }
        assert_eq!(label_patch(&gt, PatchRect::new(0, 0, 8)), None);
        assert_eq!(label_patch(&gt, PatchRect::new(4, 0, 4)), Some(ClassLabel::Hsil));
        let empty = LabelImage::filled(8, 8, None);
        assert_eq!(label_patch(&empty, PatchRect::new(0, 0, 8)), None);
    }

    #[test]
    fn stitching() {
        let grid = tile_grid(4, 4, 2, 2);
        let full = BinaryMask::filled(4, 4, true);
        let uniform = stitch_prediction_map(&grid, &[ClassLabel::NonNeop; 4], &full, 1, None).unwrap();
        assert_eq!(uniform, LabelImage::filled(4, 4, Some(ClassLabel::NonNeop)));

        let none = BinaryMask::filled(4, 4, false);
        let blank = stitch_prediction_map(&grid, &[ClassLabel::Hsil; 4], &none, 1, None).unwrap();
        assert_eq!(blank, LabelImage::filled(4, 4, None));

        use ClassLabel::*;
        let quad = stitch_prediction_map(&grid, &[Lsil, Hsil, NonNeop, NonNeop], &full, 1, None).unwrap();
        assert_eq!(quad.data(), &[2, 2, 3, 3, 2, 2, 3, 3, 1, 1, 1, 1, 1, 1, 1, 1]);

        assert!(stitch_prediction_map(&grid, &[Lsil], &full, 1, None).is_err());
    }

    #[test]
    fn stitching_upscales_masks() {
        // 2x2 low-res tissue with one background pixel, output at factor 4
        let mut tissue = BinaryMask::filled(2, 2, true);
        tissue.set(1, 0, false);
        let mut gt = LabelImage::filled(2, 2, Some(ClassLabel::Lsil));
        gt.set(0, 1, None);
        let grid = tile_grid(8, 8, 4, 4);
        let map = stitch_prediction_map(&grid, &[ClassLabel::Lsil; 4], &tissue, 4, Some(&gt)).unwrap();
        assert_eq!(map.get(0, 0), Some(ClassLabel::Lsil));
        assert_eq!(map.get(5, 1), None);
        assert_eq!(map.get(1, 5), None);
        assert_eq!(map.get(7, 7), Some(ClassLabel::Lsil));
    }

    #[test]
    fn label_codes() {
        for c in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_code(c.code()), Some(c));
            assert_eq!(c.name().parse::<ClassLabel>().unwrap(), c);
        }
        assert_eq!(ClassLabel::from_code(0), None);
        assert!(LabelImage::new(1, 1, vec![4]).is_err());
    }

    proptest! {
        #[test]
        fn grid_disjoint_and_counted(w in 1usize..300, h in 1usize..300, p in 1usize..64, extra in 0usize..16) {
            let stride = p + extra;
            let rects = tile_grid(w, h, p, stride);
            let expect = if w >= p && h >= p { ((w - p) / stride + 1) * ((h - p) / stride + 1) } else { 0 };
            prop_assert_eq!(rects.len(), expect);
            let mut covered = vec![0u8; w * h];
            for r in &rects {
                prop_assert!(r.fits(w, h));
                for y in r.y..r.y + r.size {
                    for x in r.x..r.x + r.size {
                        covered[y * w + x] += 1;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c <= 1));
            prop_assert_eq!(covered.iter().map(|&c| c as usize).sum::<usize>(), expect * p * p);
        }

        #[test]
        fn labelled_patch_is_uniform(seed in any::<u64>(), size in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // blocky labels so single-class rects are common
            let data: Vec<u8> = (0..16 * 16).map(|i| {
                let (x, y) = (i % 16, i / 16);
                ((x / 4 + y / 4 + (seed as usize % 3)) % 4) as u8
            }).collect();
            let gt = LabelImage::new(16, 16, data).unwrap();
            let (x, y) = (rng.gen_range(0..=16 - size), rng.gen_range(0..=16 - size));
            let rect = PatchRect::new(x, y, size);
            if let Some(l) = label_patch(&gt, rect) {
                for yy in y..y + size {
                    for xx in x..x + size {
                        prop_assert_eq!(gt.get(xx, yy), Some(l));
                    }
                }
            }
        }

        #[test]
        fn mean_dfb_recombines(seed in any::<u64>(), size in 2usize..16) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0.0..100.0)).collect();
            let d = DfbImage::new(32, 32, data).unwrap();
            let half = size / 2;
            let (x, y) = (rng.gen_range(0..=32 - size), rng.gen_range(0..=32 - size));
            let whole = mean_dfb(&d, PatchRect::new(x, y, size)).unwrap();
            // split into four quadrant-shaped pieces via smaller square sub-rects
            prop_assume!(size % 2 == 0);
            let parts: f64 = [(0, 0), (half, 0), (0, half), (half, half)]
                .iter()
                .map(|&(dx, dy)| mean_dfb(&d, PatchRect::new(x + dx, y + dy, half)).unwrap())
                .sum::<f64>() / 4.0;
            prop_assert!((whole - parts).abs() < 1e-9);
        }

        #[test]
        fn stitch_round_trip(seed in any::<u64>()) {
            // block-constant GT so every 4x4 tile is single-class
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let blocks: Vec<u8> = (0..9).map(|_| rng.gen_range(1..=3)).collect();
            let data: Vec<u8> = (0..14 * 13).map(|i| {
                let (x, y) = (i % 14, i / 14);
                blocks[((y / 4).min(2)) * 3 + (x / 4).min(2)]
            }).collect();
            let gt = LabelImage::new(14, 13, data).unwrap();
            let grid = tile_grid(14, 13, 4, 4);
            let preds: Vec<ClassLabel> = grid.iter().map(|r| label_patch(&gt, *r).unwrap()).collect();
            let map = stitch_prediction_map(&grid, &preds, &BinaryMask::filled(14, 13, true), 1, None).unwrap();
            for r in &grid {
                for y in r.y..r.y + r.size {
                    for x in r.x..r.x + r.size {
                        prop_assert_eq!(map.code(x, y), gt.code(x, y));
                    }
                }
            }
        }
    }
}
