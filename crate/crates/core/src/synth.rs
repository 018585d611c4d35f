//! Synthetic slides with a boundary-biased lesion prior.
//!
//! Each slide is a smooth star-shaped tissue blob on a white background.
//! LSIL and HSIL regions grow from seeds on the tissue boundary and are
//! confined to a band of DfB ≤ `lesion_band`; the rest of the tissue is
//! non-neoplastic. Some interior non-neoplastic regions are rendered with
//! the LSIL texture, so appearance alone cannot separate the two classes
//! and the distance prior carries real information.
//!
//! Labels and the tissue mask are produced at low resolution (full
//! resolution divided by `factor`); the RGB image is full resolution.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{distance_transform_chamfer, DfbImage, DistanceOptions};
use crate::error::{invalid, Error, Result};
use crate::imgproc::{BinaryMask, RgbImage};
use crate::tiling::{ClassLabel, LabelImage};

/// Appearance of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub base: [u8; 3],
    /// Half-width of the uniform per-pixel noise, in 8-bit levels.
    pub noise: f64,
    /// Expected nuclei per full-resolution pixel.
    pub nucleus_density: f64,
    /// Nucleus radius in full-resolution pixels.
    pub nucleus_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Full-resolution size.
    pub width: usize,
    pub height: usize,
    /// Full-resolution pixels per low-resolution pixel.
    pub factor: usize,
    /// Mean blob radius as a fraction of half the shorter low-res side.
    pub blob_radius: f64,
    /// Amplitudes of the radial harmonics 2, 3, … that shape the blob.
    pub blob_harmonics: Vec<f64>,
    /// Lesions only where DfB ≤ this (low-res pixels).
    pub lesion_band: f64,
    pub lesion_seeds: usize,
    /// Low-res radius of each lesion around its boundary seed.
    pub lesion_radius: f64,
    /// Probability that a lesion seed is HSIL rather than LSIL.
    pub hsil_fraction: f64,
    /// Interior non-neoplastic regions drawn with the LSIL texture.
    pub mimic_regions: usize,
    pub mimic_radius: f64,
    /// Unannotated tissue disks.
    pub unlabeled_regions: usize,
    pub unlabeled_radius: f64,
    /// Tiny tissue fragments outside the blob.
    pub debris: usize,
    /// Small unstained holes inside the tissue.
    pub holes: usize,
    /// Per-slide colour shift half-width, in 8-bit levels.
    pub stain_jitter: f64,
    /// Textures indexed by [`ClassLabel::index`].
    pub textures: [ClassTexture; 3],
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            factor: 4,
            blob_radius: 0.66,
            blob_harmonics: vec![0.10, 0.06, 0.04, 0.03],
            lesion_band: 32.0,
            lesion_seeds: 5,
            lesion_radius: 48.0,
            hsil_fraction: 0.4,
            mimic_regions: 2,
            mimic_radius: 22.0,
            unlabeled_regions: 1,
            unlabeled_radius: 8.0,
            debris: 5,
            holes: 3,
            stain_jitter: 12.0,
            textures: [
                ClassTexture { base: [226, 158, 194], noise: 12.0, nucleus_density: 0.0025, nucleus_radius: 2.5 },
                ClassTexture { base: [208, 140, 188], noise: 12.0, nucleus_density: 0.0060, nucleus_radius: 3.0 },
                ClassTexture { base: [172, 102, 172], noise: 12.0, nucleus_density: 0.0110, nucleus_radius: 3.5 },
            ],
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn low_dims(&self) -> (usize, usize) {
        (self.width / self.factor.max(1), self.height / self.factor.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let (lw, lh) = self.low_dims();
        if self.factor == 0 || lw < 32 || lh < 32 {
            return Err(invalid("synthetic slides need factor >= 1 and at least 32x32 low-res pixels"));
        }
        if !(self.lesion_band >= 0.0) || !(0.0..=1.0).contains(&self.hsil_fraction) {
            return Err(invalid("lesion_band must be >= 0 and hsil_fraction in [0, 1]"));
        }
        if !(self.blob_radius > 0.0) || self.blob_harmonics.iter().any(|a| !a.is_finite()) {
            return Err(invalid("blob_radius must be positive"));
        }
        let distinct = (0..3).all(|i| (i + 1..3).all(|j| self.textures[i] != self.textures[j]));
        if !distinct {
            return Err(invalid("class textures must be pairwise distinct"));
        }
        Ok(())
    }
}

/// One generated slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSlide {
    pub image: RgbImage,
    /// Ground truth at low resolution.
    pub labels: LabelImage,
    /// The generator's own tissue mask at low resolution (holes filled,
    /// debris excluded).
    pub mask: BinaryMask,
    /// Chamfer DfB of `mask`.
    pub dfb: DfbImage,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn radius_at(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, &(a, phase))| a * ((i as f64 + 2.0) * theta + phase).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    /// Signed radial margin of a low-res point: positive inside.
    fn margin(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        self.radius_at(dy.atan2(dx)) - dx.hypot(dy)
    }
}

fn disk(cx: f64, cy: f64, r: f64, w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                f(x, y);
            }
        }
    }
}

pub fn generate_wsi(p: &SynthParams) -> Result<SyntheticSlide> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (lw, lh) = p.low_dims();
    let f = p.factor;
    let half = lw.min(lh) as f64 / 2.0;

    let blob = Blob {
        cx: lw as f64 / 2.0 + rng.gen_range(-0.06..0.06) * half,
        cy: lh as f64 / 2.0 + rng.gen_range(-0.06..0.06) * half,
        radius: p.blob_radius * half * rng.gen_range(0.9..1.05),
        harmonics: p.blob_harmonics.iter().map(|&a| (a * rng.gen_range(0.5..1.0), rng.gen_range(0.0..TAU))).collect(),
    };
    let mask = BinaryMask::from_fn(lw, lh, |x, y| blob.margin(x as f64 + 0.5, y as f64 + 0.5) > 0.0);
    if mask.count_foreground() == 0 {
        return Err(Error::GenerationFailed("tissue blob is empty".into()));
    }
    if mask.count_foreground() == lw * lh {
        return Err(Error::GenerationFailed("tissue blob fills the whole slide".into()));
    }
    let dfb = distance_transform_chamfer(&mask, DistanceOptions::default())?;

    // ground truth
    let mut labels = LabelImage::filled(lw, lh, None);
    for y in 0..lh {
        for x in 0..lw {
            if mask.get(x, y) {
                labels.set(x, y, Some(ClassLabel::NonNeop));
            }
        }
    }
    let boundary: Vec<(usize, usize)> =
        (0..lw * lh).filter(|&i| mask.data()[i] && dfb.data()[i] <= 1.0).map(|i| (i % lw, i / lw)).collect();
    for _ in 0..p.lesion_seeds {
        let (sx, sy) = boundary[rng.gen_range(0..boundary.len())];
        let class = if rng.gen_bool(p.hsil_fraction) { ClassLabel::Hsil } else { ClassLabel::Lsil };
        let r = p.lesion_radius * rng.gen_range(0.7..1.3);
        disk(sx as f64 + 0.5, sy as f64 + 0.5, r, lw, lh, |x, y| {
            if mask.get(x, y) && f64::from(dfb.get(x, y)) <= p.lesion_band {
                labels.set(x, y, Some(class));
            }
        });
    }

    // appearance starts as the label; mimic regions look like LSIL
    let mut appearance: Vec<usize> =
        (0..lw * lh).map(|i| ClassLabel::from_code(labels.data()[i]).map_or(0, ClassLabel::index)).collect();
    let interior: Vec<(usize, usize)> = (0..lw * lh)
        .filter(|&i| f64::from(dfb.data()[i]) > p.lesion_band + p.mimic_radius * 0.5)
        .map(|i| (i % lw, i / lw))
        .collect();
    if !interior.is_empty() {
        for _ in 0..p.mimic_regions {
            let (sx, sy) = interior[rng.gen_range(0..interior.len())];
            let r = p.mimic_radius * rng.gen_range(0.8..1.2);
            disk(sx as f64 + 0.5, sy as f64 + 0.5, r, lw, lh, |x, y| {
                if f64::from(dfb.get(x, y)) > p.lesion_band && labels.get(x, y) == Some(ClassLabel::NonNeop) {
                    appearance[y * lw + x] = ClassLabel::Lsil.index();
                }
            });
        }
    }
    let tissue_px: Vec<(usize, usize)> = (0..lw * lh).filter(|&i| mask.data()[i]).map(|i| (i % lw, i / lw)).collect();
    for _ in 0..p.unlabeled_regions {
        let (sx, sy) = tissue_px[rng.gen_range(0..tissue_px.len())];
        disk(sx as f64 + 0.5, sy as f64 + 0.5, p.unlabeled_radius, lw, lh, |x, y| labels.set(x, y, None));
    }

    // render
    let tex = &p.textures;
    let stain: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-p.stain_jitter..=p.stain_jitter));
    let (w, h) = (lw * f, lh * f);
    let mut image = RgbImage::filled(w, h, [0, 0, 0])?;
    let mut tissue_full = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = ((x as f64 + 0.5) / f as f64, (y as f64 + 0.5) / f as f64);
            let inside = blob.margin(fx, fy) > 0.0;
            tissue_full[y * w + x] = inside;
            let px = if inside {
                let t = &tex[appearance[(y / f) * lw + x / f]];
                std::array::from_fn(|c| {
                    let v = t.base[c] as f64 + stain[c] + rng.gen_range(-t.noise..=t.noise);
                    v.round().clamp(0.0, 242.0) as u8
                })
            } else {
                background(&mut rng)
            };
            image.set_pixel(x, y, px);
        }
    }

    // nuclei: thinned uniform candidates, acceptance by local texture density
    let max_density = tex.iter().map(|t| t.nucleus_density).fold(0.0, f64::max);
    let candidates = (max_density * (w * h) as f64) as usize;
    for _ in 0..candidates {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let keep: f64 = rng.gen();
        if !tissue_full[y * w + x] {
            continue;
        }
        let t = &tex[appearance[(y / f) * lw + x / f]];
        if keep * max_density >= t.nucleus_density {
            continue;
        }
        let r = t.nucleus_radius * rng.gen_range(0.75..1.25);
        let shade: f64 = rng.gen_range(-10.0..10.0);
        disk(x as f64 + 0.5, y as f64 + 0.5, r, w, h, |nx, ny| {
            if tissue_full[ny * w + nx] {
                let px = [(96.0 + shade + stain[0]), (52.0 + shade + stain[1]), (128.0 + shade + stain[2])];
                image.set_pixel(nx, ny, px.map(|v| v.round().clamp(0.0, 242.0) as u8));
            }
        });
    }

    // unstained holes inside the tissue (the reference mask keeps them filled)
    let deep: Vec<(usize, usize)> = (0..lw * lh).filter(|&i| dfb.data()[i] > 12.0).map(|i| (i % lw, i / lw)).collect();
    if !deep.is_empty() {
        for _ in 0..p.holes {
            let (sx, sy) = deep[rng.gen_range(0..deep.len())];
            let r = rng.gen_range(2.0..5.0) * f as f64;
            let (cx, cy) = ((sx as f64 + 0.5) * f as f64, (sy as f64 + 0.5) * f as f64);
            let mut fill = Vec::new();
            disk(cx, cy, r, w, h, |x, y| fill.push((x, y)));
            for (x, y) in fill {
                let bg = background(&mut rng);
                image.set_pixel(x, y, bg);
            }
        }
    }

    // debris well outside the blob
    for _ in 0..p.debris {
        for _attempt in 0..50 {
            let (dx, dy) = (rng.gen_range(2.0..lw as f64 - 2.0), rng.gen_range(2.0..lh as f64 - 2.0));
            if blob.margin(dx, dy) > -6.0 {
                continue;
            }
            let r = rng.gen_range(0.6..1.4) * f as f64;
            let t = tex[0];
            let mut fill = Vec::new();
            disk(dx * f as f64, dy * f as f64, r, w, h, |x, y| fill.push((x, y)));
            for (x, y) in fill {
                let px = std::array::from_fn(|c| {
                    (t.base[c] as f64 + stain[c] + rng.gen_range(-t.noise..=t.noise)).round().clamp(0.0, 242.0) as u8
                });
                image.set_pixel(x, y, px);
            }
            break;
        }
    }

    Ok(SyntheticSlide { image, labels, mask, dfb })
}

fn background(rng: &mut impl Rng) -> [u8; 3] {
    let base = rng.gen_range(240..=250u8);
    [0; 3].map(|_| base.saturating_add(rng.gen_range(0..=4)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::distance_transform_exact;
    use crate::imgproc::{tissue_mask, TissueMaskParams};

    fn small(seed: u64) -> SynthParams {
        SynthParams {
            width: 384,
            height: 384,
            lesion_band: 10.0,
            lesion_radius: 18.0,
            mimic_radius: 8.0,
            seed,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_wsi(&small(3)).unwrap(), generate_wsi(&small(3)).unwrap());
        assert_ne!(generate_wsi(&small(3)).unwrap().image, generate_wsi(&small(4)).unwrap().image);
    }

    #[test]
    fn zero_band_has_no_lesions() {
        let s = generate_wsi(&SynthParams { lesion_band: 0.0, ..small(1) }).unwrap();
        assert!(s.labels.data().iter().all(|&c| c <= ClassLabel::NonNeop.code()));
    }

    #[test]
    fn lesions_stay_in_band() {
        for seed in 0..4 {
            let p = small(seed);
            let s = generate_wsi(&p).unwrap();
            // checked with the exact transform, which never exceeds chamfer by
            // more than the chamfer error, so use the chamfer band itself
            let exact = distance_transform_exact(&s.mask, DistanceOptions::default()).unwrap();
            let mut lesion_max = 0.0f32;
            let mut nonneop_max = 0.0f32;
            let mut lesion_px = 0;
            for i in 0..s.labels.data().len() {
                match ClassLabel::from_code(s.labels.data()[i]) {
                    Some(ClassLabel::Lsil | ClassLabel::Hsil) => {
                        lesion_max = lesion_max.max(s.dfb.data()[i]);
                        assert!(exact.data()[i] <= p.lesion_band as f32 * 1.06);
                        lesion_px += 1;
                    }
                    Some(ClassLabel::NonNeop) => nonneop_max = nonneop_max.max(s.dfb.data()[i]),
                    None => {}
                }
            }
            assert!(lesion_px > 0);
            assert!(lesion_max <= p.lesion_band as f32);
            assert!(nonneop_max > p.lesion_band as f32);
        }
    }

    #[test]
    fn rendered_tissue_is_recoverable() {
        for seed in 0..3 {
            let p = small(seed);
            let s = generate_wsi(&p).unwrap();
            let m = tissue_mask(
                &s.image,
                p.factor,
                &TissueMaskParams { min_area: 16, max_hole_area: 128, ..Default::default() },
            )
            .unwrap();
            assert!(m.iou(&s.mask).unwrap() >= 0.95);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate_wsi(&SynthParams { width: 64, ..small(0) }).is_err());
        let mut same = small(0);
        same.textures[1] = same.textures[0];
        assert!(generate_wsi(&same).is_err());
        assert!(matches!(
            generate_wsi(&SynthParams { blob_radius: 1e-6, ..small(0) }),
            Err(Error::GenerationFailed(_))
        ));
    }
}
