//! Distance from the tissue boundary.
//!
//! Every tissue pixel gets the distance to the nearest background pixel,
//! measured in low-resolution pixels. Background pixels are 0. Pixels
//! outside the raster count as background unless
//! [`DistanceOptions::border_is_tissue`] is set.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgproc::BinaryMask;

/// Axial and diagonal step costs of the chamfer metric, in thirds of a pixel.
const AXIAL: u32 = 3;
const DIAGONAL: u32 = 4;
const UNREACHED: u32 = u32::MAX / 2;

/// Per-pixel distance raster. Zero exactly on background.
#[derive(Clone, Debug, PartialEq)]
pub struct DfbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DfbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!("distance buffer has {} values, expected {width}x{height}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("distances must be finite and non-negative"));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Largest distance in the image, 0 when there is no tissue.
    pub fn max(&self) -> f32 {
        max_dfb(self)
    }
}

pub fn max_dfb(dfb: &DfbImage) -> f32 {
    dfb.data.iter().copied().fold(0.0, f32::max)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    /// Treat pixels outside the raster as tissue instead of background.
    #[serde(default)]
    pub border_is_tissue: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Two-pass (3,4) chamfer transform divided by 3.
    #[default]
    Chamfer,
    /// Exact Euclidean transform.
    Exact,
}

pub fn distance_transform(mask: &BinaryMask, mode: DistanceMode, opts: DistanceOptions) -> Result<DfbImage> {
    match mode {
        DistanceMode::Chamfer => distance_transform_chamfer(mask, opts),
        DistanceMode::Exact => distance_transform_exact(mask, opts),
    }
}

fn check_mask(mask: &BinaryMask, opts: DistanceOptions) -> Result<()> {
    if mask.width() == 0 || mask.height() == 0 {
        return Err(invalid("distance transform of an empty mask"));
    }
    if opts.border_is_tissue && mask.data().iter().all(|&v| v) {
        return Err(Error::BoundaryUndefined);
    }
    Ok(())
}

/// Borgefors (3,4) chamfer transform in two raster passes.
///
/// The raster is padded by one pixel whose value encodes the border
/// convention, so the passes never branch on bounds.
pub fn distance_transform_chamfer(mask: &BinaryMask, opts: DistanceOptions) -> Result<DfbImage> {
    check_mask(mask, opts)?;
    let (w, h) = (mask.width(), mask.height());
    let pw = w + 2;
    let border = if opts.border_is_tissue { UNREACHED } else { 0 };
    let mut d = vec![border; pw * (h + 2)];
    for y in 0..h {
        for x in 0..w {
            d[(y + 1) * pw + x + 1] = if mask.get(x, y) { UNREACHED } else { 0 };
        }
    }

    // forward: neighbours above and to the left
    for y in 1..=h {
        for x in 1..=w {
            let i = y * pw + x;
            if d[i] == 0 {
                continue;
            }
            let best =
                (d[i - pw - 1] + DIAGONAL).min(d[i - pw] + AXIAL).min(d[i - pw + 1] + DIAGONAL).min(d[i - 1] + AXIAL);
            d[i] = d[i].min(best);
        }
    }
    // backward: neighbours below and to the right
    for y in (1..=h).rev() {
        for x in (1..=w).rev() {
            let i = y * pw + x;
            if d[i] == 0 {
                continue;
            }
            let best =
                (d[i + pw + 1] + DIAGONAL).min(d[i + pw] + AXIAL).min(d[i + pw - 1] + DIAGONAL).min(d[i + 1] + AXIAL);
            d[i] = d[i].min(best);
        }
    }

    let mut data = Vec::with_capacity(w * h);
    for y in 1..=h {
        for x in 1..=w {
            data.push(d[y * pw + x] as f32 / AXIAL as f32);
        }
    }
    Ok(DfbImage { width: w, height: h, data })
}

/// Exact Euclidean distance transform (separable lower-envelope algorithm of
/// Felzenszwalb and Huttenlocher). Squared distances are integers held
/// exactly in `f64`, so the result is the correctly rounded square root.
pub fn distance_transform_exact(mask: &BinaryMask, opts: DistanceOptions) -> Result<DfbImage> {
    check_mask(mask, opts)?;
    let (w, h) = (mask.width(), mask.height());
    // with a background border the padding ring holds the nearest
    // out-of-bounds pixels; with a tissue border there is no ring.
    let pad = usize::from(!opts.border_is_tissue);
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut f = vec![0.0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                f[(y + pad) * pw + x + pad] = f64::INFINITY;
            }
        }
    }

    let mut scratch = EnvelopeScratch::new(pw.max(ph));
    let mut line = vec![0.0; pw.max(ph)];
    for x in 0..pw {
        for y in 0..ph {
            line[y] = f[y * pw + x];
        }
        scratch.transform(&mut line[..ph]);
        for y in 0..ph {
            f[y * pw + x] = line[y];
        }
    }
    for y in 0..ph {
        scratch.transform(&mut f[y * pw..(y + 1) * pw]);
    }

    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(f[(y + pad) * pw + x + pad].sqrt() as f32);
        }
    }
    Ok(DfbImage { width: w, height: h, data })
}

struct EnvelopeScratch {
    out: Vec<f64>,
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        Self { out: vec![0.0; n], vertices: vec![0; n], bounds: vec![0.0; n + 1] }
    }

    /// In-place 1D squared distance transform of a sampled function.
    fn transform(&mut self, f: &mut [f64]) {
        let n = f.len();
        let first = match f.iter().position(|v| v.is_finite()) {
            Some(i) => i,
            None => return,
        };
        let (v, z) = (&mut self.vertices, &mut self.bounds);
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if !f[q].is_finite() {
                continue;
            }
            let qf = q as f64;
            let mut s;
            loop {
                let pf = v[k] as f64;
                s = ((f[q] + qf * qf) - (f[v[k]] + pf * pf)) / (2.0 * (qf - pf));
                // z[0] is -inf, so this stops at k == 0
                if s > z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0usize;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            self.out[q] = d * d + f[v[k]];
        }
        f.copy_from_slice(&self.out[..n]);
    }
}
