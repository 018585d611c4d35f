//! On-disk formats: PNG rasters, DfB maps and the CSV tables exchanged
//! between pipeline stages.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, ImageFormat, Luma};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distance::DfbImage;
use crate::error::{invalid, Error, Result};
use crate::imgproc::{BinaryMask, RgbImage};
use crate::metrics::MetricsReport;
use crate::tiling::{ClassLabel, LabelImage, PatchRect};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Reads an 8-bit RGB raster from PNG or PPM.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::load_from_memory(&read_bytes(path)?)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: image::RgbImage =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("sized buffer");
    write_bytes(path, &encode_png(&buf)?)
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::load_from_memory(&read_bytes(path)?)?.into_luma8())
}

fn write_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_raw(w as u32, h as u32, data).expect("sized buffer");
    write_bytes(path, &encode_png(&buf)?)
}

/// Masks are grayscale PNGs, 0 for background and 255 for tissue.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray(path, mask.width(), mask.height(), mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect())
}

/// Any gray level ≥ 128 reads as tissue.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = read_gray(path)?;
    let (w, h) = g.dimensions();
    BinaryMask::new(w as usize, h as usize, g.into_raw().into_iter().map(|v| v >= 128).collect())
}

/// Ground-truth label images are grayscale PNGs holding the raw codes
/// 0 (no label), 1 NonNeop, 2 LSIL, 3 HSIL.
pub fn write_labels(path: &Path, labels: &LabelImage) -> Result<()> {
    write_gray(path, labels.width(), labels.height(), labels.data().to_vec())
}

pub fn read_labels(path: &Path) -> Result<LabelImage> {
    let g = read_gray(path)?;
    let (w, h) = g.dimensions();
    LabelImage::new(w as usize, h as usize, g.into_raw())
}

/// Display colours for label codes 0..=3.
pub const LABEL_COLORS: [[u8; 3]; 4] = [[255, 255, 255], [80, 170, 80], [240, 200, 40], [210, 40, 40]];

pub fn colorize_labels(labels: &LabelImage) -> RgbImage {
    let data = labels.data().iter().flat_map(|&c| LABEL_COLORS[c.min(3) as usize]).collect();
    RgbImage::new(labels.width(), labels.height(), data).expect("sized buffer")
}

/// Sidecar next to a 16-bit DfB PNG recording its scale.
pub fn dfb_sidecar_path(png: &Path) -> PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

/// Scale used by the 16-bit PNG encoding: `256 / ceil(max + 1)`.
pub fn dfb_png_scale(dfb: &DfbImage) -> f64 {
    256.0 / (dfb.max() as f64 + 1.0).ceil()
}

/// Writes a DfB map as a 16-bit PNG of `round(value * scale)` and a text
/// sidecar with the scale.
pub fn write_dfb_png(path: &Path, dfb: &DfbImage) -> Result<()> {
    let scale = dfb_png_scale(dfb);
    let data: Vec<u16> = dfb.data().iter().map(|&v| (v as f64 * scale).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(dfb.width() as u32, dfb.height() as u32, data).expect("sized buffer");
    write_bytes(path, &encode_png(&buf)?)?;
    let header = format!("scale {scale}\nmax {}\nwidth {}\nheight {}\n", dfb.max(), dfb.width(), dfb.height());
    write_bytes(&dfb_sidecar_path(path), header.as_bytes())
}

/// Reads a 16-bit DfB PNG back, dividing by the sidecar scale. Lossy; use
/// the raw format for exact values.
pub fn read_dfb_png(path: &Path) -> Result<DfbImage> {
    let side = dfb_sidecar_path(path);
    let text = String::from_utf8_lossy(&read_bytes(&side)?).into_owned();
    let scale: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("scale "))
        .and_then(|v| v.trim().parse().ok())
        .filter(|s: &f64| *s > 0.0)
        .ok_or_else(|| Error::Format {
            what: "DfB sidecar",
            detail: format!("no positive scale in {}", side.display()),
        })?;
    let img = image::load_from_memory(&read_bytes(path)?)?.into_luma16();
    let (w, h) = img.dimensions();
    DfbImage::new(w as usize, h as usize, img.into_raw().into_iter().map(|v| (v as f64 / scale) as f32).collect())
}

pub const DFB_RAW_MAGIC: &[u8; 8] = b"DFBRAW32";

/// Lossless DfB export: 8-byte magic, u32 width, u32 height (little
/// endian), then row-major f32 values.
pub fn dfb_raw_bytes(dfb: &DfbImage) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + dfb.data().len() * 4);
    b.extend_from_slice(DFB_RAW_MAGIC);
    b.extend_from_slice(&(dfb.width() as u32).to_le_bytes());
    b.extend_from_slice(&(dfb.height() as u32).to_le_bytes());
    dfb.data().iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    b
}

pub fn dfb_from_raw_bytes(b: &[u8]) -> Result<DfbImage> {
    let bad = |d: &str| Error::Format { what: "raw DfB", detail: d.into() };
    if b.len() < 16 || &b[..8] != DFB_RAW_MAGIC {
        return Err(bad("bad magic"));
    }
    let w = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
    if w.checked_mul(h).and_then(|n| n.checked_mul(4)) != Some(b.len() - 16) {
        return Err(bad("length does not match header"));
    }
    DfbImage::new(w, h, b[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_dfb_raw(path: &Path, dfb: &DfbImage) -> Result<()> {
    write_bytes(path, &dfb_raw_bytes(dfb))
}

pub fn read_dfb_raw(path: &Path) -> Result<DfbImage> {
    dfb_from_raw_bytes(&read_bytes(path)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io { path: path.into(), source: e.into_error() })?;
    write_bytes(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    csv::Reader::from_reader(bytes.as_slice()).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

/// One row of a patch manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub wsi_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub dfb_mean: f64,
    pub label: ClassLabel,
}

impl PatchRow {
    pub fn rect(&self) -> PatchRect {
        PatchRect::new(self.x, self.y, self.size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRow {
    pub wsi_id: String,
    pub fold: usize,
    pub role: crate::dataset::Role,
}

/// The predictions exchange format shared by training, evaluation and
/// analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub wsi_id: String,
    pub x: usize,
    pub y: usize,
    pub true_label: ClassLabel,
    pub pred_label: ClassLabel,
    pub dfb_mean: f64,
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    #[serde(rename = "Acc.")]
    pub accuracy: f64,
    #[serde(rename = "mRecall")]
    pub m_recall: f64,
    #[serde(rename = "mPrec.")]
    pub m_precision: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "mIoU")]
    pub m_iou: f64,
}

impl MetricsRow {
    pub fn new(method: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            method: method.into(),
            accuracy: r.accuracy,
            m_recall: r.m_recall,
            m_precision: r.m_precision,
            f1: r.f1,
            m_iou: r.m_iou,
        }
    }
}

/// A slide on disk. Paths are relative to the manifest's directory; ground
/// truth and reference mask are optional.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideRow {
    pub wsi_id: String,
    pub image: String,
    pub gt: Option<String>,
    pub mask: Option<String>,
    pub factor: usize,
}

pub const SLIDE_MANIFEST: &str = "slides.csv";

/// Writes `<dir>/<id>/{image,gt,mask}.png` and returns the manifest row.
pub fn write_slide(
    dir: &Path,
    wsi_id: &str,
    image: &RgbImage,
    gt: &LabelImage,
    mask: &BinaryMask,
    factor: usize,
) -> Result<SlideRow> {
    let row = SlideRow {
        wsi_id: wsi_id.into(),
        image: format!("{wsi_id}/image.png"),
        gt: Some(format!("{wsi_id}/gt.png")),
        mask: Some(format!("{wsi_id}/mask.png")),
        factor,
    };
    write_rgb(&dir.join(&row.image), image)?;
    write_labels(&dir.join(row.gt.as_ref().unwrap()), gt)?;
    write_mask(&dir.join(row.mask.as_ref().unwrap()), mask)?;
    Ok(row)
}

impl SlideRow {
    pub fn read_image(&self, dir: &Path) -> Result<RgbImage> {
        read_rgb(&dir.join(&self.image))
    }

    /// Ground truth, checked to be the image size divided by `factor`.
    pub fn read_gt(&self, dir: &Path, image: &RgbImage) -> Result<Option<LabelImage>> {
        let Some(p) = &self.gt else { return Ok(None) };
        let gt = read_labels(&dir.join(p))?;
        if self.factor == 0 || gt.width() != image.width() / self.factor || gt.height() != image.height() / self.factor
        {
            return Err(invalid(format!("slide {}: ground truth is not image size / factor", self.wsi_id)));
        }
        Ok(Some(gt))
    }

    pub fn read_mask(&self, dir: &Path) -> Result<Option<BinaryMask>> {
        self.mask.as_ref().map(|p| read_mask(&dir.join(p))).transpose()
    }
}

/// `tiles/<wsi_id>/<x>_<y>.png` under `root`.
pub fn tile_path(root: &Path, wsi_id: &str, rect: PatchRect) -> PathBuf {
    root.join("tiles").join(wsi_id).join(format!("{}_{}.png", rect.x, rect.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Role;
    use crate::distance::{distance_transform_chamfer, DistanceOptions};

    #[test]
    fn rasters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        write_rgb(&dir.path().join("a/img.png"), &img).unwrap();
        assert_eq!(read_rgb(&dir.path().join("a/img.png")).unwrap(), img);

        let mask = BinaryMask::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        write_mask(&dir.path().join("m.png"), &mask).unwrap();
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), mask);

        let labels = LabelImage::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        write_labels(&dir.path().join("l.png"), &labels).unwrap();
        assert_eq!(read_labels(&dir.path().join("l.png")).unwrap(), labels);

        write_gray(&dir.path().join("bad.png"), 1, 1, vec![9]).unwrap();
        assert!(read_labels(&dir.path().join("bad.png")).is_err());
        assert!(matches!(read_rgb(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn ppm_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 1, 2, 3]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_rgb(&p).unwrap().data(), &[255, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn dfb_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::from_fn(40, 30, |x, y| x > 2 && y > 1 && x < 37 && y < 27);
        let dfb = distance_transform_chamfer(&mask, DistanceOptions::default()).unwrap();

        let raw = dir.path().join("d.f32");
        write_dfb_raw(&raw, &dfb).unwrap();
        assert_eq!(read_dfb_raw(&raw).unwrap(), dfb);
        assert_eq!(fs::read(&raw).unwrap().len(), 16 + 40 * 30 * 4);

        let png = dir.path().join("d.png");
        write_dfb_png(&png, &dfb).unwrap();
        let scale = dfb_png_scale(&dfb);
        let back = read_dfb_png(&png).unwrap();
        for (a, b) in dfb.data().iter().zip(back.data()) {
            assert!((a - b).abs() as f64 <= 0.5 / scale + 1e-6);
        }
        assert!(fs::read_to_string(dfb_sidecar_path(&png)).unwrap().starts_with("scale "));

        let mut bytes = dfb_raw_bytes(&dfb);
        bytes.pop();
        assert!(dfb_from_raw_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let rows = vec![
            PredictionRow {
                wsi_id: "s1".into(),
                x: 0,
                y: 64,
                true_label: ClassLabel::Lsil,
                pred_label: ClassLabel::Hsil,
                dfb_mean: 3.25,
            },
            PredictionRow {
                wsi_id: "s2".into(),
                x: 64,
                y: 0,
                true_label: ClassLabel::NonNeop,
                pred_label: ClassLabel::NonNeop,
                dfb_mean: 40.0,
            },
        ];
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("wsi_id,x,y,true_label,pred_label,dfb_mean\ns1,0,64,LSIL,HSIL,3.25\n"));
        assert_eq!(read_csv::<PredictionRow>(&p).unwrap(), rows);

        let f = dir.path().join("folds.csv");
        write_csv(&f, &[FoldRow { wsi_id: "a".into(), fold: 2, role: Role::Val }]).unwrap();
        assert_eq!(fs::read_to_string(&f).unwrap(), "wsi_id,fold,role\na,2,val\n");
    }
}
