//! The flat JSON run configuration. Every key is optional; command-line
//! flags override the file.

use std::path::PathBuf;

use dfbpath::distance::DistanceMode;
use dfbpath::experiment::PrepConfig;
use dfbpath::imgproc::{HsvThresholds, TissueMaskParams};
use dfbpath::metrics::RecallAveraging;
use dfbpath::model::{Architecture, FusionMode, TrainConfig};
use dfbpath::synth::SynthParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Compact,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `slides.csv`; defaults to `<workdir>/slides`.
    pub input_dir: Option<PathBuf>,
    pub seed: u64,

    pub sat_min: f64,
    pub val_max: f64,
    pub hue_min: Option<f64>,
    pub hue_max: Option<f64>,
    pub min_area: usize,
    pub max_hole_area: usize,
    pub factor: usize,
    pub distance: DistanceMode,
    pub border_is_tissue: bool,

    pub patch_size: usize,
    pub stride: usize,
    pub export_tiles: bool,

    pub folds: usize,
    pub fold: usize,
    pub mode: FusionMode,
    pub arch: ArchChoice,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Fixed DfB normaliser; by default the largest DfB over the training
    /// slides.
    pub dfb_norm: Option<f64>,

    pub slides: usize,
    pub width: usize,
    pub height: usize,
    pub lesion_band: f64,
    pub lesion_radius: f64,
    pub mimic_radius: f64,

    pub bin_width: f64,
    pub averaging: RecallAveraging,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = HsvThresholds::default();
        let m = TissueMaskParams::default();
        let s = SynthParams::default();
        Self {
            input_dir: None,
            seed: 0,
            sat_min: t.sat_min,
            val_max: t.val_max,
            hue_min: None,
            hue_max: None,
            min_area: m.min_area,
            max_hole_area: m.max_hole_area,
            factor: 4,
            distance: DistanceMode::Chamfer,
            border_is_tissue: false,
            patch_size: 64,
            stride: 64,
            export_tiles: false,
            folds: 5,
            fold: 0,
            mode: FusionMode::Baseline,
            arch: ArchChoice::Compact,
            learning_rate: 1e-3,
            patience: 5,
            max_epochs: 60,
            batch_size: 8,
            dfb_norm: None,
            slides: 40,
            width: s.width,
            height: s.height,
            lesion_band: s.lesion_band,
            lesion_radius: s.lesion_radius,
            mimic_radius: s.mimic_radius,
            bin_width: 1.0,
            averaging: RecallAveraging::Macro,
        }
    }
}

impl RunConfig {
    pub fn mask_params(&self) -> TissueMaskParams {
        let hue_range = match (self.hue_min, self.hue_max) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        };
        TissueMaskParams {
            thresholds: HsvThresholds { sat_min: self.sat_min, val_max: self.val_max, hue_range },
            min_area: self.min_area,
            max_hole_area: self.max_hole_area,
        }
    }

    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            factor: self.factor,
            patch_size: self.patch_size,
            stride: self.stride,
            mask: self.mask_params(),
            distance: self.distance,
            border_is_tissue: self.border_is_tissue,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchChoice::Compact => Architecture::compact(self.patch_size),
            ArchChoice::Standard => Architecture::standard(self.patch_size),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            patience: self.patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            dfb_norm: self.dfb_norm.unwrap_or(1.0),
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            width: self.width,
            height: self.height,
            factor: self.factor,
            lesion_band: self.lesion_band,
            lesion_radius: self.lesion_radius,
            mimic_radius: self.mimic_radius,
            seed: self.seed,
            ..SynthParams::default()
        }
    }

    /// Checks every numeric field against its stage's preconditions.
    pub fn validate(&self) -> Result<(), String> {
        let e = |r: dfbpath::Result<()>| r.map_err(|e| e.to_string());
        e(self.mask_params().thresholds.validate())?;
        if self.hue_min.is_some() != self.hue_max.is_some() {
            return Err("hue_min and hue_max must be given together".into());
        }
        if self.factor == 0 || self.patch_size == 0 || self.stride == 0 {
            return Err("factor, patch_size and stride must be positive".into());
        }
        if self.folds < 2 || self.fold >= self.folds {
            return Err(format!("need folds >= 2 and fold < folds (got fold {} of {})", self.fold, self.folds));
        }
        if self.dfb_norm.is_some_and(|n| !(n > 0.0)) {
            return Err("dfb_norm must be positive".into());
        }
        e(self.train_config().validate())?;
        e(self.architecture().validate())?;
        if !(self.bin_width > 0.0) {
            return Err("bin_width must be positive".into());
        }
        if self.slides == 0 {
            return Err("slides must be positive".into());
        }
        e(self.synth_params().validate())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
