//! Slide preparation and the cross-validated comparison of fusion arms.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{split_folds, sub_seed, FoldSplit};
use crate::distance::{distance_transform, DfbImage, DistanceMode, DistanceOptions};
use crate::error::{invalid, Result};
use crate::imgproc::{tissue_mask, BinaryMask, RgbImage, TissueMaskParams};
use crate::io::PredictionRow;
use crate::metrics::{
    compute_metrics, curve_difference, recall_by_distance, BinValue, ConfusionMatrix, DistanceRecord, MetricsReport,
    RecallAveraging,
};
use crate::model::{
    build_input, predict, softmax, train, transfer_init, Architecture, EpochLog, FusionMode, NetworkState, TrainConfig,
};
use crate::synth::{generate_wsi, SynthParams, SyntheticSlide};
use crate::tiling::{label_patch, map_to_lowres, mean_dfb, tile_grid, ClassLabel, LabelImage, PatchRecord, PatchRect};

/// How slides are turned into patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub factor: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub mask: TissueMaskParams,
    pub distance: DistanceMode,
    pub border_is_tissue: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            patch_size: 64,
            stride: 64,
            mask: TissueMaskParams::default(),
            distance: DistanceMode::Chamfer,
            border_is_tissue: false,
        }
    }
}

/// Tissue mask and DfB map of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideDfb {
    pub mask: BinaryMask,
    pub dfb: DfbImage,
}

pub fn slide_dfb(image: &RgbImage, cfg: &PrepConfig) -> Result<SlideDfb> {
    let mask = tissue_mask(image, cfg.factor, &cfg.mask)?;
    let dfb = distance_transform(&mask, cfg.distance, DistanceOptions { border_is_tissue: cfg.border_is_tissue })?;
    Ok(SlideDfb { mask, dfb })
}

/// Single-class patches of a slide, with their mean DfB.
pub fn extract_patches(
    wsi_id: &str,
    image: &RgbImage,
    gt: &LabelImage,
    dfb: &DfbImage,
    cfg: &PrepConfig,
) -> Result<Vec<PatchRecord>> {
    if gt.width() != dfb.width() || gt.height() != dfb.height() {
        return Err(invalid("ground truth and DfB map must share the low-res grid"));
    }
    let mut out = Vec::new();
    for rect in tile_grid(image.width(), image.height(), cfg.patch_size, cfg.stride) {
        let low = map_to_lowres(rect, cfg.factor, dfb.width(), dfb.height());
        let Some(label) = label_patch(gt, low) else { continue };
        out.push(PatchRecord {
            wsi_id: wsi_id.to_string(),
            rect,
            image: image.crop(rect.x, rect.y, rect.size, rect.size)?,
            dfb_mean: mean_dfb(dfb, low)?,
            label,
        });
    }
    Ok(out)
}

/// Grid rects whose low-res footprint is at least half tissue, with their
/// mean DfB. Used to predict on slides without ground truth.
pub fn tissue_rects(image: &RgbImage, s: &SlideDfb, cfg: &PrepConfig) -> Result<Vec<(PatchRect, f64)>> {
    let mut out = Vec::new();
    for rect in tile_grid(image.width(), image.height(), cfg.patch_size, cfg.stride) {
        let low = map_to_lowres(rect, cfg.factor, s.mask.width(), s.mask.height());
        let mut tissue = 0;
        for y in low.y..low.y + low.size {
            for x in low.x..low.x + low.size {
                tissue += usize::from(s.mask.get(x, y));
            }
        }
        if 2 * tissue >= low.size * low.size {
            out.push((rect, mean_dfb(&s.dfb, low)?));
        }
    }
    Ok(out)
}

/// Predicted class per rect.
pub fn predict_rects(state: &NetworkState, image: &RgbImage, rects: &[(PatchRect, f64)]) -> Result<Vec<ClassLabel>> {
    rects
        .iter()
        .map(|&(r, dfb)| {
            let tile = image.crop(r.x, r.y, r.size, r.size)?;
            let input = build_input(state.mode(), &tile, dfb, state.dfb_norm)?;
            Ok(crate::model::argmax_class(&softmax(&state.net.logits(&input)?)))
        })
        .collect()
}

/// A slide reduced to what the experiment needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlide {
    pub wsi_id: String,
    pub max_dfb: f64,
    pub patches: Vec<PatchRecord>,
}

pub fn prepare_slide(wsi_id: &str, image: &RgbImage, gt: &LabelImage, cfg: &PrepConfig) -> Result<PreparedSlide> {
    let s = slide_dfb(image, cfg)?;
    let patches = extract_patches(wsi_id, image, gt, &s.dfb, cfg)?;
    Ok(PreparedSlide { wsi_id: wsi_id.into(), max_dfb: s.dfb.max() as f64, patches })
}

/// One experimental arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    DfbCnn,
    DfbFc,
    TransferCnn,
    TransferFc,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::DfbCnn, Arm::DfbFc, Arm::TransferCnn, Arm::TransferFc];

    pub fn mode(self) -> FusionMode {
        match self {
            Arm::Baseline => FusionMode::Baseline,
            Arm::DfbCnn | Arm::TransferCnn => FusionMode::DfbChannel,
            Arm::DfbFc | Arm::TransferFc => FusionMode::DfbFeature,
        }
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, Arm::TransferCnn | Arm::TransferFc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::DfbCnn => "dfb_cnn",
            Arm::DfbFc => "dfb_fc",
            Arm::TransferCnn => "transfer_cnn",
            Arm::TransferFc => "transfer_fc",
        }
    }

    /// Row label for result tables.
    pub fn title(self) -> &'static str {
        match self {
            Arm::Baseline => "Baseline",
            Arm::DfbCnn => "DfB+CNN",
            Arm::DfbFc => "DfB+FC",
            Arm::TransferCnn => "DfB+CNN (Transfer)",
            Arm::TransferFc => "DfB+FC (Transfer)",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| invalid(format!("unknown arm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub folds: usize,
    pub seed: u64,
    pub arch: Architecture,
    /// `dfb_norm` and `seed` are overridden per fold.
    pub train: TrainConfig,
    pub arms: Vec<Arm>,
    pub bin_width: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            arch: Architecture::standard(64),
            train: TrainConfig::default(),
            arms: Arm::ALL.to_vec(),
            bin_width: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub dfb_norm: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub state: NetworkState,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub runs: Vec<FoldRun>,
    /// Test predictions of every fold.
    pub predictions: Vec<PredictionRow>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

impl ArmResult {
    pub fn distance_records(&self) -> Vec<DistanceRecord> {
        distance_records(&self.predictions)
    }
}

pub fn distance_records(rows: &[PredictionRow]) -> Vec<DistanceRecord> {
    rows.iter()
        .map(|r| DistanceRecord { dfb_mean: r.dfb_mean, true_label: r.true_label, pred_label: r.pred_label })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub splits: Vec<FoldSplit>,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// Per-bin recall of `arm` minus that of the baseline.
    pub fn recall_difference(&self, arm: Arm, bin_width: f64, averaging: RecallAveraging) -> Result<Vec<BinValue>> {
        let base = self.arm(Arm::Baseline).ok_or_else(|| invalid("experiment has no baseline arm"))?;
        let other = self.arm(arm).ok_or_else(|| invalid(format!("experiment has no {arm} arm")))?;
        let b = recall_by_distance(&base.distance_records(), bin_width, averaging)?;
        let m = recall_by_distance(&other.distance_records(), bin_width, averaging)?;
        Ok(curve_difference(&m, &b))
    }
}

/// Slide-disjoint k-fold comparison of the configured arms. Every arm of a
/// fold starts from the same initial weights; transfer arms fine-tune the
/// fold's trained baseline. `dfb_norm` is the largest DfB over the fold's
/// training slides.
pub fn run_cross_validation(slides: &[PreparedSlide], cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.arch.validate()?;
    if cfg.arms.is_empty() {
        return Err(invalid("no arms to run"));
    }
    let ids: Vec<String> = slides.iter().map(|s| s.wsi_id.clone()).collect();
    let by_id: HashMap<&str, &PreparedSlide> = slides.iter().map(|s| (s.wsi_id.as_str(), s)).collect();
    if by_id.len() != slides.len() {
        return Err(invalid("slide ids must be unique"));
    }
    let splits = split_folds(&ids, cfg.folds, cfg.seed)?;
    let gather = |wsis: &[String]| -> Vec<PatchRecord> {
        wsis.iter().flat_map(|id| by_id[id.as_str()].patches.iter().cloned()).collect()
    };

    let mut runs: HashMap<Arm, Vec<FoldRun>> = HashMap::new();
    let mut preds: HashMap<Arm, Vec<PredictionRow>> = HashMap::new();
    for split in &splits {
        let train_set = gather(&split.train_wsis);
        let val_set = gather(&split.val_wsis);
        let test_set = gather(&split.test_wsis);
        let dfb_norm = split.train_wsis.iter().map(|id| by_id[id.as_str()].max_dfb).fold(0.0, f64::max).max(1.0);
        let fold_seed = sub_seed(cfg.seed, 1000 + split.fold_index as u64);
        let tcfg = TrainConfig { dfb_norm, seed: fold_seed, ..cfg.train.clone() };

        let mut baseline: Option<FoldRun> = None;
        let needs_baseline = cfg.arms.iter().any(|a| *a == Arm::Baseline || a.is_transfer());
        if needs_baseline {
            let init = NetworkState::new(cfg.arch.clone(), FusionMode::Baseline, fold_seed, dfb_norm)?;
            baseline = Some(fit(split.fold_index, init, &train_set, &val_set, &tcfg)?);
        }
        for &arm in &cfg.arms {
            let run = match arm {
                Arm::Baseline => baseline.clone().expect("trained above"),
                _ if arm.is_transfer() => {
                    let base = &baseline.as_ref().expect("trained above").state;
                    fit(split.fold_index, transfer_init(arm.mode(), base)?, &train_set, &val_set, &tcfg)?
                }
                _ => {
                    let init = NetworkState::new(cfg.arch.clone(), arm.mode(), fold_seed, dfb_norm)?;
                    fit(split.fold_index, init, &train_set, &val_set, &tcfg)?
                }
            };
            let p = predict(&run.state, &test_set)?;
            preds.entry(arm).or_default().extend(test_set.iter().zip(p).map(|(t, (pred, _))| PredictionRow {
                wsi_id: t.wsi_id.clone(),
                x: t.rect.x,
                y: t.rect.y,
                true_label: t.label,
                pred_label: pred,
                dfb_mean: t.dfb_mean,
            }));
            runs.entry(arm).or_default().push(run);
        }
    }

    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let predictions = preds.remove(&arm).unwrap_or_default();
        let confusion = ConfusionMatrix::from_labels(predictions.iter().map(|r| (r.true_label, r.pred_label)));
        let report = compute_metrics(&confusion)?;
        arms.push(ArmResult { arm, runs: runs.remove(&arm).unwrap_or_default(), predictions, confusion, report });
    }
    Ok(ExperimentResult { splits, arms })
}

fn fit(
    fold: usize,
    init: NetworkState,
    train_set: &[PatchRecord],
    val_set: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<FoldRun> {
    let out = train(init, train_set, val_set, cfg)?;
    Ok(FoldRun { fold, dfb_norm: cfg.dfb_norm, best_epoch: out.best_epoch, log: out.log, state: out.best })
}

/// The default synthetic benchmark: slide generation, preparation and the
/// experiment settings in one place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub slides: usize,
    pub synth: SynthParams,
    pub prep: PrepConfig,
    pub experiment: ExperimentConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        let synth = SynthParams::default();
        let prep = PrepConfig { factor: synth.factor, ..PrepConfig::default() };
        let experiment = ExperimentConfig {
            arch: Architecture::compact(prep.patch_size),
            train: TrainConfig { max_epochs: 60, batch_size: 8, ..TrainConfig::default() },
            arms: vec![Arm::Baseline, Arm::TransferFc],
            ..ExperimentConfig::default()
        };
        Self { slides: 40, synth, prep, experiment }
    }
}

pub fn slide_id(i: usize) -> String {
    format!("syn{i:03}")
}

impl Benchmark {
    /// Parameters of the `i`-th slide.
    pub fn slide_params(&self, i: usize) -> SynthParams {
        SynthParams { seed: sub_seed(self.synth.seed, i as u64), ..self.synth.clone() }
    }

    pub fn generate(&self, i: usize) -> Result<SyntheticSlide> {
        generate_wsi(&self.slide_params(i))
    }

    pub fn prepare(&self) -> Result<Vec<PreparedSlide>> {
        (0..self.slides)
            .map(|i| {
                let s = self.generate(i)?;
                prepare_slide(&slide_id(i), &s.image, &s.labels, &self.prep)
            })
            .collect()
    }

    pub fn run(&self) -> Result<ExperimentResult> {
        run_cross_validation(&self.prepare()?, &self.experiment)
    }
}
