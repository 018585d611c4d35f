use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use dfbpath::dataset::{split_folds, sub_seed, FoldSplit, Role};
use dfbpath::distance::{distance_transform, DistanceOptions};
use dfbpath::experiment::{distance_records, extract_patches, predict_rects, slide_dfb, tissue_rects};
use dfbpath::imgproc::{tissue_mask, RgbImage};
use dfbpath::io::{self, FoldRow, MetricsRow, PatchRow, PredictionRow, SlideRow, SLIDE_MANIFEST};
use dfbpath::metrics::{compute_metrics, curve_difference, dfb_class_histogram, recall_by_distance, ConfusionMatrix};
use dfbpath::model::{self, FusionMode, NetworkState, TrainConfig};
use dfbpath::synth::generate_wsi;
use dfbpath::tiling::{stitch_prediction_map, ClassLabel, PatchRecord};
use serde::Serialize;

use crate::config::RunConfig;
use crate::workdir::{Failure, Workdir};

type Res<T = ()> = Result<T, Failure>;

fn read_manifest(wd: &Workdir, cfg: &RunConfig) -> Res<(std::path::PathBuf, Vec<SlideRow>)> {
    let dir = wd.slides_dir(cfg);
    let path = dir.join(SLIDE_MANIFEST);
    if !path.exists() {
        return Err(Failure::missing(format!(
            "slide manifest {} not found (run `dfbpath synth` or provide input_dir)",
            path.display()
        )));
    }
    let rows: Vec<SlideRow> = io::read_csv(&path)?;
    if rows.is_empty() {
        return Err(Failure::missing(format!("{} lists no slides", path.display())));
    }
    Ok((dir, rows))
}

fn require(path: &Path, hint: &str) -> Res {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::missing(format!("{} not found ({hint})", path.display())))
    }
}

#[derive(Serialize)]
struct MaskSummary {
    wsi_id: String,
    tissue_px: usize,
    reference_iou: Option<f64>,
}

pub fn mask(wd: &Workdir, cfg: &RunConfig) -> Res {
    let (dir, slides) = read_manifest(wd, cfg)?;
    let mut summary = Vec::new();
    for s in &slides {
        let image = s.read_image(&dir)?;
        let m = tissue_mask(&image, s.factor, &cfg.mask_params())?;
        let reference_iou = match s.read_mask(&dir)? {
            Some(r) => Some(m.iou(&r)?),
            None => None,
        };
        io::write_mask(&wd.mask_path(&s.wsi_id), &m)?;
        println!(
            "{}: {} tissue px{}",
            s.wsi_id,
            m.count_foreground(),
            reference_iou.map_or(String::new(), |v| format!(", IoU vs reference {v:.4}"))
        );
        summary.push(MaskSummary { wsi_id: s.wsi_id.clone(), tissue_px: m.count_foreground(), reference_iou });
    }
    io::write_csv(&wd.path("masks/summary.csv"), &summary)?;
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct DfbSummary {
    wsi_id: String,
    max_dfb: f32,
}

pub fn dfb(wd: &Workdir, cfg: &RunConfig) -> Res {
    let (_, slides) = read_manifest(wd, cfg)?;
    let opts = DistanceOptions { border_is_tissue: cfg.border_is_tissue };
    let mut summary = Vec::new();
    for s in &slides {
        let mp = wd.mask_path(&s.wsi_id);
        require(&mp, "run `dfbpath mask` first")?;
        let d = distance_transform(&io::read_mask(&mp)?, cfg.distance, opts)?;
        io::write_dfb_png(&wd.dfb_png_path(&s.wsi_id), &d)?;
        io::write_dfb_raw(&wd.dfb_raw_path(&s.wsi_id), &d)?;
        println!("{}: max DfB {:.3}", s.wsi_id, d.max());
        summary.push(DfbSummary { wsi_id: s.wsi_id.clone(), max_dfb: d.max() });
    }
    io::write_csv(&wd.path("dfb/summary.csv"), &summary)?;
    Ok(())
}

pub fn tile(wd: &Workdir, cfg: &RunConfig) -> Res {
    let (dir, slides) = read_manifest(wd, cfg)?;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for s in &slides {
        let image = s.read_image(&dir)?;
        let Some(gt) = s.read_gt(&dir, &image)? else {
            println!("{}: no ground truth, skipped", s.wsi_id);
            continue;
        };
        let raw = wd.dfb_raw_path(&s.wsi_id);
        require(&raw, "run `dfbpath dfb` first")?;
        let d = io::read_dfb_raw(&raw)?;
        let prep = dfbpath::experiment::PrepConfig { factor: s.factor, ..cfg.prep() };
        let patches = extract_patches(&s.wsi_id, &image, &gt, &d, &prep)?;
        println!("{}: {} single-class patches", s.wsi_id, patches.len());
        for p in &patches {
            if cfg.export_tiles {
                io::write_rgb(&io::tile_path(&wd.root, &p.wsi_id, p.rect), &p.image)?;
            }
            rows.push(PatchRow {
                wsi_id: p.wsi_id.clone(),
                x: p.rect.x,
                y: p.rect.y,
                size: p.rect.size,
                dfb_mean: p.dfb_mean,
                label: p.label,
            });
        }
        ids.push(s.wsi_id.clone());
    }
    io::write_csv(&wd.path("patches.csv"), &rows)?;
    let splits = split_folds(&ids, cfg.folds, cfg.seed)?;
    let mut folds = Vec::new();
    for sp in &splits {
        for id in &ids {
            let role = sp.role_of(id).expect("every slide has a role");
            folds.push(FoldRow { wsi_id: id.clone(), fold: sp.fold_index, role });
        }
    }
    io::write_csv(&wd.path("folds.csv"), &folds)?;
    Ok(())
}

pub fn synth(wd: &Workdir, cfg: &RunConfig) -> Res {
    let base = cfg.synth_params();
    let dir = wd.slides_dir(cfg);
    let mut rows = Vec::new();
    for i in 0..cfg.slides {
        let p = dfbpath::synth::SynthParams { seed: sub_seed(cfg.seed, i as u64), ..base.clone() };
        let s = generate_wsi(&p)?;
        let id = dfbpath::experiment::slide_id(i);
        rows.push(io::write_slide(&dir, &id, &s.image, &s.labels, &s.mask, p.factor)?);
    }
    io::write_csv(&dir.join(SLIDE_MANIFEST), &rows)?;
    io::write_json(&dir.join("synth_params.json"), &base)?;
    println!("wrote {} slides to {}", rows.len(), dir.display());
    Ok(())
}

fn fold_split(wd: &Workdir, fold: usize) -> Res<FoldSplit> {
    let path = wd.path("folds.csv");
    require(&path, "run `dfbpath tile` first")?;
    let rows: Vec<FoldRow> = io::read_csv(&path)?;
    let mut split = FoldSplit { fold_index: fold, train_wsis: vec![], val_wsis: vec![], test_wsis: vec![] };
    for r in rows.into_iter().filter(|r| r.fold == fold) {
        match r.role {
            Role::Train => split.train_wsis.push(r.wsi_id),
            Role::Val => split.val_wsis.push(r.wsi_id),
            Role::Test => split.test_wsis.push(r.wsi_id),
        }
    }
    if split.train_wsis.is_empty() || split.val_wsis.is_empty() || split.test_wsis.is_empty() {
        return Err(Failure::invariant(format!("folds.csv has no complete split for fold {fold}")));
    }
    Ok(split)
}

/// Patch records of the listed slides with pixels cropped from the slide
/// images.
fn load_patches(wd: &Workdir, cfg: &RunConfig, wsis: &[String]) -> Res<Vec<PatchRecord>> {
    let path = wd.path("patches.csv");
    require(&path, "run `dfbpath tile` first")?;
    let rows: Vec<PatchRow> = io::read_csv(&path)?;
    let (dir, slides) = read_manifest(wd, cfg)?;
    let by_id: HashMap<&str, &SlideRow> = slides.iter().map(|s| (s.wsi_id.as_str(), s)).collect();
    let mut out = Vec::new();
    for id in wsis {
        let s =
            by_id.get(id.as_str()).ok_or_else(|| Failure::invariant(format!("slide {id} is not in the manifest")))?;
        let image: RgbImage = s.read_image(&dir)?;
        for r in rows.iter().filter(|r| &r.wsi_id == id) {
            out.push(PatchRecord {
                wsi_id: id.clone(),
                rect: r.rect(),
                image: image.crop(r.x, r.y, r.size, r.size)?,
                dfb_mean: r.dfb_mean,
                label: r.label,
            });
        }
    }
    Ok(out)
}

fn max_dfb_of(wd: &Workdir, wsis: &[String]) -> Res<f64> {
    let mut m = 0.0f64;
    for id in wsis {
        let raw = wd.dfb_raw_path(id);
        require(&raw, "run `dfbpath dfb` first")?;
        m = m.max(io::read_dfb_raw(&raw)?.max() as f64);
    }
    Ok(m.max(1.0))
}

#[derive(Serialize)]
struct RunSummary {
    run: String,
    mode: FusionMode,
    transfer: bool,
    fold: usize,
    dfb_norm: f64,
    initial_val_mrecall: f64,
    best_epoch: usize,
    best_val_mrecall: f64,
    test: dfbpath::metrics::MetricsReport,
}

pub fn train(wd: &Workdir, cfg: &RunConfig, transfer_from: Option<&Path>) -> Res {
    if transfer_from.is_some() && cfg.mode == FusionMode::Baseline {
        return Err(Failure::config("--transfer-from needs --mode dfb_cnn or dfb_fc"));
    }
    let split = fold_split(wd, cfg.fold)?;
    let train_set = load_patches(wd, cfg, &split.train_wsis)?;
    let val_set = load_patches(wd, cfg, &split.val_wsis)?;
    let test_set = load_patches(wd, cfg, &split.test_wsis)?;
    let dfb_norm = match cfg.dfb_norm {
        Some(n) => n,
        None => max_dfb_of(wd, &split.train_wsis)?,
    };
    let seed = sub_seed(cfg.seed, 1000 + cfg.fold as u64);
    let mut state = match transfer_from {
        Some(p) => {
            require(p, "baseline checkpoint")?;
            let base = model::read_checkpoint(p)?;
            if base.net.arch().input_size != cfg.patch_size {
                return Err(Failure::config(format!(
                    "checkpoint expects {}px tiles but patch_size is {}",
                    base.net.arch().input_size,
                    cfg.patch_size
                )));
            }
            model::transfer_init(cfg.mode, &base)?
        }
        None => NetworkState::new(cfg.architecture(), cfg.mode, seed, dfb_norm)?,
    };
    state.dfb_norm = dfb_norm;
    let initial_val_mrecall = compute_metrics(&model::evaluate(&state, &val_set)?)?.m_recall;

    let tcfg = TrainConfig { seed, dfb_norm, ..cfg.train_config() };
    let out = model::train(state, &train_set, &val_set, &tcfg)?;
    let name = format!("{}{}_fold{}", if transfer_from.is_some() { "transfer_" } else { "" }, cfg.mode, cfg.fold);
    model::write_checkpoint(&wd.path("models").join(format!("{name}.ckpt")), &out.best)?;
    io::write_csv(&wd.path("logs").join(format!("{name}.csv")), &out.log)?;

    let preds = model::predict(&out.best, &test_set)?;
    let rows: Vec<PredictionRow> = test_set
        .iter()
        .zip(&preds)
        .map(|(t, (p, _))| PredictionRow {
            wsi_id: t.wsi_id.clone(),
            x: t.rect.x,
            y: t.rect.y,
            true_label: t.label,
            pred_label: *p,
            dfb_mean: t.dfb_mean,
        })
        .collect();
    io::write_csv(&wd.path("predictions").join(format!("{name}.csv")), &rows)?;
    let test = compute_metrics(&ConfusionMatrix::from_labels(rows.iter().map(|r| (r.true_label, r.pred_label))))?;
    println!(
        "{name}: best epoch {} of {}, val mRecall {:.4} (initial {:.4}), test F1 {:.4}",
        out.best_epoch,
        out.log.len(),
        out.best_val_mrecall,
        initial_val_mrecall,
        test.f1
    );
    let summary = RunSummary {
        run: name.clone(),
        mode: cfg.mode,
        transfer: transfer_from.is_some(),
        fold: cfg.fold,
        dfb_norm,
        initial_val_mrecall,
        best_epoch: out.best_epoch,
        best_val_mrecall: out.best_val_mrecall,
        test,
    };
    io::write_json(&wd.path("runs").join(format!("{name}.json")), &summary)?;
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "predictions".into(), |s| s.to_string_lossy().into_owned())
}

fn read_predictions(p: &Path) -> Res<Vec<PredictionRow>> {
    require(p, "predictions file")?;
    Ok(io::read_csv(p)?)
}

#[derive(Serialize)]
struct EvalEntry {
    name: String,
    report: dfbpath::metrics::MetricsReport,
    confusion: ConfusionMatrix,
    normalized: Vec<Vec<f64>>,
}

pub fn eval(wd: &Workdir, predictions: &[std::path::PathBuf], manifest: Option<&Path>, out: Option<&Path>) -> Res {
    let truth: Option<HashMap<(String, usize, usize), ClassLabel>> = match manifest {
        Some(m) => {
            require(m, "patch manifest")?;
            let rows: Vec<PatchRow> = io::read_csv(m)?;
            Some(rows.into_iter().map(|r| ((r.wsi_id, r.x, r.y), r.label)).collect())
        }
        None => None,
    };
    let mut table = Vec::new();
    let mut entries = Vec::new();
    for p in predictions {
        let rows = read_predictions(p)?;
        if let Some(t) = &truth {
            for r in &rows {
                match t.get(&(r.wsi_id.clone(), r.x, r.y)) {
                    Some(&l) if l == r.true_label => {}
                    Some(&l) => {
                        return Err(Failure::invariant(format!(
                            "{}: patch {} ({}, {}) labelled {} but the manifest says {l}",
                            p.display(),
                            r.wsi_id,
                            r.x,
                            r.y,
                            r.true_label
                        )))
                    }
                    None => {
                        return Err(Failure::invariant(format!(
                            "{}: patch {} ({}, {}) is not in the manifest",
                            p.display(),
                            r.wsi_id,
                            r.x,
                            r.y
                        )))
                    }
                }
            }
        }
        let cm = ConfusionMatrix::from_labels(rows.iter().map(|r| (r.true_label, r.pred_label)));
        let report = compute_metrics(&cm)?;
        let name = stem(p);
        table.push(MetricsRow::new(name.clone(), &report));
        entries.push(EvalEntry { name, normalized: cm.row_normalized(), confusion: cm, report });
    }
    let dir = out.map_or_else(|| wd.path("eval"), Path::to_path_buf);
    io::write_csv(&dir.join("metrics.csv"), &table)?;
    io::write_json(&dir.join("metrics.json"), &entries)?;
    println!("{:<28} {:>7} {:>8} {:>7} {:>7} {:>7}", "method", "Acc.", "mRecall", "mPrec.", "F1", "mIoU");
    for r in &table {
        println!(
            "{:<28} {:>7.4} {:>8.4} {:>7.4} {:>7.4} {:>7.4}",
            r.method, r.accuracy, r.m_recall, r.m_precision, r.f1, r.m_iou
        );
    }
    Ok(())
}

pub fn predmap(wd: &Workdir, cfg: &RunConfig, checkpoint: &Path, only: Option<&str>) -> Res {
    require(checkpoint, "checkpoint")?;
    let state = model::read_checkpoint(checkpoint)?;
    if state.net.arch().input_size != cfg.patch_size {
        return Err(Failure::config(format!(
            "checkpoint expects {}px tiles but patch_size is {}",
            state.net.arch().input_size,
            cfg.patch_size
        )));
    }
    let (dir, slides) = read_manifest(wd, cfg)?;
    let chosen: Vec<&SlideRow> = slides.iter().filter(|s| only.is_none_or(|id| s.wsi_id == id)).collect();
    if chosen.is_empty() {
        return Err(Failure::missing(format!("slide {} is not in the manifest", only.unwrap_or_default())));
    }
    for s in chosen {
        let image = s.read_image(&dir)?;
        let prep = dfbpath::experiment::PrepConfig { factor: s.factor, ..cfg.prep() };
        let sd = slide_dfb(&image, &prep)?;
        let (w, h) = (sd.mask.width() * s.factor, sd.mask.height() * s.factor);
        let rects: Vec<_> = tissue_rects(&image, &sd, &prep)?.into_iter().filter(|(r, _)| r.fits(w, h)).collect();
        let preds = predict_rects(&state, &image, &rects)?;
        let gt = s.read_gt(&dir, &image)?;
        let only_rects: Vec<_> = rects.iter().map(|(r, _)| *r).collect();
        let map = stitch_prediction_map(&only_rects, &preds, &sd.mask, s.factor, gt.as_ref())?;
        io::write_labels(&wd.path("predmaps").join(format!("{}.png", s.wsi_id)), &map)?;
        io::write_rgb(&wd.path("predmaps").join(format!("{}_color.png", s.wsi_id)), &io::colorize_labels(&map))?;
        println!("{}: {} patches predicted", s.wsi_id, preds.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct HistRow {
    bin_low: f64,
    #[serde(rename = "NonNeop")]
    non_neop: f64,
    #[serde(rename = "LSIL")]
    lsil: f64,
    #[serde(rename = "HSIL")]
    hsil: f64,
}

pub fn analyze(wd: &Workdir, cfg: &RunConfig, predictions: &Path, baseline: Option<&Path>) -> Res {
    let rows = read_predictions(predictions)?;
    let name = stem(predictions);
    let out = wd.path("analysis");
    let curve = recall_by_distance(&distance_records(&rows), cfg.bin_width, cfg.averaging)?;
    io::write_csv(&out.join(format!("recall_{name}.csv")), &curve)?;

    if let Some(b) = baseline {
        let base_rows = read_predictions(b)?;
        let base = recall_by_distance(&distance_records(&base_rows), cfg.bin_width, cfg.averaging)?;
        let diff = curve_difference(&curve, &base);
        io::write_csv(&out.join(format!("recall_diff_{name}_vs_{}.csv", stem(b))), &diff)?;
        let mean = |f: &dyn Fn(f64) -> bool| {
            let v: Vec<f64> = diff.iter().filter(|d| f(d.bin_low)).map(|d| d.value).collect();
            (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
        };
        let (all, n) = mean(&|_| true);
        let (far, nf) = mean(&|x| x >= cfg.lesion_band);
        println!(
            "mean recall difference: {all:+.4} over {n} bins, {far:+.4} over {nf} bins at DfB >= {}",
            cfg.lesion_band
        );
    }

    let cm = ConfusionMatrix::from_labels(rows.iter().map(|r| (r.true_label, r.pred_label)));
    let mut norm = BTreeMap::new();
    for (c, row) in cm.row_normalized().into_iter().enumerate() {
        norm.insert(ClassLabel::ALL[c].name(), row);
    }
    io::write_json(&out.join(format!("confusion_{name}.json")), &norm)?;

    // class histogram over the full patch manifest when there is one
    let manifest = wd.path("patches.csv");
    let recs: Vec<(f64, ClassLabel)> = if manifest.exists() {
        io::read_csv::<PatchRow>(&manifest)?.into_iter().map(|r| (r.dfb_mean, r.label)).collect()
    } else {
        rows.iter().map(|r| (r.dfb_mean, r.true_label)).collect()
    };
    let hist = dfb_class_histogram(&recs, cfg.bin_width)?;
    let bins = hist.per_class.iter().map(Vec::len).max().unwrap_or(0);
    let at = |c: usize, b: usize| hist.per_class[c].get(b).copied().unwrap_or(0.0);
    let table: Vec<HistRow> = (0..bins)
        .map(|b| HistRow { bin_low: b as f64 * cfg.bin_width, non_neop: at(0, b), lsil: at(1, b), hsil: at(2, b) })
        .collect();
    io::write_csv(&out.join("dfb_histogram.csv"), &table)?;
    println!("{name}: {} recall bins, {} histogram bins", curve.len(), bins);
    Ok(())
}
