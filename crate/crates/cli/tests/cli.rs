use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "slides": 6, "width": 256, "height": 256, "factor": 4,
  "patch_size": 16, "stride": 16, "min_area": 16, "max_hole_area": 128,
  "lesion_band": 8.0, "lesion_radius": 14.0, "mimic_radius": 6.0,
  "folds": 3, "max_epochs": 2, "seed": 5
}"#;

fn dfbpath(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfbpath"))
        .env("DFBPATH_WORKDIR", workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = dfbpath(workdir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&a, &["synth", "--config", c]);
    ok(&b, &["synth", "--config", c]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("slides/slides.csv")));
    assert!(ta.contains_key(Path::new("provenance/synth.json")));
    assert!(!ta.contains_key(Path::new(".dfbpath.lock")));
    assert_eq!(ta, tb);

    ok(&b, &["synth", "--config", c, "--seed", "6"]);
    assert_ne!(tree(&b)[Path::new("slides/syn000/image.png")], ta[Path::new("slides/syn000/image.png")]);
}

#[test]
fn full_pipeline() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let wd = dir.path().join("work");
    ok(&wd, &["synth", "--config", c]);
    let masks = ok(&wd, &["mask", "--config", c]);
    assert!(masks.contains("IoU vs reference"));
    ok(&wd, &["dfb", "--config", c]);
    assert!(wd.join("dfb/syn000.png.scale").exists());
    assert_eq!(fs::read(wd.join("dfb/syn000.f32")).unwrap().len(), 16 + 64 * 64 * 4);
    ok(&wd, &["tile", "--config", c]);
    let manifest = fs::read_to_string(wd.join("patches.csv")).unwrap();
    assert!(manifest.starts_with("wsi_id,x,y,size,dfb_mean,label\n"));
    assert!(fs::read_to_string(wd.join("folds.csv")).unwrap().starts_with("wsi_id,fold,role\n"));

    ok(&wd, &["train", "--config", c, "--mode", "baseline"]);
    let base_ckpt = wd.join("models/baseline_fold0.ckpt");
    assert!(base_ckpt.exists());
    let log = fs::read_to_string(wd.join("logs/baseline_fold0.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_mrecall,best_flag\n"));

    ok(&wd, &["train", "--config", c, "--mode", "dfb_fc", "--transfer-from", base_ckpt.to_str().unwrap()]);
    let read = |p: &str| -> serde_json::Value { serde_json::from_slice(&fs::read(wd.join(p)).unwrap()).unwrap() };
    let base = read("runs/baseline_fold0.json");
    let transfer = read("runs/transfer_dfb_fc_fold0.json");
    // zero-delta init: the transferred model starts exactly where the
    // baseline checkpoint ended
    assert_eq!(transfer["initial_val_mrecall"], base["best_val_mrecall"]);

    // predictions that equal the truth score 1.0 everywhere
    let preds = fs::read_to_string(wd.join("predictions/baseline_fold0.csv")).unwrap();
    let perfect: String = preds
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{},{},{},{}\n", f[0], f[1], f[2], f[3], f[3], f[5])
            }
        })
        .collect();
    fs::write(wd.join("perfect.csv"), perfect).unwrap();
    ok(
        &wd,
        &[
            "eval",
            "--predictions",
            wd.join("perfect.csv").to_str().unwrap(),
            "--manifest",
            wd.join("patches.csv").to_str().unwrap(),
        ],
    );
    let table = fs::read_to_string(wd.join("eval/metrics.csv")).unwrap();
    assert_eq!(table, "method,Acc.,mRecall,mPrec.,F1,mIoU\nperfect,1.0,1.0,1.0,1.0,1.0\n");

    ok(&wd, &["predmap", "--config", c, "--checkpoint", base_ckpt.to_str().unwrap(), "--slide", "syn001"]);
    assert!(wd.join("predmaps/syn001.png").exists() && wd.join("predmaps/syn001_color.png").exists());

    let out = ok(
        &wd,
        &[
            "analyze",
            "--config",
            c,
            "--predictions",
            wd.join("predictions/transfer_dfb_fc_fold0.csv").to_str().unwrap(),
            "--baseline",
            wd.join("predictions/baseline_fold0.csv").to_str().unwrap(),
        ],
    );
    assert!(out.contains("mean recall difference"));
    let hist = fs::read_to_string(wd.join("analysis/dfb_histogram.csv")).unwrap();
    assert!(hist.starts_with("bin_low,NonNeop,LSIL,HSIL\n"));
    assert!(fs::read_to_string(wd.join("analysis/recall_transfer_dfb_fc_fold0.csv"))
        .unwrap()
        .starts_with("bin_low,value\n"));
    assert!(wd.join("provenance/analyze.json").exists());
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let wd = dir.path().join("w");

    // missing inputs
    assert_eq!(dfbpath(&wd, &["mask", "--config", c]).status.code(), Some(2));
    assert_eq!(dfbpath(&wd, &["eval", "--predictions", "nope.csv"]).status.code(), Some(2));
    assert_eq!(dfbpath(&wd, &["mask", "--config", "absent.json"]).status.code(), Some(2));

    // invalid configuration
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sat_min": 2.0}"#).unwrap();
    assert_eq!(dfbpath(&wd, &["synth", "--config", bad.to_str().unwrap()]).status.code(), Some(3));
    fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(dfbpath(&wd, &["synth", "--config", bad.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(dfbpath(&wd, &["train", "--config", c, "--fold", "7"]).status.code(), Some(3));

    // predictions disagreeing with the manifest
    fs::create_dir_all(&wd).unwrap();
    fs::write(wd.join("m.csv"), "wsi_id,x,y,size,dfb_mean,label\ns,0,0,16,1.0,LSIL\n").unwrap();
    fs::write(wd.join("p.csv"), "wsi_id,x,y,true_label,pred_label,dfb_mean\ns,0,0,HSIL,HSIL,1.0\n").unwrap();
    let out = dfbpath(
        &wd,
        &[
            "eval",
            "--predictions",
            wd.join("p.csv").to_str().unwrap(),
            "--manifest",
            wd.join("m.csv").to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4));

    // advisory lock
    fs::write(wd.join(".dfbpath.lock"), "123").unwrap();
    let out = dfbpath(&wd, &["synth", "--config", c]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}
