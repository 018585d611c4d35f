use dfbpath::experiment::{prepare_slide, slide_dfb, PrepConfig};
use dfbpath::io::{self, SlideRow, SLIDE_MANIFEST};
use dfbpath::model::{
    predict, read_checkpoint, train, write_checkpoint, Architecture, FusionMode, NetworkState, TrainConfig,
};
use dfbpath::synth::{generate_wsi, SynthParams};

fn small(seed: u64) -> SynthParams {
    SynthParams {
        width: 256,
        height: 256,
        lesion_band: 8.0,
        lesion_radius: 14.0,
        mimic_radius: 6.0,
        unlabeled_radius: 3.0,
        seed,
        ..Default::default()
    }
}

fn prep() -> PrepConfig {
    let mut p = PrepConfig { patch_size: 16, stride: 16, ..Default::default() };
    p.mask.min_area = 16;
    p.mask.max_hole_area = 128;
    p
}

#[test]
fn slides_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    let mut direct = Vec::new();
    for i in 0..3 {
        let s = generate_wsi(&small(i)).unwrap();
        let id = format!("s{i}");
        rows.push(io::write_slide(dir.path(), &id, &s.image, &s.labels, &s.mask, 4).unwrap());
        direct.push(prepare_slide(&id, &s.image, &s.labels, &prep()).unwrap());
    }
    io::write_csv(&dir.path().join(SLIDE_MANIFEST), &rows).unwrap();

    let back: Vec<SlideRow> = io::read_csv(&dir.path().join(SLIDE_MANIFEST)).unwrap();
    assert_eq!(back, rows);
    for (row, want) in back.iter().zip(&direct) {
        let img = row.read_image(dir.path()).unwrap();
        let gt = row.read_gt(dir.path(), &img).unwrap().unwrap();
        let got = prepare_slide(&row.wsi_id, &img, &gt, &prep()).unwrap();
        assert_eq!(&got, want);
        assert!(!got.patches.is_empty());
    }
}

#[test]
fn dfb_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_wsi(&small(4)).unwrap();
    let d = slide_dfb(&s.image, &prep()).unwrap().dfb;

    let raw = dir.path().join("d.f32");
    io::write_dfb_raw(&raw, &d).unwrap();
    assert_eq!(io::read_dfb_raw(&raw).unwrap(), d);

    let png = dir.path().join("d.png");
    io::write_dfb_png(&png, &d).unwrap();
    let q = io::read_dfb_png(&png).unwrap();
    let step = 1.0 / io::dfb_png_scale(&d) as f32;
    assert_eq!((q.width(), q.height()), (d.width(), d.height()));
    for (a, b) in q.data().iter().zip(d.data()) {
        assert!((a - b).abs() <= step, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_file_reproduces_predictions() {
    let slides: Vec<_> = (0..3)
        .map(|i| {
            let s = generate_wsi(&small(10 + i)).unwrap();
            prepare_slide(&format!("s{i}"), &s.image, &s.labels, &prep()).unwrap()
        })
        .collect();
    let train_set: Vec<_> = slides[..2].iter().flat_map(|s| s.patches.clone()).collect();
    let val_set = slides[2].patches.clone();
    let cfg = TrainConfig { max_epochs: 2, batch_size: 8, dfb_norm: 20.0, ..Default::default() };
    let state = NetworkState::new(Architecture::compact(16), FusionMode::DfbFeature, 1, cfg.dfb_norm).unwrap();
    let out = train(state, &train_set, &val_set, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("models/m.ckpt");
    write_checkpoint(&path, &out.best).unwrap();
    let loaded = read_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.best);
    assert_eq!(predict(&loaded, &val_set).unwrap(), predict(&out.best, &val_set).unwrap());
}
