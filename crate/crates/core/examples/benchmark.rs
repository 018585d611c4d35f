//! Runs the default synthetic benchmark and prints the results table.
//!
//! cargo run --release -p dfbpath --example benchmark [-- <benchmark.json>]

use std::time::Instant;

use dfbpath::experiment::{Arm, Benchmark};
use dfbpath::metrics::{dfb_class_histogram, RecallAveraging};

fn main() -> dfbpath::Result<()> {
    let bench: Benchmark = match std::env::args().nth(1) {
        Some(p) => dfbpath::io::read_json(p.as_ref())?,
        None => Benchmark::default(),
    };
    let t0 = Instant::now();
    let slides = bench.prepare()?;
    let n: usize = slides.iter().map(|s| s.patches.len()).sum();
    let mut counts = [0usize; 3];
    for p in slides.iter().flat_map(|s| &s.patches) {
        counts[p.label.index()] += 1;
    }
    println!("{} slides, {n} patches {counts:?}, prepared in {:.1?}", slides.len(), t0.elapsed());
    let recs: Vec<_> = slides.iter().flat_map(|s| &s.patches).map(|p| (p.dfb_mean, p.label)).collect();
    let hist = dfb_class_histogram(&recs, 8.0)?;
    for (c, h) in hist.per_class.iter().enumerate() {
        println!("class {c} dfb histogram (bin 8): {:?}", h.iter().map(|v| (v * 100.0).round()).collect::<Vec<_>>());
    }

    let t1 = Instant::now();
    let result = dfbpath::experiment::run_cross_validation(&slides, &bench.experiment)?;
    println!("trained in {:.1?}", t1.elapsed());
    println!("{:<22} {:>6} {:>8} {:>7} {:>6} {:>6}", "method", "Acc.", "mRecall", "mPrec.", "F1", "mIoU");
    for a in &result.arms {
        let r = &a.report;
        println!(
            "{:<22} {:>6.3} {:>8.3} {:>7.3} {:>6.3} {:>6.3}",
            a.arm.title(),
            r.accuracy,
            r.m_recall,
            r.m_precision,
            r.f1,
            r.m_iou
        );
        println!(
            "   recall {:?} epochs {:?}",
            r.recall.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            a.runs.iter().map(|r| (r.best_epoch, r.log.len())).collect::<Vec<_>>()
        );
    }
    for &arm in &bench.experiment.arms {
        if arm == Arm::Baseline {
            continue;
        }
        let diff = result.recall_difference(arm, bench.experiment.bin_width, RecallAveraging::Macro)?;
        let above: Vec<f64> = diff.iter().filter(|b| b.bin_low >= bench.synth.lesion_band).map(|b| b.value).collect();
        let mean = above.iter().sum::<f64>() / above.len().max(1) as f64;
        println!("{arm}: mean recall difference over {} bins above the lesion band: {mean:.4}", above.len());
    }
    Ok(())
}
