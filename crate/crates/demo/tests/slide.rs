use dfbpath_demo::Slide;

fn slide(seed: u64, border: bool) -> Slide {
    Slide::new(seed, 384, 12.0, border).unwrap_or_else(|_| panic!("slide {seed} generates"))
}

#[test]
fn same_seed_same_pixels() {
    let (a, b) = (slide(7, false), slide(7, false));
    assert_eq!(a.image_rgba(), b.image_rgba());
    assert_eq!(a.dfb_rgba(false), b.dfb_rgba(false));
    assert_ne!(a.image_rgba(), slide(8, false).image_rgba());
}

#[test]
fn histogram_rows_are_distributions() {
    let s = slide(2, false);
    let h = s.histogram(3.0).unwrap_or_else(|_| panic!("histogram"));
    let bins = h.len() / 3;
    assert!(bins > 0);
    for row in h.chunks(bins) {
        let total: f64 = row.iter().sum();
        assert!(total == 0.0 || (total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn border_flag_never_shrinks_distances() {
    let (off, on) = (slide(5, false), slide(5, true));
    assert!(on.max_dfb() >= off.max_dfb());
    assert!(off.max_relative_error() <= 0.10 && on.max_relative_error() <= 0.10);
    assert_eq!(off.labels_rgba().len(), off.low_width() * off.low_height() * 4);
}
