use synthadapt_web::{augment_preview_impl, gap_reduction, lambda_curve_impl, preset};

fn font_bytes() -> Option<Vec<u8>> {
    synthadapt::fonts::system_font_files()
        .into_iter()
        .find(|p| p.file_name().is_some_and(|n| n == "DejaVuSans.ttf"))
        .and_then(|p| std::fs::read(p).ok())
}

#[test]
fn preview_buffers_match_dimensions() {
    let Some(font) = font_bytes() else { return };
    let p = augment_preview_impl(&font, "minimum", "heavy", 48, 3).unwrap();
    assert_eq!(p.height(), 48);
    assert_eq!(p.clean_rgba().len(), 4 * 48 * p.clean_width());
    assert_eq!(p.augmented_rgba().len(), 4 * 48 * p.augmented_width());
    assert!(p.clean_rgba().chunks(4).all(|px| px[0] == px[1] && px[1] == px[2] && px[3] == 255));

    let same = augment_preview_impl(&font, "minimum", "heavy", 48, 3).unwrap();
    assert_eq!(same.augmented_rgba(), p.augmented_rgba());
    let id = augment_preview_impl(&font, "minimum", "identity", 48, 3).unwrap();
    assert_eq!(id.clean_rgba(), id.augmented_rgba());
}

#[test]
fn preview_rejects_bad_input() {
    assert!(preset("medium").is_err());
    assert!(augment_preview_impl(b"not a font", "a", "light", 48, 0).is_err());
}

#[test]
fn lambda_curve_endpoints() {
    let c = lambda_curve_impl("linear", 10.0, 2.0, 20.0, 5).unwrap();
    assert_eq!(c, vec![0.0, 1.0, 2.0, 2.0, 2.0]);
    let e = lambda_curve_impl("exponential", 10.0, 1.0, 10.0, 3).unwrap();
    assert_eq!(e[0], 0.0);
    assert!((e[2] - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-12);
    assert!(lambda_curve_impl("constant", 1.0, 1.0, 1.0, 1).is_err());
    assert!(lambda_curve_impl("cosine", 1.0, 1.0, 1.0, 4).is_err());
}

#[test]
fn gap_reduction_is_exported() {
    let g = gap_reduction(30.0, 20.0, 10.0).ok().unwrap();
    assert!((g - 50.0).abs() < 1e-12);
}
