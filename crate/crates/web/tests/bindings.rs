use nfseg_web::*;

#[test]
fn scene_buffers_cover_every_pixel() {
    let s = render_scene(3, 64).unwrap();
    assert_eq!(s.size(), 64);
    assert_eq!(s.image_rgba().len(), 64 * 64 * 4);
    assert_eq!(s.mask_rgba().len(), 64 * 64 * 4);
    assert_eq!(s.class_counts().iter().sum::<u32>(), 64 * 64);
    assert_eq!(class_names().len(), s.class_counts().len());
    assert_eq!(class_palette().len(), 3 * class_names().len());
    assert!(render_scene(3, 8).is_err());
}

#[test]
fn fourier_rows_start_and_end_at_known_values() {
    let v = fourier_curves(1, 3).unwrap();
    assert_eq!(v.len(), 3 * 4);
    // x = 0: sines 0, cosines 1.
    assert_eq!(&v[..4], &[0.0, 0.0, 1.0, 1.0]);
    // x = 0.5: sin(pi/2) = 1, cos(pi) = -1.
    assert!((v[4] - 1.0).abs() < 1e-12 && (v[7] + 1.0).abs() < 1e-12);
    assert!(fourier_curves(2, 1).is_err());
}

#[test]
fn receptive_fields() {
    assert_eq!(stack_receptive_field(&[3, 3], &[1, 1]), Ok(5));
    assert_eq!(resnet34_receptive_field(), 899);
    assert!(stack_receptive_field(&[3], &[]).is_err());
}
