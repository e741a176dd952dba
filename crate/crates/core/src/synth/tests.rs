use super::*;

fn scene() -> SceneSpec {
    SceneSpec {
        bg_hue: 0.6,
        gradient_angle: 0.7,
        face_cx: 0.02,
        face_cy: -0.01,
        face_radius: 0.35,
        skin_tone: 0.2,
    }
}

fn glasses(style: GlassesStyle, darkness: f64, width: f64) -> ObjectSpec {
    ObjectSpec {
        present: true,
        style,
        width,
        darkness,
        tint: 0.3,
    }
}

fn pixel(img: &Tensor<f32>, x: usize, y: usize) -> [f32; 3] {
    let s = img.shape()[1];
    std::array::from_fn(|c| img.data()[c * s * s + y * s + x])
}

fn to_px(frac: f64, size: usize) -> usize {
    (frac * size as f64) as usize
}

#[test]
fn rendering_is_pure_and_in_range() {
    for size in SUPPORTED_SIZES {
        let a = render_scene(&scene(), size).unwrap();
        let b = render_scene(&scene(), size).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, size, size]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(render_scene(&scene(), 48), Err(DataError::UnsupportedSize(48))));
}

#[test]
fn face_area_scales_with_radius_squared() {
    let size = 64;
    let mut s = scene();
    s.skin_tone = 0.0;
    let count = |radius: f64| {
        let mut spec = s;
        spec.face_radius = radius;
        let img = render_scene(&spec, size).unwrap();
        let mut bare = spec;
        bare.face_radius = 0.0;
        let bg = render_scene(&bare, size).unwrap();
        // Fractional coverage recovered from the blend against the bare background.
        let skin = [0.96f64, 0.80, 0.69];
        let plane = size * size;
        (0..plane)
            .map(|p| {
                let b = bg.data()[p] as f64;
                (img.data()[p] as f64 - b) / (skin[0] - b)
            })
            .sum::<f64>()
    };
    let ratio = count(0.4) / count(0.3);
    let expected = (0.4f64 / 0.3).powi(2);
    assert!((ratio / expected - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn shaded_lenses_darken_the_face() {
    let size = 64;
    let s = scene();
    let base = render_scene(&s, size).unwrap();
    let img = composite_object(&base, &s, &glasses(GlassesStyle::Shaded, 1.0, 0.05)).unwrap();
    let lens = pixel(&img, to_px(0.5 + s.face_cx + 0.17, size), to_px(0.5 + s.face_cy - 0.1, size));
    let cheek = pixel(&img, to_px(0.5 + s.face_cx, size), to_px(0.5 + s.face_cy + 0.15, size));
    for c in 0..3 {
        assert!(lens[c] < cheek[c], "channel {c}: {} vs {}", lens[c], cheek[c]);
    }
}

#[test]
fn compositing_leaves_unmasked_pixels_untouched() {
    let size = 32;
    let s = scene();
    let base = render_scene(&s, size).unwrap();
    for style in GlassesStyle::ALL {
        let obj = glasses(style, 0.7, 0.08);
        let img = composite_object(&base, &s, &obj).unwrap();
        let mask = sprite_mask(&s, style, obj.width, size).unwrap();
        let plane = size * size;
        let mut changed = 0;
        for p in 0..plane {
            let covered = mask.frame[p] + mask.interior[p] > 0.0;
            for c in 0..3 {
                let (a, b) = (img.data()[c * plane + p], base.data()[c * plane + p]);
                if !covered {
                    assert_eq!(a.to_bits(), b.to_bits());
                } else if a != b {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }
    let mut absent = glasses(GlassesStyle::Round, 0.5, 0.05);
    absent.present = false;
    assert!(matches!(composite_object(&base, &s, &absent), Err(DataError::AbsentObject)));
}

#[test]
fn round_and_square_frames_are_separable() {
    let size = 32;
    let s = scene();
    let base = render_scene(&s, size).unwrap();
    for darkness in [0.6, 0.8, 1.0] {
        for width in [0.05, 0.08, 0.12] {
            let a = composite_object(&base, &s, &glasses(GlassesStyle::Round, darkness, width)).unwrap();
            let b = composite_object(&base, &s, &glasses(GlassesStyle::Square, darkness, width)).unwrap();
            let l1 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .sum::<f64>()
                / a.numel() as f64;
            assert!(l1 > 0.005, "darkness {darkness} width {width}: {l1}");
        }
    }
}

#[test]
fn dataset_is_reproducible_and_sized_as_requested() {
    let (w1, o1) = make_dataset(5, 7, 16, 11).unwrap();
    let (w2, o2) = make_dataset(5, 7, 16, 11).unwrap();
    assert_eq!((w1.len(), o1.len()), (5, 7));
    assert_eq!(w1, w2);
    assert_eq!(o1, o2);
    assert!(w1.iter().all(|s| s.label == 1 && s.object.unwrap().present));
    assert!(o1.iter().all(|s| s.label == 0 && !s.object.unwrap().present));
    let (w3, _) = make_dataset(5, 7, 16, 12).unwrap();
    assert_ne!(w1, w3);
}

#[test]
fn specs_respect_their_ranges() {
    let (with, without) = sample_specs(500, 500, 3);
    let scenes = with.iter().map(|(s, _)| s).chain(&without);
    for s in scenes {
        assert!((0.0..1.0).contains(&s.bg_hue) && (0.0..1.0).contains(&s.skin_tone));
        assert!(s.face_cx.abs() <= 0.05 && s.face_cy.abs() <= 0.05);
        assert!((0.3..=0.4).contains(&s.face_radius));
    }
    for (_, o) in &with {
        assert!((0.05..=0.12).contains(&o.width) && (0.2..=1.0).contains(&o.darkness));
    }
}

#[test]
fn scene_and_object_factors_are_uncorrelated() {
    let (with, _) = sample_specs(10_000, 0, 7);
    let xs: Vec<f64> = with.iter().map(|(s, _)| s.bg_hue).collect();
    let ys: Vec<f64> = with.iter().map(|(_, o)| o.darkness).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert!(r.abs() < 0.05, "correlation {r}");
}

#[test]
fn with_object_samples_differ_from_counterfactual_only_under_the_sprite() {
    let (with, _) = make_dataset(6, 0, 32, 5).unwrap();
    for s in &with {
        let bare = s.counterfactual().unwrap().unwrap();
        let o = s.object.unwrap();
        let mask = sprite_mask(&s.scene.unwrap(), o.style, o.width, 32).unwrap();
        let plane = 32 * 32;
        for p in 0..plane {
            if mask.frame[p] + mask.interior[p] == 0.0 {
                for c in 0..3 {
                    assert_eq!(s.image.data()[c * plane + p], bare.data()[c * plane + p]);
                }
            }
        }
    }
}

#[test]
fn white_two_by_two_ppm_is_byte_exact() {
    let img = Tensor::full(&[3, 2, 2], 1.0f32);
    let mut expected = b"P6\n2 2\n255\n".to_vec();
    expected.extend(std::iter::repeat_n(0xFF, 12));
    assert_eq!(encode_ppm(&img).unwrap(), expected);
}

#[test]
fn ppm_round_trip_error_is_within_half_a_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = crate::rng::SplitMix64::new(99);
    let img = Tensor::new(&[3, 5, 7], (0..105).map(|_| rng.next_f64() as f32).collect()).unwrap();
    let path = dir.path().join("x.ppm");
    save_image(&path, &img).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back.shape(), img.shape());
    let worst = img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    assert!(worst <= 1.0 / 510.0 + 1e-7, "{worst}");
    assert!(encode_ppm(&Tensor::full(&[3, 1, 1], 1.5)).is_err());
}

#[test]
fn grayscale_is_replicated_to_three_channels() {
    let mut bytes = b"P5\n# handmade\n3 1\n255\n".to_vec();
    bytes.extend([0u8, 51, 255]);
    let img = decode_pnm(&bytes).unwrap();
    assert_eq!(img.shape(), &[3, 1, 3]);
    for c in 0..3 {
        assert_eq!(&img.data()[c * 3..c * 3 + 3], &[0.0, 0.2, 1.0]);
    }
}

#[test]
fn malformed_and_truncated_files_report_offsets() {
    match decode_pnm(b"P3\n1 1\n255\n") {
        Err(DataError::Malformed { offset: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
    match decode_pnm(b"P6\n2 x\n255\n") {
        Err(DataError::Malformed { offset: 5, .. }) => {}
        other => panic!("{other:?}"),
    }
    match decode_pnm(b"P6\n2 2\n65535\n") {
        Err(DataError::Malformed { offset, msg }) => {
            assert_eq!(offset, 7);
            assert!(msg.contains("maxval"));
        }
        other => panic!("{other:?}"),
    }
    let mut short = b"P6\n2 2\n255\n".to_vec();
    short.extend([0u8; 5]);
    match decode_pnm(&short) {
        Err(DataError::Truncated { offset: 16, expected: 7 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn folder_ingest_is_ordered_cropped_and_repeatable() {
    let root = tempfile::tempdir().unwrap();
    let with = root.path().join("with");
    let without = root.path().join("without");
    std::fs::create_dir_all(&with).unwrap();
    std::fs::create_dir_all(&without).unwrap();

    // 64 wide, 48 tall: left and right 8-column margins are red, centre is grey.
    let (w, h) = (64, 48);
    let mut data = vec![0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let margin = !(8..56).contains(&x);
            for c in 0..3 {
                data[c * w * h + y * w + x] = if margin { [1.0, 0.0, 0.0][c] } else { 0.5 };
            }
        }
    }
    let wide = Tensor::new(&[3, h, w], data).unwrap();
    save_image(with.join("b.ppm"), &wide).unwrap();
    save_image(with.join("a.ppm"), &Tensor::full(&[3, 32, 32], 0.0)).unwrap();
    std::fs::write(with.join("notes.txt"), "ignored").unwrap();
    save_image(without.join("z.ppm"), &Tensor::full(&[3, 16, 16], 1.0)).unwrap();

    let (a, b) = ingest_root(root.path(), 32).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(b.len(), 1);
    assert!(a[0].image.data().iter().all(|&v| v == 0.0));
    // Cropping removed the red margins entirely.
    let grey = (0.5f32 * 255.0).round() / 255.0;
    assert!(a[1].image.data().iter().all(|&v| v == grey));
    assert_eq!(a[1].image.shape(), &[3, 32, 32]);
    assert!(b[0].image.data().iter().all(|&v| v == 1.0));
    assert_eq!((a[0].label, b[0].label), (1, 0));

    let (a2, _) = ingest_root(root.path(), 32).unwrap();
    assert_eq!(a, a2);

    let empty = root.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(load_folder(&empty, 32, 0), Err(DataError::EmptyDirectory(_))));

    std::fs::write(without.join("y.ppm"), b"garbage").unwrap();
    let err = ingest_root(root.path(), 32).unwrap_err().to_string();
    assert!(err.contains("y.ppm"), "{err}");
}
