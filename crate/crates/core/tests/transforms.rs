use mars_core::tensor::Tensor;
use mars_core::transforms::*;
use mars_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

include!("common/cases.rs");

fn smooth_image(n: usize) -> Tensor<f32> {
    let data = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f32, (i % n) as f32);
            0.5 + 0.25 * (x / 9.0).sin() * (y / 7.0).cos() + 0.1 * ((x + y) / 13.0).sin()
        })
        .collect();
    Tensor::from_vec(&[1, n, n], data)
}

pub fn same_seed_same_spec() {
    let r = TransformRanges::default();
    assert_eq!(sample_transform(7, &r, (64, 64)).unwrap(), sample_transform(7, &r, (64, 64)).unwrap());
}

pub fn collapsed_ranges_give_identity() {
    let t = sample_transform(3, &TransformRanges::identity(), (64, 64)).unwrap();
    assert_eq!(t, TransformSpec::identity((64, 64)));
}

pub fn invalid_ranges_rejected() {
    let bad = TransformRanges { brightness: (0.0, 1.0), ..Default::default() };
    assert!(matches!(sample_transform(0, &bad, (8, 8)), Err(Error::Config(_))));
    let bad = TransformRanges { max_translate_frac: 0.3, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = TransformRanges { brightness: (1.2, 1.1), ..Default::default() };
    assert!(bad.validate().is_err());
}

pub fn rotation_histogram_is_uniform() {
    // Pearson χ² with 36 bins (35 dof); critical value at α = 0.01 is 57.342.
    let r = TransformRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bins = [0usize; 36];
    let n = 10_000;
    for _ in 0..n {
        let t = r.sample(&mut rng, (64, 64));
        assert!((0.0..360.0).contains(&t.rotation_deg));
        bins[(t.rotation_deg / 10.0) as usize] += 1;
    }
    let expected = n as f64 / 36.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 57.342, "chi2 = {chi2}");
}

pub fn identity_is_exact() {
    let img = smooth_image(16);
    let out = apply_transform(&img, &TransformSpec::identity((16, 16))).unwrap();
    assert_eq!(out, img);
}

pub fn quarter_turn_on_two_by_two() {
    let img = Tensor::from_vec(&[1, 2, 2], vec![1.0 / 8.0, 2.0 / 8.0, 3.0 / 8.0, 4.0 / 8.0]);
    let out = apply_transform(&img, &TransformSpec::rotation(90.0, (2, 2))).unwrap();
    let got: Vec<f32> = out.data.iter().map(|v| v * 8.0).collect();
    assert_eq!(got, vec![2.0, 4.0, 1.0, 3.0]);
}

pub fn brightness_scales_constant_patch() {
    let img = Tensor::full(&[1, 4, 4], 0.3f32);
    let t = TransformSpec { brightness: 2.0, ..TransformSpec::identity((4, 4)) };
    let out = apply_transform(&img, &t).unwrap();
    assert!(out.data.iter().all(|&v| (v - 0.6).abs() < 1e-6));
    let t = TransformSpec { brightness: 5.0, ..t };
    assert!(apply_transform(&img, &t).unwrap().data.iter().all(|&v| v == 1.0));
}

pub fn empty_image_rejected() {
    let img = Tensor::<f32>::zeros(&[1, 0, 0]);
    assert!(matches!(apply_transform(&img, &TransformSpec::identity((1, 1))), Err(Error::Input(_))));
}

pub fn inverse_examples() {
    let id = TransformSpec::identity((64, 64));
    assert_eq!(id.invert_geometric(), id);
    let t = TransformSpec::translation(5.0, 0.0, (64, 64));
    let inv = t.invert_geometric();
    assert_eq!((inv.translate_x, inv.translate_y, inv.rotation_deg), (-5.0, 0.0, 0.0));
    let t = TransformSpec { rotation_deg: 30.0, translate_x: 4.0, translate_y: -2.0, ..id };
    assert!((t.invert_geometric().rotation_deg - 330.0).abs() < 1e-12);
}

pub fn round_trip_on_valid_mask() {
    let img = smooth_image(64);
    let t = TransformSpec { rotation_deg: 30.0, translate_x: 4.0, translate_y: -2.0, ..TransformSpec::identity((64, 64)) };
    let fwd = apply_transform(&img, &t).unwrap();
    let back = apply_transform(&fwd, &t.invert_geometric()).unwrap();
    let mask = valid_mask(&t, (64, 64));
    assert!(mask.count() > 64 * 64 / 2);
    let err = (0..64 * 64).filter(|&i| mask.mask[i]).map(|i| (back.data[i] - img.data[i]).abs()).fold(0.0, f32::max);
    assert!(err <= 0.02, "round-trip error {err}");
}

pub fn brightness_not_inverted() {
    let t = TransformSpec { brightness: 1.3, rotation_deg: 10.0, ..TransformSpec::identity((8, 8)) };
    assert_eq!(t.invert_geometric().brightness, 1.0);
}

pub fn rescale_examples() {
    let t = TransformSpec::translation(32.0, 0.0, (256, 256)).rescale_to_resolution((32, 32)).unwrap();
    assert_eq!(t.translate_x, 4.0);
    let t = TransformSpec::translation(10.0, -6.0, (64, 64)).rescale_to_resolution((32, 32)).unwrap();
    assert_eq!((t.translate_x, t.translate_y, t.ref_resolution), (5.0, -3.0, (32, 32)));
    let id = TransformSpec::identity((64, 64)).rescale_to_resolution((7, 7)).unwrap();
    assert!(id.is_geometric_identity());
    assert!(TransformSpec::identity((64, 64)).rescale_to_resolution((0, 4)).is_err());
}

pub fn mask_examples() {
    assert_eq!(valid_mask(&TransformSpec::identity((32, 32)), (32, 32)).count(), 32 * 32);

    let m = valid_mask(&TransformSpec::rotation(45.0, (32, 32)), (32, 32));
    assert!(!m.get(0, 0) && !m.get(0, 31) && !m.get(31, 0) && !m.get(31, 31));
    assert!(m.get(16, 16) && m.get(15, 15));

    // Coordinate oracle: content shifted right by 8 cannot be recovered in
    // the 8 right-most columns.
    let m = valid_mask(&TransformSpec::translation(8.0, 0.0, (32, 32)), (32, 32));
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(m.get(y, x), x + 8 <= 31, "pixel ({y}, {x})");
        }
    }
}

pub fn warps_are_deterministic() {
    let img = smooth_image(32);
    let t = sample_transform(11, &TransformRanges::default(), (32, 32)).unwrap();
    assert_eq!(apply_transform(&img, &t).unwrap(), apply_transform(&img, &t).unwrap());
}

proptest! {
    #[test]
    fn inverse_is_involution(rot in 0.0f64..360.0, dx in -6.4f64..6.4, dy in -6.4f64..6.4) {
        let t = TransformSpec { brightness: 1.0, rotation_deg: rot, translate_x: dx, translate_y: dy, ref_resolution: (64, 64) };
        let tt = t.invert_geometric().invert_geometric();
        let drot = (tt.rotation_deg - t.rotation_deg).rem_euclid(360.0);
        prop_assert!(drot.min(360.0 - drot) < 1e-9);
        prop_assert!((tt.translate_x - dx).abs() < 1e-9 && (tt.translate_y - dy).abs() < 1e-9);
    }

    #[test]
    fn rescale_composes(dx in -25.6f64..25.6, dy in -25.6f64..25.6) {
        let t = TransformSpec::translation(dx, dy, (256, 256));
        let a = t.rescale_to_resolution((64, 64)).unwrap().rescale_to_resolution((32, 32)).unwrap();
        let b = t.rescale_to_resolution((32, 32)).unwrap();
        prop_assert!((a.translate_x - b.translate_x).abs() < 1e-12);
        prop_assert!((a.translate_y - b.translate_y).abs() < 1e-12);
    }

    #[test]
    fn round_trip_bound(rot in 0.0f64..360.0, dx in -6.0f64..6.0, dy in -6.0f64..6.0) {
        let img = smooth_image(48);
        let t = TransformSpec { brightness: 1.0, rotation_deg: rot, translate_x: dx, translate_y: dy, ref_resolution: (48, 48) };
        let back = apply_transform(&apply_transform(&img, &t).unwrap(), &t.invert_geometric()).unwrap();
        let mask = valid_mask(&t, (48, 48));
        for i in 0..48 * 48 {
            if mask.mask[i] {
                prop_assert!((back.data[i] - img.data[i]).abs() <= 0.02);
            }
        }
    }
}

cases! {
    same_seed_same_spec,
    collapsed_ranges_give_identity,
    invalid_ranges_rejected,
    rotation_histogram_is_uniform,
    identity_is_exact,
    quarter_turn_on_two_by_two,
    brightness_scales_constant_patch,
    empty_image_rejected,
    inverse_examples,
    round_trip_on_valid_mask,
    brightness_not_inverted,
    rescale_examples,
    mask_examples,
    warps_are_deterministic,
}
