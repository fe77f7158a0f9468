use feallm_core::region_cropper::{
    crop_region, crop_regions, crop_window, extract_window, resize_bilinear, resize_bilinear_to, CropMode, CropSpec,
    Direction, Fraction, ImageTensor, PixelWindow, REGION_SIZE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent statement of the window rule: keep `floor(f * side)` pixels
/// from the named edge(s), the full extent along any axis not named.
fn expected_window(h: usize, w: usize, direction: &str, fraction: f64) -> PixelWindow {
    let kh = (fraction * h as f64).floor() as usize;
    let kw = (fraction * w as f64).floor() as usize;
    let rows = if direction.starts_with("top") {
        (0, kh)
    } else if direction.starts_with("bottom") {
        (h - kh, h)
    } else {
        (0, h)
    };
    let cols = if direction.ends_with("left") {
        (0, kw)
    } else if direction.ends_with("right") {
        (w - kw, w)
    } else {
        (0, w)
    };
    PixelWindow {
        row_start: rows.0,
        row_end: rows.1,
        col_start: cols.0,
        col_end: cols.1,
    }
}

fn fraction_value(f: Fraction) -> f64 {
    match f {
        Fraction::Half => 0.5,
        Fraction::ThreeQuarters => 0.75,
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn all_windows_of_96_and_97_follow_the_rule() {
    for side in [96, 97] {
        for spec in CropSpec::canonical() {
            let got = crop_window(side, side, spec, CropMode::Strip).unwrap();
            let want = expected_window(side, side, spec.direction.name(), fraction_value(spec.fraction));
            assert_eq!(got, want, "{side}: {}", spec.label());
        }
    }
}

#[test]
fn documented_windows() {
    let top_half = CropSpec {
        direction: Direction::Top,
        fraction: Fraction::Half,
    };
    let w = crop_window(96, 96, top_half, CropMode::Strip).unwrap();
    assert_eq!((w.row_start, w.row_end, w.col_start, w.col_end), (0, 48, 0, 96));
    let br = CropSpec {
        direction: Direction::BottomRight,
        fraction: Fraction::ThreeQuarters,
    };
    let w = crop_window(97, 97, br, CropMode::Strip).unwrap();
    assert_eq!((w.row_start, w.row_end, w.col_start, w.col_end), (25, 97, 25, 97));
}

#[test]
fn canonical_order_and_labels() {
    let labels: Vec<String> = CropSpec::canonical().iter().map(CropSpec::label).collect();
    assert_eq!(labels.len(), 16);
    assert_eq!(labels[0], "top_1-2");
    assert_eq!(labels[1], "top_3-4");
    assert_eq!(labels[15], "bottom-right_3-4");
}

#[test]
fn half_crops_of_a_48_image_are_resized_raw_windows() {
    let image = random_image(48, 48, 3);
    let set = crop_regions(&image).unwrap();
    for spec in CropSpec::canonical() {
        if spec.fraction != Fraction::Half {
            continue;
        }
        let win = expected_window(48, 48, spec.direction.name(), 0.5);
        let mut raw = Vec::new();
        for y in win.row_start..win.row_end {
            for x in win.col_start..win.col_end {
                for c in 0..3 {
                    raw.push(image.pixel(y, x, c));
                }
            }
        }
        let raw = ImageTensor::window(win.height(), win.width(), raw).unwrap();
        let expect = resize_bilinear_to(&raw, REGION_SIZE, REGION_SIZE);
        assert_eq!(set.region(spec).unwrap().data(), expect.data(), "{}", spec.label());
    }
}

fn max_abs(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_mirror_symmetry(h: usize, w: usize, seed: u64) {
    let image = random_image(h, w, seed);
    let original = crop_regions(&image).unwrap();
    let flipped_h = crop_regions(&image.mirror_horizontal()).unwrap();
    let flipped_v = crop_regions(&image.mirror_vertical()).unwrap();
    for spec in CropSpec::canonical() {
        let across_h = CropSpec {
            direction: spec.direction.mirrored_horizontal(),
            ..spec
        };
        let a = flipped_h.region(spec).unwrap();
        let b = original.region(across_h).unwrap().mirror_horizontal();
        assert!(max_abs(a, &b) < 1e-6, "{h}x{w} horizontal {}", spec.label());

        let across_v = CropSpec {
            direction: spec.direction.mirrored_vertical(),
            ..spec
        };
        let a = flipped_v.region(spec).unwrap();
        let b = original.region(across_v).unwrap().mirror_vertical();
        assert!(max_abs(a, &b) < 1e-6, "{h}x{w} vertical {}", spec.label());
    }
}

#[test]
fn mirrored_images_swap_opposite_regions() {
    check_mirror_symmetry(96, 96, 1);
    check_mirror_symmetry(97, 97, 2);
}

#[test]
fn every_region_is_48_square() {
    let set = crop_regions(&random_image(97, 61, 4)).unwrap();
    assert_eq!(set.len(), 16);
    for r in &set.regions {
        assert_eq!((r.height(), r.width()), (REGION_SIZE, REGION_SIZE));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn windows_follow_rule_at_any_size(h in 4usize..300, w in 4usize..300) {
        for spec in CropSpec::canonical() {
            let got = crop_window(h, w, spec, CropMode::Strip).unwrap();
            prop_assert_eq!(got, expected_window(h, w, spec.direction.name(), fraction_value(spec.fraction)));
            prop_assert!(got.row_end <= h && got.col_end <= w);
            prop_assert!(got.height() >= 1 && got.width() >= 1);
        }
    }

    #[test]
    fn square_mode_stays_inside(h in 4usize..200, w in 4usize..200) {
        for spec in CropSpec::canonical() {
            let got = crop_window(h, w, spec, CropMode::Square).unwrap();
            prop_assert_eq!(got.height(), spec.fraction.of(h));
            prop_assert_eq!(got.width(), spec.fraction.of(w));
            prop_assert!(got.row_end <= h && got.col_end <= w);
        }
    }

    #[test]
    fn resize_keeps_constant_images_constant(h in 1usize..80, w in 1usize..80, v in 0.0f64..1.0) {
        let img = ImageTensor::window(h, w, vec![v; h * w * 3]).unwrap();
        let out = resize_bilinear(&img);
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }
}

#[test]
fn mirror_symmetry_over_random_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..12 {
        check_mirror_symmetry(rng.gen_range(4..120), rng.gen_range(4..120), seed);
    }
}

#[test]
fn crop_region_copies_window_pixels() {
    let image = random_image(20, 30, 5);
    let spec = CropSpec {
        direction: Direction::Right,
        fraction: Fraction::ThreeQuarters,
    };
    let win = crop_window(20, 30, spec, CropMode::Strip).unwrap();
    let crop = crop_region(&image, spec).unwrap();
    assert_eq!(crop.data(), extract_window(&image, &win).data());
    assert_eq!(crop.pixel(0, 0, 1), image.pixel(0, 8, 1));
}

#[test]
fn tiny_images_rejected() {
    assert!(ImageTensor::new(3, 10, vec![0.0; 90]).is_err());
    assert!(crop_window(1, 10, CropSpec::canonical()[0], CropMode::Strip).is_err());
}
