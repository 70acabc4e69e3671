use obsnet_core::netpbm::{encode_pgm, encode_ppm, GrayImage, RgbImage};
use obsnet_core::synthdata::*;

#[test]
fn train_split_class_frequencies() {
    let mut counts = [0u64; 256];
    for i in 0..1000 {
        let s = scene_at(11, Split::Train, i);
        for &l in &s.labels {
            counts[l as usize] += 1;
        }
    }
    let total = (1000 * PIXELS) as f64;
    assert_eq!(counts[ANOMALY_ID as usize], 0);
    for c in 0..NUM_CLASSES {
        let frac = counts[c] as f64 / total;
        assert!(frac >= 0.02, "class {c} covers {frac:.4}");
    }
}

#[test]
fn test_scenes_carry_one_bounded_anomaly() {
    for i in 0..200 {
        let s = scene_at(3, Split::Test, i);
        let n = s.anomaly_pixels();
        assert!((MIN_ANOMALY_PIXELS..=MAX_ANOMALY_PIXELS).contains(&n), "scene {i}: {n}");
        assert!(s.labels.iter().zip(&s.ood_mask).all(|(&l, &m)| (l == ANOMALY_ID) == m));
    }
}

#[test]
fn anomaly_raster_grid_is_within_bounds() {
    for shape in AnomalyShape::all() {
        let n = shape.raster().len();
        assert!((MIN_ANOMALY_PIXELS..=MAX_ANOMALY_PIXELS).contains(&n), "{shape:?}: {n}");
    }
}

#[test]
fn scene_generation_is_deterministic() {
    let a = scene_at(42, Split::Test, 5);
    let b = scene_at(42, Split::Test, 5);
    assert_eq!(a, b);
    assert_ne!(a, scene_at(42, Split::Test, 6));
}

#[test]
fn images_are_quantized() {
    let s = scene_at(1, Split::Train, 0);
    assert!(s.image.iter().all(|&v| quantize(v) == v));
}

#[test]
fn files_round_trip_100_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(9, 50, 50);
    let digest = ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(digest, ds.content_digest());
}

#[test]
fn digest_is_stable_per_seed() {
    let a = Dataset::generate(4, 6, 6).content_digest();
    assert_eq!(a, Dataset::generate(4, 6, 6).content_digest());
    assert_ne!(a, Dataset::generate(5, 6, 6).content_digest());
    assert_eq!(a.len(), 64);
}

#[test]
fn manifest_rejects_garbage() {
    assert!(DatasetManifest::parse("seed=1\nn_train\n").is_err());
    assert!(DatasetManifest::parse("seed=x\n").is_err());
}

#[test]
fn netpbm_header_and_payload() {
    let black = RgbImage {
        width: 2,
        height: 2,
        data: vec![0; 12],
    };
    let mut expected = b"P6\n2 2\n255\n".to_vec();
    expected.extend([0u8; 12]);
    assert_eq!(encode_ppm(&black), expected);

    let gray = GrayImage {
        width: 2,
        height: 2,
        data: vec![0, 255, 5, 2],
    };
    assert_eq!(encode_pgm(&gray), b"P5\n2 2\n255\n\x00\xff\x05\x02");
}

#[test]
fn flip_is_an_involution_and_mirrors_labels() {
    let s = scene_at(2, Split::Test, 1);
    let f = hflip(&s);
    assert_eq!(hflip(&f), s);
    for r in 0..HEIGHT {
        for c in 0..WIDTH {
            assert_eq!(f.labels[r * WIDTH + c], s.labels[r * WIDTH + WIDTH - 1 - c]);
        }
    }
}

#[test]
fn identity_crop_only_pads() {
    let s = scene_at(2, Split::Train, 3);
    let a = augment_with(&s, Augmentation::IDENTITY_CROP);
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            let p = y * WIDTH + x;
            if y < CROP && x < CROP {
                assert_eq!(a.labels[p], s.labels[p]);
                assert_eq!(a.image[p], s.image[p]);
            } else {
                assert_eq!(a.labels[p], IGNORE_ID);
                assert_eq!(a.image[p], 0.0);
            }
        }
    }
}
