use nas_core::data::{
    count_correct, decode_labels, encode_images, encode_labels, generate, generate_synthetic, load_raw, split,
    write_raw, Dataset, Normalizer, SyntheticConfig,
};
use nas_core::tensor::{Shape, Tensor};
use nas_core::Error;
use proptest::prelude::*;

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(7, 120, 3, 16).unwrap();
    let b = generate_synthetic(7, 120, 3, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!(encode_images(&a).unwrap(), encode_images(&b).unwrap());
    assert_ne!(a, generate_synthetic(8, 120, 3, 16).unwrap());
}

#[test]
fn classes_are_balanced() {
    let d = generate_synthetic(0, 300, 3, 16).unwrap();
    assert_eq!(d.class_counts(), vec![100, 100, 100]);
    let d = generate_synthetic(0, 301, 4, 8).unwrap();
    let counts = d.class_counts();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
}

#[test]
fn noiseless_classes_are_separated_by_their_centroids() {
    let cfg = SyntheticConfig {
        seed: 3,
        num_samples: 200,
        classes: 2,
        size: 16,
        channels: 3,
        noise: 0.0,
    };
    let d = generate(&cfg).unwrap();
    let n = d.sample_len();
    let mut centroids = vec![vec![0.0f64; n]; 2];
    for i in 0..d.len() {
        for (c, v) in centroids[d.label(i)].iter_mut().zip(d.image(i)) {
            *c += v as f64;
        }
    }
    for (c, count) in centroids.iter_mut().zip(d.class_counts()) {
        c.iter_mut().for_each(|v| *v /= count as f64);
    }
    let correct = (0..d.len())
        .filter(|&i| {
            let img = d.image(i);
            let dist = |c: &Vec<f64>| c.iter().zip(&img).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let nearest = if dist(&centroids[0]) <= dist(&centroids[1]) {
                0
            } else {
                1
            };
            nearest == d.label(i)
        })
        .count();
    assert_eq!(correct, d.len());
}

#[test]
fn invalid_generator_arguments_are_configuration_errors() {
    for (classes, size) in [(1, 16), (3, 12 + 2), (3, 4), (257, 16)] {
        assert!(matches!(
            generate_synthetic(0, 10, classes, size),
            Err(Error::Config(_))
        ));
    }
    let cfg = SyntheticConfig {
        noise: f32::NAN,
        ..SyntheticConfig::default()
    };
    assert!(generate(&cfg).is_err());
}

proptest! {
    #[test]
    fn pixels_scale_into_unit_interval(seed in any::<u64>(), classes in 2usize..6) {
        let d = generate_synthetic(seed, 12, classes, 8).unwrap();
        for i in 0..d.len() {
            prop_assert!(d.image(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(d.label(i) < classes);
        }
    }
}

#[test]
fn raw_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("x.img"), dir.path().join("x.lab"));
    let d = generate_synthetic(5, 50, 3, 8).unwrap();
    write_raw(&d, &img, &lab).unwrap();
    assert_eq!(load_raw(&img, &lab, Some(3)).unwrap(), d);
    assert_eq!(load_raw(&img, &lab, None).unwrap(), d);
}

#[test]
fn truncated_labels_report_the_offset() {
    let d = generate_synthetic(5, 10, 2, 8).unwrap();
    let bytes = encode_labels(&d).unwrap();
    assert_eq!(bytes.len(), 18);
    for cut in [17, 12, 6] {
        match decode_labels(&bytes[..cut]) {
            Err(Error::Load { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("{other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[3] = b'X';
    assert!(matches!(decode_labels(&bad), Err(Error::Load { offset: 0, .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_labels(&long), Err(Error::Load { offset: 18, .. })));
}

#[test]
fn count_mismatch_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("a"), dir.path().join("b"));
    let d = generate_synthetic(5, 10, 2, 8).unwrap();
    std::fs::write(&img, encode_images(&d).unwrap()).unwrap();
    std::fs::write(&lab, encode_labels(&d.subset(&[0, 1, 2])).unwrap()).unwrap();
    assert!(matches!(load_raw(&img, &lab, None), Err(Error::Load { .. })));
}

#[test]
fn hand_built_grayscale_fixture() {
    let mut images = b"ACAI".to_vec();
    for v in [2u32, 1, 8, 8] {
        images.extend_from_slice(&v.to_le_bytes());
    }
    let pixels: Vec<u8> = (0..128).map(|i| (i * 2) as u8).collect();
    images.extend_from_slice(&pixels);
    let mut labels = b"ACAL".to_vec();
    labels.extend_from_slice(&2u32.to_le_bytes());
    labels.extend_from_slice(&[1, 0]);
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("g.img"), dir.path().join("g.lab"));
    std::fs::write(&img, &images).unwrap();
    std::fs::write(&lab, &labels).unwrap();
    let d = load_raw(&img, &lab, None).unwrap();
    assert_eq!((d.len(), d.channels, d.height, d.width, d.classes), (2, 1, 8, 8, 2));
    assert_eq!(d.pixels(), &pixels[..]);
    assert_eq!((d.label(0), d.label(1)), (1, 0));
    assert_eq!(d.image(1)[0], 128.0 / 255.0);
    assert_eq!(d.image(0)[63], 126.0 / 255.0);
}

fn two_class(n: usize) -> Dataset {
    let pixels = (0..n).map(|i| i as u8).collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    Dataset::new(1, 1, 1, 2, pixels, labels).unwrap()
}

#[test]
fn split_is_stratified_and_exhaustive() {
    let d = two_class(100);
    let (a, b) = split(&d, 0.5, 1).unwrap();
    assert_eq!(a.class_counts(), vec![25, 25]);
    assert_eq!(b.class_counts(), vec![25, 25]);
    let mut all: Vec<u8> = a.pixels().iter().chain(b.pixels()).copied().collect();
    all.sort();
    assert_eq!(all, d.pixels());
}

#[test]
fn split_depends_only_on_the_seed() {
    let pixels: Vec<u8> = (0..1000).map(|i| (i % 251) as u8).collect();
    let labels = (0..1000).map(|i| (i % 4) as u8).collect();
    let d = Dataset::new(1, 1, 1, 4, pixels, labels).unwrap();
    let (a1, b1) = split(&d, 0.3, 42).unwrap();
    let (a2, b2) = split(&d, 0.3, 42).unwrap();
    assert_eq!((&a1, &b1), (&a2, &b2));
    let (a3, _) = split(&d, 0.3, 43).unwrap();
    assert_ne!(a1, a3);
    assert_eq!(a1.len(), 300);
}

#[test]
fn empty_split_parts_are_rejected() {
    let d = two_class(4);
    assert!(matches!(split(&d, 0.1, 0), Err(Error::Config(_))));
    assert!(split(&d, 0.0, 0).is_err());
    assert!(split(&d, 1.0, 0).is_err());
}

#[test]
fn normalizer_standardizes_the_fitted_set() {
    let d = generate_synthetic(2, 60, 3, 8).unwrap();
    let norm = Normalizer::fit(&d).unwrap();
    let b = norm.batch(&d, &(0..60).collect::<Vec<_>>()).unwrap();
    let plane = 64;
    for c in 0..3 {
        let vals: Vec<f64> = b
            .images
            .data()
            .chunks(plane)
            .enumerate()
            .filter(|(i, _)| i % 3 == c)
            .flat_map(|(_, ch)| ch.iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(
            mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3,
            "channel {c}: {mean} {var}"
        );
    }
}

#[test]
fn argmax_counting() {
    let logits = Tensor::new(
        Shape::new(3, 3, 1, 1),
        vec![0.1, 0.9, 0.0, 2.0, 2.0, 1.0, -1.0, -2.0, -0.5],
    )
    .unwrap();
    assert_eq!(count_correct(&logits, &[1, 0, 2]), 3);
    assert_eq!(count_correct(&logits, &[1, 1, 0]), 1);
}
