mod common;

use std::path::PathBuf;

use common::rng;
use dida::data::augment::ALL_STRONG_OPS;
use dida::data::idx::{encode_images, encode_labels, parse_images, parse_labels, read_idx, write_idx};
use dida::data::{
    make_synthetic_domain, sample_batch, strong_augment, toy_digits, AugmentConfig, Images, LabeledSet, Normalization,
    Recipe, Sampler, Split, StrongAugment, UnlabeledSet, WeakAugment,
};
use proptest::prelude::*;

/// The shipped MNIST subset when present, otherwise generated toy digits.
fn digits(n: usize) -> LabeledSet {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let (img, lbl) = (root.join("mnist5k-images-idx3-ubyte"), root.join("mnist5k-labels-idx1-ubyte"));
    if img.is_file() && lbl.is_file() {
        let set = dida::data::load_labeled(&img, &lbl, "mnist", Split::Train, 10).unwrap();
        // the file is sorted by class; stride through it
        return set.subset(&(0..n.min(set.len())).map(|i| i * set.len() / n).collect::<Vec<_>>());
    }
    toy_digits(n, "toy", &mut rng(0)).unwrap()
}

proptest! {
    #[test]
    fn idx_bytes_round_trip(count in 1usize..6, rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = rng(seed);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..count).map(|_| r.random_range(0..10)).collect();
        let images = Images::new(count, rows, cols, pixels).unwrap();
        let bytes = encode_images(&images);
        prop_assert_eq!(parse_images(&bytes).unwrap(), images.clone());
        prop_assert_eq!(encode_images(&parse_images(&bytes).unwrap()), bytes);
        prop_assert_eq!(parse_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn normalisation_inverts(p in any::<u8>(), mean in 0.0f64..1.0, std in 0.05f64..2.0) {
        let norm = Normalization { mean, std, size: 32 };
        prop_assert!((norm.denormalize(norm.value(p)) - p as f64).abs() / 255.0 < 1e-6);
    }
}

#[test]
fn four_item_fixture_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
    let images = Images::new(4, 28, 28, pixels).unwrap();
    let labels = vec![3u8, 1, 4, 1];
    let (ip, lp) = (dir.path().join("f-images-idx3-ubyte"), dir.path().join("f-labels-idx1-ubyte"));
    write_idx(&images, Some(&labels), &ip, Some(&lp)).unwrap();
    let raw = std::fs::read(&ip).unwrap();
    assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28]);
    let (back, back_labels) = read_idx(&ip, Some(&lp)).unwrap();
    assert_eq!(back, images);
    assert_eq!(back_labels.unwrap(), labels);

    let (ip2, lp2) = (dir.path().join("g-images"), dir.path().join("g-labels"));
    write_idx(&back, Some(&labels), &ip2, Some(&lp2)).unwrap();
    assert_eq!(std::fs::read(&ip2).unwrap(), raw);
    assert_eq!(std::fs::read(&lp2).unwrap(), std::fs::read(&lp).unwrap());
}

#[test]
fn rotation_there_and_back_keeps_class_means() {
    let base = digits(500);
    for theta in [10.0, 30.0, 45.0] {
        let there = make_synthetic_domain(&base, &Recipe::Rotate(theta), 0);
        let back = make_synthetic_domain(&there, &Recipe::Rotate(-theta), 0);
        assert_eq!(back.labels, base.labels);
        for class in 0..10u8 {
            let idx: Vec<usize> = (0..base.len()).filter(|&i| base.labels[i] == class).collect();
            let mean = |set: &LabeledSet| {
                idx.iter().flat_map(|&i| set.images.image(i)).map(|&p| p as f64).sum::<f64>()
                    / (idx.len() * set.images.image_len()) as f64
            };
            let (m0, m1) = (mean(&base), mean(&back));
            assert!(
                (m1 - m0).abs() <= 0.02 * m0,
                "class {class}, rotate({theta}): mean {m0:.3} became {m1:.3}"
            );
        }
    }
}

#[test]
fn strong_view_changes_at_least_one_percent_of_pixels() {
    let set = digits(50);
    let cfg = StrongAugment::default();
    let (rows, cols) = (set.images.rows, set.images.cols);
    let (mut trials, mut changed) = (0, 0);
    for i in 0..set.len() {
        let img = set.images.image(i);
        if img.iter().all(|&p| p == 0) {
            continue;
        }
        for seed in 0..100 {
            let out = strong_augment(img, rows, cols, &cfg, &mut rng(seed));
            let diff = out.iter().zip(img).filter(|(a, b)| a != b).count();
            trials += 1;
            if diff * 100 >= img.len() {
                changed += 1;
            }
        }
    }
    let rate = changed as f64 / trials as f64;
    assert!(rate >= 0.99, "only {changed}/{trials} strong views changed 1% of pixels");
}

#[test]
fn every_strong_op_alone_is_seeded_and_shape_preserving() {
    let set = digits(4);
    let (rows, cols) = (set.images.rows, set.images.cols);
    for op in ALL_STRONG_OPS {
        let cfg = StrongAugment {
            ops: vec![op],
            num_ops: 1,
            erase_fraction: 0.0,
            ..Default::default()
        };
        for i in 0..set.len() {
            let a = strong_augment(set.images.image(i), rows, cols, &cfg, &mut rng(9));
            let b = strong_augment(set.images.image(i), rows, cols, &cfg, &mut rng(9));
            assert_eq!(a.len(), rows * cols);
            assert_eq!(a, b, "{op:?}");
        }
    }
}

/// Target images whose pixels all equal their own index.
fn id_images(n: usize) -> UnlabeledSet {
    let pixels = (0..n).flat_map(|i| std::iter::repeat_n(i as u8, 28 * 28)).collect();
    UnlabeledSet::new("ids", Images::new(n, 28, 28, pixels).unwrap()).unwrap()
}

#[test]
fn weak_and_strong_rows_come_from_the_same_image() {
    let sources = vec![digits(40)];
    let target = id_images(37);
    let aug = AugmentConfig {
        weak: WeakAugment { max_shift: 0, flip: false },
        strong: StrongAugment { num_ops: 0, erase_fraction: 0.0, ..Default::default() },
        augment_source: true,
    };
    let norm = Normalization::default();
    let mut data_rng = rng(3);
    let mut sampler = Sampler::new(&sources, &target, 8, aug, norm, &mut data_rng).unwrap();
    let plane = 32 * 32;
    let mut seen = vec![0usize; target.len()];
    for _ in 0..sampler.steps_per_epoch() * 2 {
        let b = sampler.next_batch(&mut data_rng).unwrap();
        for (j, &id) in b.target_ids.iter().enumerate() {
            seen[id] += 1;
            // the centre pixel of the padded 32x32 plane carries the id
            let centre = j * plane + 16 * 32 + 16;
            let expect = norm.value(id as u8);
            assert_eq!(b.target_weak.data()[centre], expect);
            assert_eq!(b.target_strong.data()[centre], expect);
        }
    }
    assert!(seen.iter().all(|&s| s >= 1), "some target image never sampled in two epochs");
}

#[test]
fn augmented_views_stay_aligned() {
    // default weak views shift by at most 2 px, so the centre survives
    let sources = vec![digits(40)];
    let target = id_images(20);
    let mut r = rng(8);
    let b = sample_batch(&sources, &target, 20, &AugmentConfig::default(), &Normalization::default(), &mut r).unwrap();
    let plane = 32 * 32;
    for (j, &id) in b.target_ids.iter().enumerate() {
        let centre = b.target_weak.data()[j * plane + 16 * 32 + 16];
        assert_eq!(centre, Normalization::default().value(id as u8));
    }
}

#[test]
fn batch_shapes_follow_k_times_b() {
    let norm = Normalization::default();
    let aug = AugmentConfig::default();
    let three: Vec<LabeledSet> = (0..3).map(|_| digits(40)).collect();
    let target = digits(40).unlabeled();
    let b = sample_batch(&three, &target, 16, &aug, &norm, &mut rng(1)).unwrap();
    assert_eq!(b.source_x.shape(), &[48, 1, 32, 32]);
    assert_eq!(b.source_y.len(), 48);
    assert_eq!(b.target_weak.shape(), &[16, 1, 32, 32]);
    assert_eq!(b.target_strong.shape(), &[16, 1, 32, 32]);

    let one = vec![digits(200)];
    let b = sample_batch(&one, &target, 128, &aug, &norm, &mut rng(1)).unwrap();
    assert_eq!(b.source_x.shape()[0], 128);
    assert_eq!(b.target_ids.len(), 128);
}

#[test]
fn same_seed_same_batch() {
    let sources = vec![digits(64)];
    let target = digits(64).unlabeled();
    let draw = |seed| {
        sample_batch(&sources, &target, 16, &AugmentConfig::default(), &Normalization::default(), &mut rng(seed))
            .unwrap()
    };
    let (a, b, c) = (draw(5), draw(5), draw(6));
    assert_eq!(a.source_x.data(), b.source_x.data());
    assert_eq!(a.target_strong.data(), b.target_strong.data());
    assert_eq!(a.target_ids, b.target_ids);
    assert_ne!(a.target_strong.data(), c.target_strong.data());
}

#[test]
fn recipes_preserve_labels_and_tag_the_domain() {
    let base = digits(30);
    let shifted = make_synthetic_domain(&base, &"invert+noise(0.2)".parse().unwrap(), 4);
    assert_eq!(shifted.labels, base.labels);
    assert!(shifted.domain.ends_with("invert+noise(0.2)"), "{}", shifted.domain);
    assert_eq!(make_synthetic_domain(&base, &Recipe::Noise(0.0), 4).images, base.images);
    assert!("blur(2)".parse::<Recipe>().is_err());
}
