use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spliceradar::data::{
    default_model_specs, holdout_count, load_image, make_splice, random_ellipse_mask,
    sample_patches, write_corpus, write_splice_set, Corpus, Image, LabeledImage, Split,
    SynthConfig, PATCH,
};

#[test]
fn splits_partition_each_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        models: 3,
        images_per_model: 10,
        size: 80,
        seed: 2,
        val_fraction: 0.2,
        test_fraction: 0.1,
        ..SynthConfig::default()
    };
    let manifest = write_corpus(dir.path(), &config, false).unwrap();
    let s = &manifest.splits;
    let all: HashSet<&String> = manifest.images.iter().map(|i| &i.path).collect();
    let mut seen = HashSet::new();
    for p in s.train.iter().chain(&s.val).chain(&s.test) {
        assert!(seen.insert(p), "{p} is in two splits");
    }
    assert_eq!(seen, all);
    assert_eq!(manifest.images.len(), 30);
    let corpus = Corpus::open(dir.path()).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let labels: HashSet<usize> = corpus
            .load_split(split)
            .unwrap()
            .iter()
            .map(|i| i.label)
            .collect();
        assert_eq!(labels.len(), 3, "{split:?} lacks a model");
    }
    let img = load_image(&dir.path().join(&s.train[0])).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (80, 80, 3));
}

#[test]
fn splice_set_masks_are_binary_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let specs = default_model_specs(3, 1);
    let records = write_splice_set(dir.path(), &specs, 4, 96, 7).unwrap();
    assert_eq!(records.len(), 4);
    for r in &records {
        assert_ne!(r.host_model, r.donor_model);
        assert!((0.10..=0.30).contains(&r.mask_area), "{r:?}");
        let mask = load_image(&dir.path().join("masks").join(format!("{}.png", r.name))).unwrap();
        assert_eq!(mask.channels(), 1);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let area = mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / (96.0 * 96.0);
        assert!((area - r.mask_area).abs() < 1e-12);
        let image = load_image(&dir.path().join("images").join(format!("{}.png", r.name))).unwrap();
        assert_eq!(
            (image.width(), image.height(), image.channels()),
            (96, 96, 3)
        );
    }
    assert!(dir.path().join("splices.json").exists());
    let again = tempfile::tempdir().unwrap();
    assert_eq!(
        write_splice_set(again.path(), &specs, 4, 96, 7).unwrap(),
        records
    );
    assert!(write_splice_set(again.path(), &specs[..1], 1, 96, 7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splice_takes_each_pixel_from_one_source(seed in any::<u64>(), w in 8usize..24, h in 8usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let host = Image::filled(w, h, 3, 0.25).unwrap();
        let donor = Image::filled(w, h, 3, 0.75).unwrap();
        let mask = random_ellipse_mask(w, h, 0.1, 0.3, &mut rng).unwrap();
        let (out, gt) = make_splice(&host, &donor, &mask).unwrap();
        for i in 0..w * h {
            let want = if gt.data()[i] == 1.0 { 0.75 } else { 0.25 };
            prop_assert!(out.data()[i * 3..i * 3 + 3].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn holdout_is_at_least_one_and_tracks_fraction(n in 1usize..10_000, f in 0.0001f64..0.5) {
        let k = holdout_count(n, f);
        prop_assert!(k >= 1);
        prop_assert!((k as f64 - (n as f64 * f)).abs() <= 1.0 || k == 1);
    }

    #[test]
    fn sampled_patches_lie_in_range(seed in any::<u64>(), count in 1usize..6) {
        let img = Image::new(80, 75, 3, (0..80 * 75 * 3).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let images = vec![LabeledImage::new(&img, 0).unwrap(), LabeledImage::new(&img, 1).unwrap()];
        let batch = sample_patches(&images, count, seed).unwrap();
        prop_assert_eq!(batch.patches.shape(), &[count, PATCH, PATCH, 3][..]);
        prop_assert!(batch.labels.iter().all(|&l| l < 2));
        prop_assert!(batch.patches.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
