use super::*;
use crate::image::dilate_n;

fn square_sample(id: &str, label: u8, size: usize, x0: usize, side: usize) -> Sample {
    Sample {
        id: id.into(),
        image: GrayImage::new(size, size, (0..size * size).map(|i| (i % 200 + 20) as u8).collect()).unwrap(),
        mask: BinaryMask::from_fn(size, size, |x, y| {
            (x0..x0 + side).contains(&x) && (x0..x0 + side).contains(&y)
        }),
        label,
    }
}

fn fake_samples(benign: usize, malignant: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for i in 0..benign {
        out.push(square_sample(&format!("b{i:05}"), 0, 16, 4, 6));
    }
    for i in 0..malignant {
        out.push(square_sample(&format!("m{i:05}"), 1, 16, 4, 6));
    }
    out
}

fn support(t: &Tensor) -> Vec<bool> {
    let plane = t.len() / 3;
    t.data()[..plane].iter().map(|&v| v != 0.0).collect()
}

#[test]
fn split_sizes_follow_floor_rounding() {
    let spec = SplitSpec::default();
    assert_eq!(spec.sizes(1108), (1108 - 166 - 166, 166, 166));
    assert_eq!(spec.sizes(1021), (1021 - 153 - 153, 153, 153));
    let split = stratified_split(fake_samples(1108, 1021), &spec).unwrap();
    assert_eq!(split.test.len(), 319);
    assert_eq!(split.val.len(), 319);
    assert_eq!(split.train.len(), 1491);
}

#[test]
fn split_is_a_deterministic_stratified_partition() {
    let samples = fake_samples(60, 40);
    let spec = SplitSpec::default();
    let a = stratified_split(samples.clone(), &spec).unwrap();
    let b = stratified_split(samples.clone(), &spec).unwrap();
    assert_eq!(manifest_csv(&a), manifest_csv(&b));
    let mut ids: Vec<&str> = a.parts().iter().flat_map(|(_, p)| p.iter().map(|s| s.id.as_str())).collect();
    ids.sort_unstable();
    let mut all: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    all.sort_unstable();
    assert_eq!(ids, all);
    for (_, part) in a.parts() {
        let pos = part.iter().filter(|s| s.label == 1).count() as f64;
        let expected = part.len() as f64 * 0.4;
        assert!((pos - expected).abs() <= 1.0, "{pos} vs {expected}");
        assert!(part.windows(2).all(|w| w[0].id < w[1].id));
    }
    let other = stratified_split(samples, &SplitSpec { seed: 7, ..spec }).unwrap();
    assert_ne!(manifest_csv(&a), manifest_csv(&other));
}

#[test]
fn split_rejects_tiny_classes() {
    assert!(stratified_split(fake_samples(3, 30), &SplitSpec::default()).is_err());
}

#[test]
fn views_of_a_square_lesion() {
    let s = square_sample("a", 1, 224, 102, 20);
    let v = make_views::<rand_chacha::ChaCha8Rng>(&s, None).unwrap();
    assert_eq!(v.erosion_iterations, 5);
    assert_eq!(v.whole.shape(), &[3, 224, 224]);
    let core = BinaryMask::from_fn(224, 224, |x, y| (107..117).contains(&x) && (107..117).contains(&y));
    assert_eq!(support(&v.core), core.bits().iter().map(|&b| b == 1).collect::<Vec<_>>());
    let ring = dilate_n(&s.mask, 5).and_not(&s.mask);
    assert_eq!(support(&v.boundary), ring.bits().iter().map(|&b| b == 1).collect::<Vec<_>>());
    assert_eq!(v, make_views::<rand_chacha::ChaCha8Rng>(&s, None).unwrap());
}

#[test]
fn small_lesion_falls_back_to_fewer_erosions() {
    let s = square_sample("a", 0, 32, 10, 9);
    let v = make_views::<rand_chacha::ChaCha8Rng>(&s, None).unwrap();
    assert_eq!(v.erosion_iterations, 4);
    assert_eq!(support(&v.core).iter().filter(|&&b| b).count(), 1);
    let mut empty = s.clone();
    empty.mask = BinaryMask::empty(32, 32);
    assert!(make_views::<rand_chacha::ChaCha8Rng>(&empty, None).is_err());
}

#[test]
fn augmented_views_stay_aligned() {
    let s = square_sample("a", 1, 64, 22, 20);
    let seeds = Seeds::new(3);
    for i in 0..20 {
        let mut rng = seeds.rng(Stream::Augment, 0, i);
        let v = make_views(&s, Some(&mut rng)).unwrap();
        let mut rng = seeds.rng(Stream::Augment, 0, i);
        let (_, m) = augment(&s.image, &s.mask, &mut rng);
        let core = support(&v.core);
        let band = support(&v.boundary);
        for (p, &bit) in m.bits().iter().enumerate() {
            if core[p] {
                assert_eq!(bit, 1, "core pixel outside the transformed lesion");
            }
            if band[p] {
                assert_eq!(bit, 0, "band pixel inside the transformed lesion");
            }
        }
    }
}

#[test]
fn batches_have_expected_sizes_and_order() {
    let samples = fake_samples(35, 35);
    let opts = BatchOptions {
        batch_size: 32,
        shuffle: false,
        augment: false,
        workers: 1,
    };
    let it = batch_iter(&samples, opts, Seeds::new(1), 0).unwrap();
    assert_eq!(it.num_batches(), 3);
    let batches: Vec<Batch> = it.map(Result::unwrap).collect();
    assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), [32, 32, 6]);
    let ids: Vec<&String> = batches.iter().flat_map(|b| &b.ids).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(batches[0].views.whole.shape(), &[32, 3, 16, 16]);
    assert!(batch_iter(&samples[..0], opts, Seeds::new(1), 0).is_err());
}

#[test]
fn batches_do_not_depend_on_worker_count() {
    let samples = fake_samples(20, 20);
    let collect = |workers| {
        let opts = BatchOptions {
            batch_size: 7,
            shuffle: true,
            augment: true,
            workers,
        };
        batch_iter(&samples, opts, Seeds::new(42), 3)
            .unwrap()
            .map(|b| {
                let b = b.unwrap();
                (b.ids, b.views.whole.data().to_vec(), b.views.boundary.unwrap().data().to_vec())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(collect(1), collect(4));
}

#[test]
fn shuffle_depends_on_seed_and_epoch() {
    let samples = fake_samples(20, 20);
    let order = |seed, epoch| {
        let opts = BatchOptions {
            batch_size: 40,
            shuffle: true,
            augment: false,
            workers: 1,
        };
        batch_iter(&samples, opts, Seeds::new(seed), epoch).unwrap().next().unwrap().unwrap().ids
    };
    assert_eq!(order(1, 0), order(1, 0));
    assert_ne!(order(1, 0), order(2, 0));
    assert_ne!(order(1, 0), order(1, 1));
}

#[test]
fn synthetic_lesions_meet_roughness_bounds() {
    for size in [64, 224] {
        let spec = SyntheticSpec {
            per_class: 12,
            size,
            seed: 7,
        };
        let samples = synth_samples(&spec).unwrap();
        assert_eq!(samples.len(), 24);
        for s in &samples {
            let r = roughness(&s.mask);
            if s.label == 0 {
                assert!(r < BENIGN_MAX_ROUGHNESS, "{} roughness {r}", s.id);
            } else {
                assert!(r > MALIGNANT_MIN_ROUGHNESS, "{} roughness {r}", s.id);
            }
            assert_eq!((s.image.width(), s.mask.width()), (size, size));
            assert!(erode_with_fallback(&s.mask).is_some_and(|(_, k)| k == VIEW_ITERATIONS));
        }
        assert_eq!(samples, synth_samples(&spec).unwrap());
    }
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        per_class: 2,
        size: 48,
        seed: 7,
    };
    let written = synth_generate(&spec, dir.path()).unwrap();
    let files = |class: &str| fs::read_dir(dir.path().join(class)).unwrap().count();
    assert_eq!(files("benign") + files("malignant"), 8);
    let loaded = load_dataset(dir.path(), (48, 48)).unwrap();
    assert_eq!(loaded, written);
    assert_eq!(loaded.iter().map(|s| s.label).collect::<Vec<_>>(), [0, 0, 1, 1]);
    let manifest = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("id,label,part\n"));
    assert_eq!(manifest.lines().count(), 5);
}

#[test]
fn load_resizes_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    for class in CLASS_DIRS {
        fs::create_dir_all(dir.path().join(class)).unwrap();
    }
    let img = GrayImage::new(400, 300, (0..120_000).map(|i| (i % 251) as u8).collect()).unwrap();
    let mask = BinaryMask::from_fn(100, 75, |x, y| (30..60).contains(&x) && (20..50).contains(&y));
    write_gray(&dir.path().join("benign/a.png"), &img).unwrap();
    write_mask(&dir.path().join("benign/a_mask.pgm"), &mask).unwrap();
    write_gray(&dir.path().join("malignant/c.pgm"), &img).unwrap();
    write_mask(&dir.path().join("malignant/c_mask.png"), &mask).unwrap();
    let samples = load_dataset(dir.path(), (224, 224)).unwrap();
    assert_eq!(samples.len(), 2);
    for s in &samples {
        assert_eq!((s.image.width(), s.image.height()), (224, 224));
        assert_eq!((s.mask.width(), s.mask.height()), (224, 224));
        assert!(s.mask.bits().iter().all(|&b| b <= 1));
    }
    write_gray(&dir.path().join("malignant/d.png"), &img).unwrap();
    let err = load_dataset(dir.path(), (224, 224)).unwrap_err().to_string();
    assert!(err.contains('d') && err.contains("missing masks"), "{err}");
    fs::remove_file(dir.path().join("malignant/d.png")).unwrap();
    fs::remove_file(dir.path().join("benign/a.png")).unwrap();
    fs::remove_file(dir.path().join("benign/a_mask.pgm")).unwrap();
    assert!(load_dataset(dir.path(), (224, 224)).is_err());
}
