use proptest::prelude::*;

use super::*;
use crate::metrics::{psnr, MetricConfig};

fn gray(size: usize, v: f32) -> Tensor<f32> {
    Tensor::full(&[size, size, 3], v)
}

fn noise(sigma: f64, seed: u64) -> DegradationSpec {
    DegradationSpec {
        kind: DegradationKind::Noise { sigma },
        seed,
    }
}

fn random_pair(h: usize, w: usize, seed: u64) -> ImagePair {
    let d = Tensor::from_fn(&[h, w, 3], |i| ((i as u64 * 2654435761 + seed) % 997) as f32 / 997.0);
    let c = Tensor::from_fn(&[h, w, 3], |i| ((i as u64 * 40503 + seed) % 991) as f32 / 991.0);
    ImagePair::new(d, c, Task::Denoise).unwrap()
}

#[test]
fn clean_images_are_seeded_and_bounded() {
    let a = gen_clean(4, 32, 7).unwrap();
    assert_eq!(a, gen_clean(4, 32, 7).unwrap());
    assert_ne!(a, gen_clean(4, 32, 8).unwrap());
    for img in &a {
        assert_eq!(img.shape(), &[32, 32, 3]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(gen_clean(1, 12, 0).is_err());
}

#[test]
fn clean_mean_is_mid_range() {
    let imgs = gen_clean(100, 32, 123).unwrap();
    let mean = imgs.iter().flat_map(|t| t.data()).map(|&v| v as f64).sum::<f64>() / (100.0 * 32.0 * 32.0 * 3.0);
    assert!((0.35..=0.65).contains(&mean), "{mean}");
}

#[test]
fn degradation_limits() {
    let clean = gen_clean(1, 32, 1).unwrap().remove(0);
    assert_eq!(degrade(&clean, &noise(0.0, 3)).unwrap().degraded, clean);
    let haze = |t| DegradationSpec {
        kind: DegradationKind::Haze {
            airlight: 0.8,
            transmission: t,
        },
        seed: 0,
    };
    assert_eq!(degrade(&clean, &haze(1.0)).unwrap().degraded, clean);
    let near = degrade(&clean, &haze(1e-6)).unwrap().degraded;
    assert!(near.data().iter().all(|&v| (v - 0.8).abs() < 1e-5));
    assert!(degrade(&clean, &haze(0.0)).is_err());
    assert!(degrade(&clean, &noise(-1.0, 0)).is_err());
}

#[test]
fn noise_psnr_matches_analytic_value() {
    let cfg = MetricConfig::default();
    let clean = gray(64, 0.5);
    let expected = 10.0 * (255.0f64 * 255.0 / (25.0 * 25.0)).log10();
    let mean: f64 = (0..20)
        .map(|s| {
            let pair = degrade(&clean, &noise(25.0, s)).unwrap();
            psnr(&pair.degraded, &pair.clean, &cfg).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!((expected - 20.17).abs() < 0.01);
    assert!((mean - expected).abs() < 0.3, "{mean} vs {expected}");
}

#[test]
fn rain_adds_bright_streaks() {
    let clean = gray(32, 0.2);
    let spec = DegradationSpec {
        kind: DegradationKind::Rain {
            count: 10,
            length: 8.0,
            angle_deg: 10.0,
            intensity: 0.5,
        },
        seed: 9,
    };
    let pair = degrade(&clean, &spec).unwrap();
    assert!(pair.degraded.data().iter().zip(clean.data()).all(|(d, c)| d >= c));
    assert!(pair.degraded.data().iter().any(|&v| v > 0.6));
    assert_eq!(pair, degrade(&clean, &spec).unwrap());
}

#[test]
fn crop_identity_and_alignment() {
    let pair = random_pair(32, 32, 1);
    let (same, off) = crop_patch(&pair, 32, 5).unwrap();
    assert_eq!(off, (0, 0));
    assert_eq!(same, pair);
    let big = random_pair(48, 40, 2);
    let (p, (dy, dx)) = crop_patch(&big, 16, 11).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            for c in 0..3 {
                assert_eq!(p.degraded.at3(y, x, c), big.degraded.at3(y + dy, x + dx, c));
                assert_eq!(p.clean.at3(y, x, c), big.clean.at3(y + dy, x + dx, c));
            }
        }
    }
    assert!(crop_patch(&pair, 40, 0).is_err());
    assert!(crop_patch(&pair, 12, 0).is_err());
}

#[test]
fn crop_offsets_are_uniform() {
    let pair = random_pair(64, 64, 3);
    let mut counts = [0usize; 33];
    let n = 10_000;
    for s in 0..n {
        let (_, (dy, _)) = crop_patch(&pair, 32, s).unwrap();
        counts[dy] += 1;
    }
    let p = 1.0 / 33.0;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    for &c in &counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd + 1.0, "{counts:?}");
    }
}

#[test]
fn flips() {
    let pair = random_pair(16, 8, 4);
    assert_eq!(flip_horizontal(&flip_horizontal(&pair.degraded)), pair.degraded);
    assert_eq!(flip_vertical(&flip_vertical(&pair.clean)), pair.clean);
    let cfg = MetricConfig::default();
    let before = psnr(&pair.degraded, &pair.clean, &cfg).unwrap();
    for s in 0..8 {
        let f = augment_flip(&pair, s);
        assert_eq!(f, augment_flip(&pair, s));
        // Equal up to summation order.
        assert!((psnr(&f.degraded, &f.clean, &cfg).unwrap() - before).abs() < 1e-9);
    }
}

#[test]
fn balancing() {
    let ds = |n: usize, task| Dataset::new((0..n).map(|i| ImagePair { task, ..random_pair(8, 8, i as u64) }).collect(), Split::Train);
    let same = balance_duplicate(&[ds(10, Task::Derain), ds(10, Task::Denoise)], 0).unwrap();
    assert_eq!(same.len(), 20);
    let b = balance_duplicate(&[ds(10, Task::Derain), ds(30, Task::Denoise)], 0).unwrap();
    assert_eq!(b.task_counts(), vec![(Task::Derain, 30), (Task::Denoise, 30)]);
    let copies: Vec<u32> = b.pairs.iter().filter(|p| p.task == Task::Derain).map(|p| p.copy).collect();
    assert_eq!(copies.iter().filter(|&&c| c == 2).count(), 10);
    let r = balance_duplicate(&[ds(7, Task::Derain), ds(30, Task::Denoise), ds(12, Task::Dehaze)], 5).unwrap();
    for (_, n) in r.task_counts() {
        assert_eq!(n, 30);
    }
    assert!(balance_duplicate(&[], 0).is_err());
}

#[test]
fn synthesize_default_recipe_counts() {
    let recipe = DataRecipe {
        size: 16,
        n_train: 20,
        n_test: 4,
        ..Default::default()
    };
    let splits = synthesize(&recipe).unwrap();
    assert_eq!(splits.len(), 3);
    for s in &splits {
        assert_eq!(s.train.len(), 20);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.test.len(), 4);
        for v in &s.val.pairs {
            assert!(s.train.pairs.iter().all(|t| t.clean != v.clean));
        }
    }
    let sigmas: Vec<f64> = splits[2]
        .test
        .pairs
        .iter()
        .map(|p| match p.spec.as_ref().unwrap().kind {
            DegradationKind::Noise { sigma } => sigma,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(sigmas, [15.0, 25.0, 50.0, 15.0]);
    assert_eq!(splits, synthesize(&recipe).unwrap());
}

#[test]
fn png_round_trip_and_dir_loading() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::new(vec![random_pair(16, 8, 1), random_pair(16, 8, 2)], Split::Test);
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let loaded = load_png_dir(dir.path(), Task::Denoise, Split::Test).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in loaded.pairs.iter().zip(&ds.pairs) {
        for (x, y) in a.degraded.data().iter().zip(b.degraded.data()) {
            assert!((x - y).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }
    // An orphan is skipped, not fatal.
    save_png(&dir.path().join("orphan_clean.png"), &gray(8, 0.5)).unwrap();
    assert_eq!(load_png_dir(dir.path(), Task::Denoise, Split::Test).unwrap().len(), 2);
    // Mismatched sizes are rejected.
    save_png(&dir.path().join("orphan_degraded.png"), &gray(16, 0.5)).unwrap();
    let err = load_png_dir(dir.path(), Task::Denoise, Split::Test).unwrap_err();
    assert!(err.to_string().contains("orphan"), "{err}");
}

#[test]
fn empty_dir_and_non_rgb() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_png_dir(dir.path(), Task::Derain, Split::Train).unwrap().is_empty());
    let gray_path = dir.path().join("g_clean.png");
    image::GrayImage::new(8, 8).save(&gray_path).unwrap();
    assert!(matches!(load_png(&gray_path), Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn degrade_stays_in_unit_range(seed in any::<u64>(), idx in 0usize..50, task in 0usize..3) {
        let clean = gen_clean(1, 16, seed).unwrap().remove(0);
        let spec = sample_spec(Task::ALL[task], &DegradationRanges::default(), idx, seed);
        let a = degrade(&clean, &spec).unwrap();
        prop_assert!(a.degraded.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &degrade(&clean, &spec).unwrap());
    }
}
