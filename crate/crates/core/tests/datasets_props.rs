use finetune_core::datasets::mnist::{
    encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels, write_bytes, IdxError,
};
use finetune_core::datasets::{
    make_task_pair, sample_unit_sphere, two_level_spectrum, GaussianDesign, ScaledSide, TaskPairMode, TaskPairSpec,
};
use finetune_core::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spiked(seed: u64) -> GaussianDesign {
    GaussianDesign::random_basis(&two_level_spectrum(30, 6, 3.0, 0.5), seed).unwrap()
}

#[test]
fn eigen_aligned_modes_confine_the_difference() {
    for seed in 0..100u64 {
        let design = spiked(seed);
        let vecs = design.eigen().vectors();
        let k = 6;
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::TopEigenAlign { k }, seed), &design).unwrap();
        let diff = t.as_vector() - s.as_vector();
        assert!((diff.norm() - 1.0).abs() <= 1e-9);
        assert!((vecs.columns(0, k).transpose() * &diff).norm() <= 1e-9);
        assert!((s.norm() - 1.0).abs() <= 1e-9);

        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::BottomEigenAlign { k }, seed), &design).unwrap();
        let diff = t.as_vector() - s.as_vector();
        assert!((diff.norm() - 1.0).abs() <= 1e-9);
        assert!((vecs.columns(k, 30 - k).transpose() * &diff).norm() <= 1e-9);
    }
}

#[test]
fn random_and_scaled_modes_have_requested_norms() {
    let design = spiked(0);
    for seed in 0..100u64 {
        let (s, t) = make_task_pair(&TaskPairSpec::new(TaskPairMode::Random, seed), &design).unwrap();
        assert!((s.norm() - 1.0).abs() <= 1e-9 && (t.norm() - 1.0).abs() <= 1e-9);

        let mode = TaskPairMode::ScaledAligned { alpha: 2.5, noise_ratio: 0.0 };
        let (s, t) = make_task_pair(&TaskPairSpec::new(mode, seed), &design).unwrap();
        assert!((t.as_vector() - s.as_vector() * 2.5).norm() <= 1e-9);
    }
}

#[test]
fn direction_fixed_scale_keeps_alignment() {
    let design = spiked(1);
    for seed in 0..100u64 {
        for side in [ScaledSide::Source, ScaledSide::Target] {
            let mode = TaskPairMode::DirectionFixedScale { alpha: 3.0, side, alignment: 0.3 };
            let (s, t) = make_task_pair(&TaskPairSpec::new(mode, seed), &design).unwrap();
            let (us, ut) = (s.as_vector() / s.norm(), t.as_vector() / t.norm());
            assert!(((&us - &ut).norm() - 0.3).abs() <= 1e-9);
            let scaled = match side {
                ScaledSide::Source => s.norm(),
                ScaledSide::Target => t.norm(),
            };
            assert!((scaled - 3.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let design = spiked(2);
    let bad = [
        TaskPairMode::TopEigenAlign { k: 31 },
        TaskPairMode::TopEigenAlign { k: 30 },
        TaskPairMode::BottomEigenAlign { k: 0 },
        TaskPairMode::ScaledAligned { alpha: f64::NAN, noise_ratio: 0.0 },
        TaskPairMode::DirectionFixedScale { alpha: 1.0, side: ScaledSide::Source, alignment: 2.5 },
        TaskPairMode::DirectionFixedScale { alpha: 0.0, side: ScaledSide::Target, alignment: 0.1 },
    ];
    for mode in bad {
        assert!(make_task_pair(&TaskPairSpec::new(mode.clone(), 0), &design).is_err(), "{mode:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), n in 1usize..20, d in 2usize..20) {
        let design = GaussianDesign::random_basis(&two_level_spectrum(d, 1, 2.0, 1.0), seed).unwrap();
        prop_assert_eq!(design.sample(n, seed), design.sample(n, seed));
        prop_assert_eq!(sample_unit_sphere(n, d, seed), sample_unit_sphere(n, d, seed));
        let spec = TaskPairSpec::new(TaskPairMode::Random, seed);
        let (a, b) = (make_task_pair(&spec, &design).unwrap(), make_task_pair(&spec, &design).unwrap());
        prop_assert_eq!(a.0.as_vector(), b.0.as_vector());
        prop_assert_eq!(a.1.as_vector(), b.1.as_vector());
    }

    #[test]
    fn sphere_rows_have_unit_norm(seed in any::<u64>(), n in 1usize..30, d in 1usize..12) {
        let x = sample_unit_sphere(n, d, seed);
        for i in 0..n {
            prop_assert!((x.row(i).norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected(byte in 0usize..4, flip in 1u8..=255) {
        let images = encode_idx_images(&DMatrix::from_element(2, 4, 0.5), 2, 2);
        let labels = encode_idx_labels(&[3, 7]);
        let mut bad_images = images.clone();
        bad_images[byte] ^= flip;
        let mut bad_labels = labels.clone();
        bad_labels[byte] ^= flip;
        let rejected = matches!(parse_idx_images(&bad_images), Err(IdxError::BadMagic { .. }))
            && matches!(parse_idx_labels(&bad_labels), Err(IdxError::BadMagic { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn truncated_files_are_rejected(cut in 1usize..10) {
        let images = encode_idx_images(&DMatrix::from_element(2, 4, 0.25), 2, 2);
        let labels = encode_idx_labels(&[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let rejected = matches!(parse_idx_images(&images[..images.len() - cut]), Err(IdxError::Truncated { .. }))
            && matches!(parse_idx_labels(&labels[..labels.len() - cut]), Err(IdxError::Truncated { .. }));
        prop_assert!(rejected);
    }
}

#[test]
fn non_digit_labels_are_rejected() {
    assert!(matches!(parse_idx_labels(&encode_idx_labels(&[1, 10])), Err(IdxError::BadLabel { label: 10, offset: 9 })));
}

#[test]
fn idx_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(5, 1);
    let raw = rng::gaussian_matrix(&mut r, 7, 12);
    let pixels = raw.map(|v| (v.abs() * 80.0).round().min(255.0) / 255.0);
    let labels: Vec<u8> = (0..7).map(|i| (i * 3 % 10) as u8).collect();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    write_bytes(&ip, &encode_idx_images(&pixels, 3, 4)).unwrap();
    write_bytes(&lp, &encode_idx_labels(&labels)).unwrap();
    let ds = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!((ds.rows, ds.cols), (3, 4));
    assert_eq!(ds.labels, labels);
    assert!((ds.images - pixels).amax() <= 1e-12);

    write_bytes(&lp, &encode_idx_labels(&labels[..5])).unwrap();
    assert!(matches!(load_mnist_idx(&ip, &lp), Err(IdxError::CountMismatch { images: 7, labels: 5 })));
    assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lp), Err(IdxError::Io { .. })));
}
