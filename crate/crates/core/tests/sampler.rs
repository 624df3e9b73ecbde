use mimdet_core::sampler::{coverage_fraction, sample_grid, sample_indices, SampleMode, SampleSpec};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = SampleSpec> {
    (
        prop_oneof![Just(SampleMode::Random), Just(SampleMode::Grid), Just(SampleMode::Full)],
        0.01f64..=1.0,
        any::<u64>(),
    )
        .prop_map(|(mode, ratio, seed)| SampleSpec { mode, ratio, seed })
}

proptest! {
    #[test]
    fn kept_and_dropped_partition(n in 1usize..300, spec in spec_strategy()) {
        let s = sample_indices(n, &spec).unwrap();
        prop_assert!(s.kept().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.dropped().windows(2).all(|w| w[0] < w[1]));
        let mut all: Vec<usize> = s.kept().iter().chain(s.dropped()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!s.kept().is_empty());
    }

    #[test]
    fn random_count_is_floor_clamped(n in 1usize..300, ratio in 0.001f64..=1.0, seed in any::<u64>()) {
        let s = sample_indices(n, &SampleSpec::random(ratio, seed)).unwrap();
        let expect = ((ratio * n as f64).floor() as usize).clamp(1, n);
        prop_assert_eq!(s.kept().len(), expect);
    }

    #[test]
    fn sampling_is_deterministic(n in 1usize..200, spec in spec_strategy()) {
        prop_assert_eq!(sample_indices(n, &spec).unwrap(), sample_indices(n, &spec).unwrap());
    }

    #[test]
    fn grid_partition_on_2d(h in 1usize..20, w in 1usize..20, ratio in 0.05f64..=1.0) {
        let s = sample_grid(h, w, &SampleSpec::grid(ratio)).unwrap();
        prop_assert_eq!(s.kept().len() + s.dropped().len(), h * w);
        prop_assert!(s.kept().len() <= ((ratio * (h * w) as f64).floor() as usize).max(1));
    }
}

#[test]
fn full_mode_ignores_ratio() {
    let spec = SampleSpec {
        mode: SampleMode::Full,
        ratio: 0.1,
        seed: 9,
    };
    assert!(sample_indices(50, &spec).unwrap().is_full());
}

#[test]
fn inclusion_frequency_is_uniform() {
    let n = 196;
    let draws = 10_000;
    let mut hits = vec![0usize; n];
    for seed in 0..draws {
        for &i in sample_indices(n, &SampleSpec::random(0.5, seed)).unwrap().kept() {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / draws as f64;
        assert!((0.47..=0.53).contains(&f), "index {i} frequency {f}");
    }
}

#[test]
fn substreams_differ() {
    let base = SampleSpec::random(0.5, 11);
    let a = sample_indices(196, &base.substream(0)).unwrap();
    let b = sample_indices(196, &base.substream(1)).unwrap();
    assert_eq!(a, sample_indices(196, &base).unwrap());
    assert_ne!(a, b);
}

#[test]
fn checkerboard_coverage_on_vit_grid() {
    let s = sample_grid(14, 14, &SampleSpec::grid(0.5)).unwrap();
    assert_eq!(s.kept().len(), 98);
    let c = coverage_fraction(&s, 14, 14, 31, 16, 224, 224).unwrap();
    assert!(c >= 0.99, "{c}");
}

#[test]
fn flattened_stride_leaves_stripes() {
    // Even widths: the flattened stride keeps whole columns, so alternate
    // 16-pixel columns are only reached by the 15-pixel overhang.
    let s = sample_indices(196, &SampleSpec::grid(0.5)).unwrap();
    assert!(s.kept().iter().all(|&t| (t % 14) % 2 == 0));
    let c = coverage_fraction(&s, 14, 14, 31, 16, 224, 224).unwrap();
    assert!((c - 0.9375).abs() < 1e-12, "{c}");
}
