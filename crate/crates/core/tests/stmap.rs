mod common;

use common::{argmax, ls_peak};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rppgvl::spectrum::power_spectrum;
use rppgvl::stmap::*;
use rppgvl::synthgen::{gen_source_clip, WaveSpec};

fn clip(f0: f64, seed: u64) -> rppgvl::synthgen::SourceClip {
    let spec = WaveSpec { harmonic_amps: vec![1.0, 0.3], ..WaveSpec::clean(f0, 30.0, 128) };
    gen_source_clip(&spec, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn r(n: u32, d: u32) -> Ratio {
    Ratio::new(n, d).unwrap()
}

#[test]
fn ratio_literals_and_parsing() {
    let lits: Vec<String> = default_ratio_bin().iter().map(|r| r.literal()).collect();
    assert_eq!(lits, ["1/4", "1/2", "3/4", "5/4", "3/2", "7/4", "2"]);
    assert_eq!("2/1".parse::<Ratio>().unwrap().literal(), "2");
    assert_eq!("6/8".parse::<Ratio>().unwrap(), r(3, 4));
    assert!("0".parse::<Ratio>().is_err());
    assert!("x/2".parse::<Ratio>().is_err());
}

#[test]
fn rows_replicate_each_roi() {
    let m = build_stmap(&clip(1.3, 1), 10, 64).unwrap();
    assert_eq!(m.rows_per_roi(), 4);
    for roi in 0..16 {
        for k in 1..4 {
            for c in 0..3 {
                assert_eq!(m.row(roi * 4, c), m.row(roi * 4 + k, c));
            }
        }
    }
    assert!(m.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(m.f_mult, Ratio::ONE);
}

#[test]
fn rows_keep_clip_frequency() {
    for (i, f0) in [0.9, 1.6, 2.7].into_iter().enumerate() {
        let m = central_stmap(&clip(f0, i as u64), 64).unwrap();
        for row in (0..64).step_by(4) {
            let f = ls_peak(&m.row(row, 1), 30.0, 0.3, 10.0);
            assert!((f - f0).abs() < 0.05, "row {row}: {f} vs {f0}");
        }
    }
}

#[test]
fn constant_clip_maps_to_half() {
    let mut c = clip(1.0, 0);
    c.traces.iter_mut().for_each(|v| *v = 0.3);
    let m = build_stmap(&c, 0, 64).unwrap();
    assert!(m.pixels.iter().all(|&v| v == 0.5));
}

#[test]
fn crop_and_size_errors() {
    let c = clip(1.0, 0);
    assert!(build_stmap(&c, 65, 64).is_err());
    assert!(build_stmap(&c, 0, 60).is_err());
}

#[test]
fn rot180_twice_is_identity() {
    let m = build_stmap(&clip(1.1, 2), 0, 64).unwrap();
    let twice = spatial_augment(&spatial_augment(&m, SpatialOp::Rot180).unwrap(), SpatialOp::Rot180).unwrap();
    assert_eq!(twice, m);
    let four = (0..4).fold(m.clone(), |x, _| spatial_augment(&x, SpatialOp::Rot90).unwrap());
    assert_eq!(four, m);
}

#[test]
fn hflip_mirrors_grid_columns() {
    let perm = SpatialOp::Hflip.permutation(4);
    for row in 0..4 {
        for col in 0..4 {
            assert_eq!(perm[row * 4 + col], row * 4 + 3 - col);
        }
    }
    let m = build_stmap(&clip(1.1, 3), 0, 64).unwrap();
    let h = spatial_augment(&m, SpatialOp::Hflip).unwrap();
    for cell in 0..16 {
        let src = perm[cell];
        assert_eq!(h.row(cell * 4, 1), m.row(src * 4, 1));
    }
}

#[test]
fn every_op_is_a_permutation() {
    for op in SpatialOp::ALL {
        let mut p = op.permutation(4);
        p.sort_unstable();
        assert_eq!(p, (0..16).collect::<Vec<_>>());
        assert_eq!(op, format!("{op:?}").to_lowercase().parse().unwrap());
    }
    assert!("rot45".parse::<SpatialOp>().is_err());
}

fn row_peaks(m: &StMap) -> Vec<usize> {
    let mut peaks: Vec<usize> =
        (0..m.size).flat_map(|row| (0..3).map(move |c| (row, c))).map(|(row, c)| argmax(&power_spectrum(&m.row(row, c), 512)[1..])).collect();
    peaks.sort_unstable();
    peaks
}

#[test]
fn spatial_ops_preserve_peak_multiset() {
    let m = build_stmap(&clip(2.2, 4), 20, 64).unwrap();
    let before = row_peaks(&m);
    for op in SpatialOp::ALL {
        assert_eq!(row_peaks(&spatial_augment(&m, op).unwrap()), before);
    }
}

#[test]
fn freq_augment_examples() {
    let m = freq_augment_at(&clip(2.0, 5), r(1, 2), 64, 0).unwrap();
    assert_eq!(m.f_mult, r(1, 2));
    let f = ls_peak(&m.row(0, 1), 30.0, 0.1, 14.0);
    assert!((f - 1.0).abs() < 0.05, "{f}");

    // r = 2 over 64 output frames spans source frames 0..=126 of 128
    assert_eq!(max_resample_start(128, r(2, 1), 64), Some(1));
    let m = freq_augment_at(&clip(1.0, 6), r(2, 1), 64, 1).unwrap();
    let f = ls_peak(&m.row(8, 1), 30.0, 0.1, 14.0);
    assert!((f - 2.0).abs() < 0.05, "{f}");
    assert!(freq_augment_at(&clip(1.0, 6), r(2, 1), 64, 2).is_err());
}

#[test]
fn freq_augment_errors() {
    let c = clip(1.0, 7);
    assert!(freq_augment_at(&c, Ratio::ONE, 64, 0).is_err());
    assert!(freq_augment_at(&c, r(3, 1), 64, 0).is_err());
    let fast = clip(3.0, 8);
    assert!(freq_augment_at(&fast, r(6, 1), 16, 0).is_err());
}

#[test]
fn augmented_set_defaults() {
    let aug = AugSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let set = make_augmented_set(&clip(1.4, 9), &aug, 64, &mut rng).unwrap();
    assert_eq!(set.positives.len(), 2);
    assert_eq!(set.negatives.len(), 3);
    assert!(set.positives.iter().all(|p| p.f_mult == Ratio::ONE));
    assert_ne!(set.ops[0], set.ops[1]);
    let mut rs = set.ratios.clone();
    rs.sort();
    rs.dedup();
    assert_eq!(rs.len(), 3);
    for (n, ratio) in set.negatives.iter().zip(&set.ratios) {
        assert_eq!(n.f_mult, *ratio);
        assert!(aug.ratio_bin.contains(ratio));
    }
}

#[test]
fn augmented_set_reproducible() {
    let aug = AugSpec::default();
    let c = clip(1.4, 9);
    let a = make_augmented_set(&c, &aug, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = make_augmented_set(&c, &aug, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.ratios, b.ratios);
    assert_eq!(a.negatives, b.negatives);
    assert_eq!(a.positives, b.positives);
}

#[test]
fn six_negatives_supported() {
    let aug = AugSpec { k_neg: 6, ..AugSpec::default() };
    let set = make_augmented_set(&clip(1.2, 1), &aug, 64, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(set.negatives.len(), 6);
    assert!(AugSpec { k_neg: 8, ..AugSpec::default() }.validate().is_err());
    assert!(AugSpec { n_pos: 3, ..AugSpec::default() }.validate().is_err());
    let mut with_one = AugSpec::default();
    with_one.ratio_bin.push(Ratio::ONE);
    assert!(with_one.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Pure fundamental: at r = 1/4 a 64-frame row holds under one cycle, too
    // short to tell a harmonic from the fundamental.
    #[test]
    fn freq_augment_scales_peak(seed in any::<u64>(), idx in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(0.8..3.0);
        let c = gen_source_clip(&WaveSpec::clean(f0, 30.0, 128), 16, &mut rng).unwrap();
        let ratio = default_ratio_bin()[idx];
        let m = freq_augment(&c, ratio, 64, &mut rng).unwrap();
        let row = rng.random_range(0..64);
        let f = ls_peak(&m.row(row, 1), 30.0, 0.1, 14.0);
        prop_assert!((f - ratio.value() * f0).abs() < 0.05, "{} vs {}", f, ratio.value() * f0);
    }

    #[test]
    fn spatial_op_permutes_rows(seed in any::<u64>(), op in 0usize..5) {
        let m = build_stmap(&clip(1.5, seed), (seed % 64) as usize, 64).unwrap();
        let a = spatial_augment(&m, SpatialOp::ALL[op]).unwrap();
        let mut x: Vec<Vec<u64>> = (0..64).map(|r| m.row(r, 0).iter().map(|v| v.to_bits()).collect()).collect();
        let mut y: Vec<Vec<u64>> = (0..64).map(|r| a.row(r, 0).iter().map(|v| v.to_bits()).collect()).collect();
        x.sort();
        y.sort();
        prop_assert_eq!(x, y);
    }
}
