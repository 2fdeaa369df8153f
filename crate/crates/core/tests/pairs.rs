mod common;

use common::ls_peak;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rppgvl::pairs::*;
use rppgvl::stmap::{build_stmap, default_ratio_bin, freq_augment_at, make_augmented_set, AugSpec, Ratio, StMap};
use rppgvl::synthgen::{gen_source_clip, SourceClip, WaveSpec};

fn clip(f0: f64, seed: u64) -> SourceClip {
    gen_source_clip(&WaveSpec::clean(f0, 30.0, 128), 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn default_set(seed: u64) -> (Vec<StMap>, Vec<StMap>) {
    let set = make_augmented_set(&clip(1.3, seed), &AugSpec::default(), 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (set.positives, set.negatives)
}

#[test]
fn six_cstmaps_with_exact_halves() {
    let (pos, neg) = default_set(1);
    let cst = make_cstmaps(&pos, &neg, false).unwrap();
    assert_eq!(cst.len(), 6);
    for (a, p) in pos.iter().enumerate() {
        for (b, n) in neg.iter().enumerate() {
            let c = &cst[a * 3 + b];
            assert_eq!(c.ratio, n.f_mult);
            assert_eq!(c.left_mult, Ratio::ONE);
            assert_eq!(c.right_mult, n.f_mult);
            for row in 0..64 {
                for col in 0..32 {
                    for ch in 0..3 {
                        assert_eq!(c.at(row, col, ch).to_bits(), p.at(row, 32 + col, ch).to_bits());
                        assert_eq!(c.at(row, 32 + col, ch).to_bits(), n.at(row, col, ch).to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn swapped_layout_puts_negative_left() {
    let (pos, neg) = default_set(2);
    let c = &make_cstmaps(&pos, &neg, true).unwrap()[0];
    assert!(c.swapped);
    assert_eq!(c.left_mult, neg[0].f_mult);
    assert_eq!(c.at(5, 0, 1), neg[0].at(5, 32, 1));
    assert_eq!(c.at(5, 32, 1), pos[0].at(5, 0, 1));
}

#[test]
fn halves_carry_their_frequencies() {
    let src = clip(1.0, 3);
    let pos = build_stmap(&src, 0, 64).unwrap();
    let neg = freq_augment_at(&src, Ratio::new(1, 2).unwrap(), 64, 0).unwrap();
    // evaluate each half on the full 64-frame rows it was cut from
    let c = &make_cstmaps(&[pos.clone()], &[neg.clone()], false).unwrap()[0];
    let left: Vec<f64> = (0..32).map(|t| c.at(0, t, 1)).collect();
    let right: Vec<f64> = (32..64).map(|t| c.at(0, t, 1)).collect();
    assert_eq!(left, pos.row(0, 1)[32..]);
    assert_eq!(right, neg.row(0, 1)[..32]);
    let fl = ls_peak(&pos.row(0, 1), 30.0, 0.2, 10.0);
    let fr = ls_peak(&neg.row(0, 1), 30.0, 0.2, 10.0);
    assert!((fr / fl - 0.5).abs() < 0.03, "{fr} / {fl}");
}

#[test]
fn mismatched_dims_are_rejected() {
    let (pos, mut neg) = default_set(4);
    neg[1].size = 32;
    assert!(make_cstmaps(&pos, &neg, false).is_err());
}

#[test]
fn prompt_wording() {
    let v = Vocab::default();
    let p = make_prompt(Ratio::new(1, 2).unwrap(), Template::Default, false, &v).unwrap();
    assert_eq!(
        p.text,
        "the frequency of the horizontal color variation on the right side is 1/2 times of that on the left side of the image"
    );
    assert_eq!(p.ratio_literal, "1/2");
    let two = make_prompt(Ratio::new(2, 1).unwrap(), Template::Default, false, &v).unwrap();
    assert!(two.text.contains(" 2 times") && !two.text.contains("2/1"));
    let swapped = make_prompt(Ratio::new(2, 1).unwrap(), Template::Default, true, &v).unwrap();
    assert!(swapped.text.contains("on the left side is 2 times of that on the right side"));
    assert!(make_prompt(Ratio::new(5, 3).unwrap(), Template::Default, false, &v).is_err());
}

#[test]
fn prompts_are_injective_and_round_trip() {
    let v = Vocab::default();
    assert!(v.len() <= 64);
    for t in Template::ALL {
        let mut seen = std::collections::HashSet::new();
        for r in default_ratio_bin() {
            for swap in [false, true] {
                let p = make_prompt(r, t, swap, &v).unwrap();
                assert_eq!(p.tokens.len(), TEXT_LEN);
                assert_eq!(p.tokens[0], CLS_ID);
                assert!(p.tokens.iter().all(|&i| i < v.len() && i != UNK_ID));
                assert_eq!(v.detokenize(&p.tokens), p.text);
                assert!(seen.insert(p.tokens.clone()));
            }
        }
    }
}

#[test]
fn tokenizer_edge_cases() {
    let v = Vocab::default();
    let empty = v.tokenize("");
    assert_eq!(empty.ids[0], CLS_ID);
    assert!(empty.ids[1..].iter().all(|&i| i == PAD_ID));
    let odd = v.tokenize("The frequency of ZEBRA");
    assert_eq!(odd.unknown, 1);
    assert_eq!(odd.ids[4], UNK_ID);
    assert_eq!(v.detokenize(&v.tokenize("THE Left Side").ids), "the left side");
    let long = vec!["side"; 100].join(" ");
    assert_eq!(v.tokenize(&long).ids.len(), TEXT_LEN);
}

#[test]
fn template_parsing() {
    for (s, t) in [("default", Template::Default), ("T1", Template::T1), ("t2", Template::T2), ("t3", Template::T3)] {
        assert_eq!(s.parse::<Template>().unwrap(), t);
    }
    assert!("t9".parse::<Template>().is_err());
}

#[test]
fn default_masking_count() {
    let (pos, neg) = default_set(5);
    let c = &make_cstmaps(&pos, &neg, false).unwrap()[0];
    let m = mask_cstmap(c, 0.6, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(m.masked_positions.len(), 38);
    assert_eq!(m.visible_patches.len(), 26);
    for (pos, px) in &m.visible_patches {
        assert_eq!(px, &extract_patch(&c.pixels, 64, 8, *pos));
    }
}

#[test]
fn masking_sweep_and_errors() {
    let (pos, neg) = default_set(6);
    let c = &make_cstmaps(&pos, &neg, false).unwrap()[0];
    for (b, want) in [(0.4, 26), (0.5, 32), (0.6, 38), (0.7, 45), (0.8, 51)] {
        let m = mask_cstmap(c, b, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.masked_positions.len(), want);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(mask_cstmap(c, 1.0, 8, &mut rng).is_err());
    assert!(mask_cstmap(c, -0.1, 8, &mut rng).is_err());
    assert!(mask_cstmap(c, 0.6, 7, &mut rng).is_err());
}

#[test]
fn masking_is_seeded() {
    let (pos, neg) = default_set(7);
    let c = &make_cstmaps(&pos, &neg, false).unwrap()[2];
    let a = mask_cstmap(c, 0.6, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = mask_cstmap(c, 0.6, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn patchify_round_trip() {
    let (pos, _) = default_set(8);
    let px = &pos[0].pixels;
    assert_eq!(&unpatchify(&patchify(px, 64, 8), 64, 8), px);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_partition_positions(seed in any::<u64>(), b in 0.0f64..0.95, p in prop::sample::select(vec![4usize, 8, 16])) {
        let (pos, neg) = default_set(seed % 4);
        let c = &make_cstmaps(&pos, &neg, false).unwrap()[(seed % 6) as usize];
        let m = mask_cstmap(c, b, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let n = (64 / p) * (64 / p);
        prop_assert_eq!(m.masked_positions.len(), mask_count(n, b));
        let mut all: Vec<usize> = m.visible_positions();
        all.extend(&m.masked_positions);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn prompt_literal_matches_ratio(idx in 0usize..7, t in 0usize..4, swap: bool) {
        let r = default_ratio_bin()[idx];
        let p = make_prompt(r, Template::ALL[t], swap, &Vocab::default()).unwrap();
        prop_assert_eq!(p.ratio_literal.parse::<Ratio>().unwrap(), r);
        prop_assert!(p.text.split_whitespace().any(|w| w == r.literal()));
    }
}
