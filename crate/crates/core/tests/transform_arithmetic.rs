use mbsl_core::mstransform::{
    default_scales, mask, mask_pattern, patch, transform_multiscale, MaskGranularity, MASK_RATIOS,
};
use mbsl_core::rng::rng_from;
use mbsl_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn token_counts_at_125_hz() {
    let scales = default_scales(125.0);
    let lens: Vec<usize> = scales.iter().map(|s| s.patch_len).collect();
    assert_eq!(lens, vec![5, 10, 20]);
    let x = Tensor::zeros(&[1, 1000]);
    let tokens: Vec<usize> = transform_multiscale(&x, &scales, 0, true, MaskGranularity::Timestamp)
        .unwrap()
        .iter()
        .map(|t| t.n_tokens())
        .collect();
    assert_eq!(tokens, vec![200, 100, 50]);
}

#[test]
fn mask_fraction_matches_ratio() {
    for (i, ratio) in MASK_RATIOS.into_iter().enumerate() {
        let keep = mask_pattern(100_000, ratio, 11 + i as u64).unwrap();
        let frac = keep.iter().filter(|&&k| k == 0.0).count() as f64 / keep.len() as f64;
        assert!((frac - ratio).abs() <= 0.01, "ratio {ratio} observed {frac}");
    }
}

fn random_window(c: usize, len: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed, &[]);
    Tensor::new(
        vec![c, len],
        (0..c * len).map(|_| rng.random_range(-5.0..5.0)).collect(),
    )
    .unwrap()
}

#[test]
fn patch_commutes_with_mask_bit_exactly() {
    let x = random_window(3, 1000, 2);
    for (p, ratio) in [(5, 0.05), (10, 0.10), (20, 0.15), (7, 0.5)] {
        let keep = mask_pattern(1000, ratio, 9).unwrap();
        let m = Tensor::new(vec![3, 1000], keep.repeat(3)).unwrap();
        let lhs = patch(&mask(&x, ratio, 9).unwrap(), p).unwrap();
        let (px, pm) = (patch(&x, p).unwrap(), patch(&m, p).unwrap());
        let rhs: Vec<f64> = px
            .tokens
            .data()
            .iter()
            .zip(pm.tokens.data())
            .map(|(a, b)| a * b)
            .collect();
        assert!(lhs
            .tokens
            .data()
            .iter()
            .zip(&rhs)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #[test]
    fn unpatch_restores_the_used_prefix(c in 1usize..4, len in 8usize..200, p in 1usize..8, seed in 0u64..1000) {
        let x = random_window(c, len, seed);
        let ts = patch(&x, p).unwrap();
        prop_assert_eq!(ts.n_tokens(), len / p);
        let back = ts.unpatch();
        let used = (len / p) * p;
        for ch in 0..c {
            prop_assert_eq!(&back.data()[ch * used..(ch + 1) * used], &x.data()[ch * len..ch * len + used]);
        }
    }

    #[test]
    fn eval_mode_never_masks(seed in 0u64..1000) {
        let x = random_window(2, 120, seed);
        let scales = default_scales(125.0);
        let out = transform_multiscale(&x, &scales, seed, false, MaskGranularity::Timestamp).unwrap();
        for (ts, s) in out.iter().zip(&scales) {
            prop_assert_eq!(ts, &{ let mut t = patch(&x, s.patch_len).unwrap(); t.scale = *s; t });
        }
    }
}
