use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrl_core::attention::{
    attention, eksa_block, softmax_rows, topk_mask, AttentionConfig, AttentionKernel, AttentionVariant, AttentionWeights, TopK,
};
use vrl_core::nn::{conv, ConvParams, ConvRef};
use vrl_core::{Eager, Ops, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn linear(rng: &mut ChaCha8Rng, d: usize) -> ConvParams<f64> {
    ConvParams::new(rand_tensor(rng, &[d, d, 1, 1], 1.0), rand_tensor(rng, &[d], 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ksa_with_all_tokens_is_sa(seed: u64, n in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[n, d], 1.0));
        let l = linear(&mut rng, d);
        let sa = attention(AttentionKernel::Sa, &q, &k, &v, &l, 0.7).unwrap();
        let ksa = attention(AttentionKernel::Ksa(n), &q, &k, &v, &l, 0.7).unwrap();
        prop_assert!(sa.max_abs_diff(&ksa) < 1e-12);
    }

    #[test]
    fn masked_rows_keep_k_entries_summing_to_one(seed: u64, rows in 1usize..6, width in 1usize..12, k in 1usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[rows, width], 3.0);
        let p = softmax_rows(&topk_mask(&a, k).unwrap()).unwrap();
        for row in p.data().chunks(width) {
            prop_assert_eq!(row.iter().filter(|v| **v != 0.0).count(), k.min(width));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kept_entries_dominate_dropped_ones(seed: u64, width in 2usize..10, k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[1, width], |_| rng.random_range(0..4) as f64);
        let m = topk_mask(&a, k).unwrap();
        let kept: Vec<usize> = (0..width).filter(|&j| m.data()[j].is_finite()).collect();
        prop_assert_eq!(kept.len(), k.min(width));
        for j in 0..width {
            if !kept.contains(&j) {
                prop_assert!(kept.iter().all(|&i| a.data()[i] >= a.data()[j]));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_scale_block_is_the_stem(
        seed: u64, c in 2usize..6, h in 1usize..5, w in 1usize..5,
        variant in prop_oneof![Just(AttentionVariant::Sa), Just(AttentionVariant::Ksa), Just(AttentionVariant::Eksa)],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = [
            ConvParams::new(rand_tensor(&mut rng, &[c, 15, 3, 3], 0.3), rand_tensor(&mut rng, &[c], 0.3)).unwrap(),
            ConvParams::new(rand_tensor(&mut rng, &[c, c, 3, 3], 0.3), rand_tensor(&mut rng, &[c], 0.3)).unwrap(),
        ];
        let lin: Vec<_> = (0..4).map(|_| linear(&mut rng, c)).collect();
        let pics: Vec<Tensor<f64>> = (0..5).map(|_| rand_tensor(&mut rng, &[1, 3, h, w], 1.0)).collect();
        let mut e = Eager;
        let v: Vec<_> = stem.iter().chain(&lin).flat_map(|p| [e.parameter(&p.weight), e.parameter(&p.bias)]).collect();
        let r = |i: usize| ConvRef::new(&v[2 * i], &v[2 * i + 1]);
        let zero = e.parameter(&Tensor::scalar(0.0));
        let weights = AttentionWeights { stem: [r(0), r(1)], query: r(2), key: r(3), value: r(4), out: r(5), scale: &zero };
        let cfg = AttentionConfig { variant, k: TopK::Count(1), k_tokens: TopK::Count(1), residual: true, ..Default::default() };
        let pv: Vec<_> = pics.iter().map(|p| e.constant(p.clone())).collect();
        let out = eksa_block(&mut e, &pv, &cfg, &weights).unwrap();

        let refs: Vec<_> = pv.iter().collect();
        let stacked = e.concat_channels(&refs).unwrap();
        let hidden = conv(&mut e, &stacked, &v[0], &v[1]).unwrap();
        let hidden = e.relu(&hidden).unwrap();
        let initial = conv(&mut e, &hidden, &v[2], &v[3]).unwrap();
        prop_assert_eq!(&*out, &*initial);
    }
}
