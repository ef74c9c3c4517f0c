use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrl_core::align::{align_all, dfconv_block, AlignVariant, DfConvWeights, DfLayerWeights};
use vrl_core::nn::{conv2d, ConvParams, ConvRef};
use vrl_core::{Eager, Ops, Tensor};

type V = std::rc::Rc<Tensor<f64>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Offset, deform, middle, offset, deform: weight and bias for each.
fn block_params(rng: &mut ChaCha8Rng, c: usize, groups: usize, zero_offsets: bool) -> Vec<ConvParams<f64>> {
    let off = |rng: &mut ChaCha8Rng| {
        if zero_offsets {
            ConvParams::zeros(18 * groups, c, 3)
        } else {
            ConvParams::new(rand_tensor(rng, &[18 * groups, c, 3, 3], 0.1), rand_tensor(rng, &[18 * groups], 0.5)).unwrap()
        }
    };
    let square = |rng: &mut ChaCha8Rng| ConvParams::new(rand_tensor(rng, &[c, c, 3, 3], 0.5), rand_tensor(rng, &[c], 0.5)).unwrap();
    vec![off(rng), square(rng), square(rng), off(rng), square(rng)]
}

fn bind(e: &mut Eager, params: &[ConvParams<f64>]) -> Vec<(V, V)> {
    params.iter().map(|p| (e.parameter(&p.weight), e.parameter(&p.bias))).collect()
}

fn weights(v: &[(V, V)], variant: AlignVariant) -> DfConvWeights<'_, V> {
    let r = |i: usize| ConvRef::new(&v[i].0, &v[i].1);
    DfConvWeights {
        first: DfLayerWeights { offset: r(0), deform: r(1) },
        middle: variant.has_middle_conv().then(|| r(2)),
        second: DfLayerWeights { offset: r(3), deform: r(4) },
    }
}

fn variant() -> impl Strategy<Value = AlignVariant> {
    prop_oneof![Just(AlignVariant::DfConv), Just(AlignVariant::Df)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_offset_blocks_are_plain_convolutions(
        seed: u64, groups in 1usize..3, cpg in 1usize..3, h in 2usize..6, w in 2usize..6, variant in variant(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = groups * cpg;
        let params = block_params(&mut rng, c, groups, true);
        let (fr, fi) = (rand_tensor(&mut rng, &[1, c, h, w], 1.0), rand_tensor(&mut rng, &[1, c, h, w], 1.0));
        let mut e = Eager;
        let v = bind(&mut e, &params);
        let (r, i) = (e.constant(fr), e.constant(fi.clone()));
        let out = dfconv_block(&mut e, &r, &i, variant, &weights(&v, variant), groups).unwrap();
        let want = conv2d(&fi, &params[4]).unwrap();
        prop_assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn residual_variant_adds_the_supporting_features(seed: u64, groups in 1usize..3, h in 2usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 * groups;
        let params = block_params(&mut rng, c, groups, false);
        let (fr, fi) = (rand_tensor(&mut rng, &[1, c, h, w], 1.0), rand_tensor(&mut rng, &[1, c, h, w], 1.0));
        let mut e = Eager;
        let v = bind(&mut e, &params);
        let (r, i) = (e.constant(fr), e.constant(fi.clone()));
        let plain = dfconv_block(&mut e, &r, &i, AlignVariant::DfConv, &weights(&v, AlignVariant::DfConv), groups).unwrap();
        let res = dfconv_block(&mut e, &r, &i, AlignVariant::DfRes, &weights(&v, AlignVariant::DfRes), groups).unwrap();
        let diff = Tensor::from_fn(res.shape(), |k| res.data()[k] - plain.data()[k]);
        prop_assert!(diff.max_abs_diff(&fi) < 1e-12);
    }

    #[test]
    fn aligning_leaves_inputs_untouched(seed: u64, blocks in 1usize..5, h in 2usize..5, w in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, groups) = (2, 1);
        let sets: Vec<_> = (0..blocks).map(|_| block_params(&mut rng, c, groups, false)).collect();
        let feats: Vec<Tensor<f64>> = (0..5).map(|_| rand_tensor(&mut rng, &[1, c, h, w], 1.0)).collect();
        let mut e = Eager;
        let bound: Vec<_> = sets.iter().map(|p| bind(&mut e, p)).collect();
        let ws: Vec<_> = bound.iter().map(|v| weights(v, AlignVariant::DfConv)).collect();
        let vars: Vec<V> = feats.iter().map(|f| e.constant(f.clone())).collect();
        let out = align_all(&mut e, &vars, AlignVariant::DfConv, &ws, groups).unwrap();
        for (v, f) in vars.iter().zip(&feats) {
            prop_assert_eq!(&**v, f);
        }
        prop_assert_eq!(&*out[2], &feats[2]);
        for (support, j) in [0, 1, 3, 4].into_iter().enumerate() {
            let want = dfconv_block(&mut e, &vars[2], &vars[j], AlignVariant::DfConv, &ws[support % blocks], groups).unwrap();
            prop_assert_eq!(&*out[j], &*want);
        }
    }
}
