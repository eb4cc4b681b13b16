mod common;

use common::{randomize_batchnorm, tiny_config};
use hyperconv::blocks::{block_forward, BlockWeights};
use hyperconv::blocks::ActivationPlacement;
use hyperconv::nn::Activation;
use hyperconv::pde::{tensor_step, Boundary};
use hyperconv::symmetry::{
    naive_transform_block, sparsify_search, symmetrize_jk, transform_network, transform_tensor_form, verify_invariance,
};
use hyperconv::{BlockConfig, BlockVariant, ChannelTransform, Model, PdeGrid, Tensor, TransformKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probes(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, 3, 8, 8], 1.0, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_law_is_a_group_action(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n, n, n], 1.0, &mut rng);
        let t1 = ChannelTransform::random_general(n, &mut rng);
        let t2 = ChannelTransform::random_general(n, &mut rng);
        let both = transform_tensor_form(&a, &t1.compose(&t2).unwrap()).unwrap();
        let seq = transform_tensor_form(&transform_tensor_form(&a, &t2).unwrap(), &t1).unwrap();
        prop_assert!(both.max_abs_diff(&seq) < 1e-10);
        let back = transform_tensor_form(&transform_tensor_form(&a, &t1).unwrap(), &t1.inverse()).unwrap();
        prop_assert!(back.max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn pde_steps_are_gl_covariant(seed in any::<u64>(), n in 1usize..7, conservation in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n, n, n], 0.3, &mut rng);
        let b = Tensor::randn(&[n, n, n], 0.3, &mut rng);
        let t = ChannelTransform::random_general(n, &mut rng);
        let (ta, tb) = (transform_tensor_form(&a, &t).unwrap(), transform_tensor_form(&b, &t).unwrap());
        let mut g = PdeGrid::new(Tensor::randn(&[n, 6, 6], 1.0, &mut rng), 0.5, 0.01, Boundary::ZeroDirichlet).unwrap();
        let mut gt = g.with_field(t.apply(&g.u).unwrap());
        let k = 3;
        for _ in 0..k {
            g = tensor_step(&g, &a, &b, conservation).unwrap();
            gt = tensor_step(&gt, &ta, &tb, conservation).unwrap();
        }
        prop_assert!(gt.u.max_abs_diff(&t.apply(&g.u).unwrap()) < 1e-8 * k as f64);
    }

    #[test]
    fn symmetrize_jk_is_invisible_to_conservation_form(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n, n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n, n], 1.0, &mut rng);
        let g = PdeGrid::new(Tensor::randn(&[n, 5, 7], 1.0, &mut rng), 0.3, 0.01, Boundary::NeumannReflect).unwrap();
        let full = tensor_step(&g, &a, &b, true).unwrap();
        let sym = tensor_step(&g, &symmetrize_jk(&a).unwrap(), &symmetrize_jk(&b).unwrap(), true).unwrap();
        prop_assert!(full.u.max_abs_diff(&sym.u) < 1e-12);
    }
}

#[test]
fn swap_is_an_index_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
    let t = ChannelTransform::permutation(&[1, 0]).unwrap();
    let b = transform_tensor_form(&a, &t).unwrap();
    let s = |i: usize| 1 - i;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                assert_eq!(b.data()[(i * 2 + j) * 2 + k], a.data()[(s(i) * 2 + s(j)) * 2 + s(k)]);
            }
        }
    }
}

#[test]
fn one_gl_step_through_the_block_kernels() {
    use hyperconv::blocks::tensorform_forward;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 3;
    let a = Tensor::randn(&[n, n, n], 0.5, &mut rng);
    let b = Tensor::randn(&[n, n, n], 0.5, &mut rng);
    let t = ChannelTransform::random_general(n, &mut rng);
    let u = Tensor::randn(&[2, n, 7, 7], 1.0, &mut rng);
    let base = tensorform_forward(&u, &a, &b, 0.05, 0.2, Boundary::ZeroDirichlet).unwrap();
    let moved = tensorform_forward(
        &t.apply(&u).unwrap(),
        &transform_tensor_form(&a, &t).unwrap(),
        &transform_tensor_form(&b, &t).unwrap(),
        0.05,
        0.2,
        Boundary::ZeroDirichlet,
    )
    .unwrap();
    assert!(moved.max_abs_diff(&t.apply(&base).unwrap()) < 1e-10);
}

#[test]
fn permuted_relu_network_predicts_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [BlockVariant::Eq3, BlockVariant::Eq4, BlockVariant::Eq6, BlockVariant::Eq7, BlockVariant::TensorForm] {
        let mut cfg = tiny_config(variant, [4, 8]);
        cfg.activation = Activation::relu();
        cfg.activation_placement = ActivationPlacement::AllBlocks;
        let mut model = Model::new(cfg, 3).unwrap();
        randomize_batchnorm(&mut model, &mut rng);
        let ts: Vec<_> = model.config.stage_channels.iter().map(|&n| ChannelTransform::random_permutation(n, &mut rng)).collect();
        let moved = transform_network(&model, &ts).unwrap();
        let r = verify_invariance(&model, &moved, &probes(16, &mut rng)).unwrap();
        assert!(r.max_deviation < 1e-12, "{variant:?}: {}", r.max_deviation);
        assert_eq!(r.argmax_agreement, 1.0);
    }
}

#[test]
fn scaled_identity_activation_network_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [BlockVariant::Eq3, BlockVariant::Eq4, BlockVariant::Eq6, BlockVariant::Eq7] {
        let mut cfg = tiny_config(variant, [4, 8]);
        cfg.activation = Activation::identity();
        let mut model = Model::new(cfg, 5).unwrap();
        randomize_batchnorm(&mut model, &mut rng);
        let ts: Vec<_> =
            model.config.stage_channels.iter().map(|&n| ChannelTransform::random_diagonal(n, true, &mut rng)).collect();
        let moved = transform_network(&model, &ts).unwrap();
        let r = verify_invariance(&model, &moved, &probes(8, &mut rng)).unwrap();
        assert!(r.max_deviation < 1e-8, "{variant:?}: {}", r.max_deviation);
    }
}

#[test]
fn eq5_network_accepts_only_aligned_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = tiny_config(BlockVariant::Eq5, [4, 8]);
    let model = Model::new(cfg, 7).unwrap();
    let ts: Vec<_> = model.config.stage_channels.iter().map(|&n| ChannelTransform::random_permutation(n, &mut rng)).collect();
    assert!(transform_network(&model, &ts).is_err());
    let mut cfg = tiny_config(BlockVariant::Eq5, [4, 4]);
    cfg.stage_depths = vec![2];
    cfg.stage_channels = vec![4];
    let mut model = Model::new(cfg, 7).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    let p = ChannelTransform::random_permutation(4, &mut rng);
    let moved = transform_network(&model, &[p]).unwrap();
    let r = verify_invariance(&model, &moved, &probes(4, &mut rng)).unwrap();
    assert!(r.max_deviation < 1e-12);
}

fn softball_tensor_model(variant: BlockVariant, seed: u64) -> Model {
    let mut cfg = tiny_config(variant, [4, 6]);
    cfg.batchnorm = false;
    cfg.activation = Activation::softball(None);
    cfg.activation_placement = ActivationPlacement::AtDownsample;
    Model::new(cfg, seed).unwrap()
}

#[test]
fn orthogonal_transform_of_softball_tensor_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [BlockVariant::TensorForm, BlockVariant::Conservation] {
        let model = softball_tensor_model(variant, 9);
        let ts: Vec<_> = model.config.stage_channels.iter().map(|&n| ChannelTransform::random_orthogonal(n, &mut rng)).collect();
        let moved = transform_network(&model, &ts).unwrap();
        let r = verify_invariance(&model, &moved, &probes(8, &mut rng)).unwrap();
        assert!(r.max_deviation < 1e-8, "{variant:?}: {}", r.max_deviation);
    }
}

#[test]
fn orthogonal_transform_is_rejected_with_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cfg = tiny_config(BlockVariant::TensorForm, [4, 6]);
    cfg.activation = Activation::softball(None);
    let model = Model::new(cfg, 1).unwrap();
    let ts: Vec<_> = model.config.stage_channels.iter().map(|&n| ChannelTransform::random_orthogonal(n, &mut rng)).collect();
    assert!(transform_network(&model, &ts).is_err());
}

#[test]
fn generic_rotation_breaks_a_factored_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cfg = BlockConfig::new(BlockVariant::Eq3, 4);
    cfg.batchnorm = false;
    let w = BlockWeights::init(&cfg, 1, &mut rng).unwrap();
    let q = ChannelTransform::random_orthogonal(4, &mut rng);
    let u = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng);
    let base = block_forward(&u, &cfg, &w).unwrap();
    let moved = block_forward(&q.apply(&u).unwrap(), &cfg, &naive_transform_block(&cfg, &w, &q).unwrap()).unwrap();
    assert!(moved.max_abs_diff(&q.apply(&base).unwrap()) > 1e-3);
    // The same rule is exact for a permutation.
    let p = ChannelTransform::random_permutation(4, &mut rng);
    let moved = block_forward(&p.apply(&u).unwrap(), &cfg, &naive_transform_block(&cfg, &w, &p).unwrap()).unwrap();
    assert!(moved.max_abs_diff(&p.apply(&base).unwrap()) < 1e-12);
}

#[test]
fn self_comparison_and_reinitialized_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = Model::new(tiny_config(BlockVariant::Eq3, [4, 8]), 1).unwrap();
    let p = probes(6, &mut rng);
    assert_eq!(verify_invariance(&model, &model, &p).unwrap().max_deviation, 0.0);
    let other = Model::new(tiny_config(BlockVariant::Eq3, [4, 8]), 2).unwrap();
    assert!(verify_invariance(&model, &other, &p).unwrap().max_deviation > 1e-3);
}

#[test]
fn zero_lambda_keeps_identity() {
    let model = Model::new(tiny_config(BlockVariant::Eq3, [4, 8]), 1).unwrap();
    for kind in [TransformKind::Permutation, TransformKind::Diagonal] {
        let out = sparsify_search(&model, kind, 5, 0.0, 0).unwrap();
        assert!(out.transforms.iter().all(|t| t.is_identity()), "{kind:?}");
    }
    let soft = softball_tensor_model(BlockVariant::TensorForm, 3);
    let out = sparsify_search(&soft, TransformKind::Orthogonal, 5, 0.0, 0).unwrap();
    assert!(out.transforms.iter().all(|t| t.is_identity()));
}

#[test]
fn diagonal_search_lowers_l1_and_keeps_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut cfg = tiny_config(BlockVariant::Eq3, [4, 8]);
    cfg.activation = Activation::relu();
    let mut model = Model::new(cfg, 1).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    let out = sparsify_search(&model, TransformKind::Diagonal, 40, 1.0, 0).unwrap();
    assert!(out.l1_after < out.l1_before, "{} vs {}", out.l1_after, out.l1_before);
    assert!(out.transforms.iter().all(|t| t.as_diagonal().unwrap().iter().all(|d| *d > 0.0)));
    let r = verify_invariance(&model, &out.model, &probes(8, &mut rng)).unwrap();
    assert!(r.max_deviation < 1e-8, "{}", r.max_deviation);
}

/// Single-stage tensor network whose coefficient tensors are a hidden
/// rotation of exactly sparse ones.
fn planted_model(seed: u64) -> (Model, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = tiny_config(BlockVariant::TensorForm, [4, 4]);
    cfg.stage_depths = vec![2];
    cfg.stage_channels = vec![4];
    cfg.batchnorm = false;
    cfg.activation = Activation::softball(None);
    let mut model = Model::new(cfg, seed).unwrap();
    let hidden = ChannelTransform::random_orthogonal(4, &mut rng);
    let mut planted_zeros = 0;
    for block in &mut model.blocks {
        for t in [&mut block.weights.tensor_a, &mut block.weights.tensor_b].into_iter().flatten() {
            let sparse = Tensor::from_fn(&[4, 4, 4], |i| {
                if (i * 7 + 3) % 5 < 2 {
                    0.3 * (1.0 + (i % 3) as f64)
                } else {
                    0.0
                }
            });
            planted_zeros += sparse.data().iter().filter(|v| **v == 0.0).count();
            *t = transform_tensor_form(&sparse, &hidden).unwrap();
        }
    }
    (model, planted_zeros)
}

#[test]
fn orthogonal_search_recovers_planted_sparsity() {
    let (model, planted) = planted_model(21);
    let out = sparsify_search(&model, TransformKind::Orthogonal, 200, 1.0, 5).unwrap();
    assert!(out.near_zero_before < planted);
    assert!(out.near_zero_after >= planted, "{} of {} (planted {planted})", out.near_zero_after, out.total);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let r = verify_invariance(&model, &out.model, &probes(8, &mut rng)).unwrap();
    assert!(r.max_deviation < 1e-8);
}

#[test]
fn permutation_search_keeps_planted_sparsity() {
    // L1 and zero counts are permutation invariant, so the planted level is kept.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut model = Model::new(tiny_config(BlockVariant::Eq3, [4, 8]), 1).unwrap();
    for block in &mut model.blocks {
        let proj = block.weights.proj.as_mut().unwrap();
        for (i, v) in proj.data_mut().iter_mut().enumerate() {
            if i % 3 != 0 {
                *v = 0.0;
            }
        }
    }
    let (before, _) = hyperconv::symmetry::sparsity(&hyperconv::symmetry::pointwise_weights(&model));
    let out = sparsify_search(&model, TransformKind::Permutation, 3, 1.0, 0).unwrap();
    assert!(out.near_zero_after >= before);
    let r = verify_invariance(&model, &out.model, &probes(4, &mut rng)).unwrap();
    assert!(r.max_deviation < 1e-12);
}
