use hyperconv::nn::{apply_activation, Activation};
use hyperconv::{ChannelTransform, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field(n: usize, seed: u64) -> Tensor {
    Tensor::randn(&[2, n, 5, 4], 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn commutator(act: &Activation, t: &ChannelTransform, x: &Tensor) -> f64 {
    let a = apply_activation(&t.apply(x).unwrap(), act);
    let b = t.apply(&apply_activation(x, act)).unwrap();
    a.max_abs_diff(&b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn radial_activations_commute_with_rotations(n in 2usize..9, seed in any::<u64>(), radius in 0.3f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = ChannelTransform::random_orthogonal(n, &mut rng);
        let x = field(n, seed ^ 1);
        for act in [Activation::hardball(Some(radius)), Activation::softball(Some(radius)), Activation::softball(None)] {
            prop_assert!(commutator(&act, &q, &x) <= 1e-12);
        }
    }

    #[test]
    fn relu_commutes_with_permutations_exactly(n in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ChannelTransform::random_permutation(n, &mut rng);
        let x = field(n, seed ^ 2);
        prop_assert_eq!(commutator(&Activation::relu(), &p, &x), 0.0);
    }
}

#[test]
fn relu_does_not_commute_with_a_generic_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 4, 8] {
        let q = ChannelTransform::random_orthogonal(n, &mut rng);
        let err = commutator(&Activation::relu(), &q, &field(n, 9));
        assert!(err > 1e-3, "n = {n}: {err:e}");
    }
}

#[test]
fn positive_scalings_commute_with_relu_but_not_with_balls() {
    let d = ChannelTransform::diagonal(&[0.5, 2.0, 1.5]).unwrap();
    let x = field(3, 4);
    assert!(commutator(&Activation::relu(), &d, &x) <= 1e-15);
    assert!(commutator(&Activation::hardball(Some(1.0)), &d, &x) > 1e-3);
}
