mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use common::{bump, correspondence_block, rotation_error, wave_discrepancy};
use hyperconv::blocks::block_forward;
use hyperconv::nn::{conv2d, ConvSpec};
use hyperconv::pde::{
    detect_blowup, heat_kernel, heat_step, quasilinear_step, Boundary, QuasiWeights, WaveSolver,
};
use hyperconv::{BlockVariant, PdeGrid, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn heat_via_conv(g: &PdeGrid) -> Tensor {
    let (n, hh, ww) = (g.channels(), g.height(), g.width());
    let x = g.u.reshape(&[n, 1, hh, ww]).unwrap();
    let spec = ConvSpec::dense(1, 1, 3, 1).with_padding(g.bc);
    let d = conv2d(&x, &heat_kernel(g.tau, g.h), &spec).unwrap();
    g.u.zip_with(&d.reshape(&[n, hh, ww]).unwrap(), |a, b| a + b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn heat_step_is_bit_exact_with_conv(seed in any::<u64>(), r in 0.01f64..0.25, neumann in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bc = if neumann { Boundary::NeumannReflect } else { Boundary::ZeroDirichlet };
        let h = 0.1;
        let g = PdeGrid::new(Tensor::randn(&[2, 9, 11], 1.0, &mut rng), h, r * h * h, bc).unwrap();
        let ours = heat_step(&g).unwrap().u;
        let conv = heat_via_conv(&g);
        for (a, b) in ours.data().iter().zip(conv.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn heat_obeys_maximum_principle(seed in any::<u64>(), steps in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = PdeGrid::new(Tensor::randn(&[1, 10, 10], 1.0, &mut rng), 0.1, 0.0025, Boundary::ZeroDirichlet).unwrap();
        // The zero boundary takes part in the extremes.
        let hi = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(*v));
        let lo = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.min(*v));
        for _ in 0..steps {
            let next = heat_step(&g).unwrap();
            prop_assert!(hi(&next.u) <= hi(&g.u));
            prop_assert!(lo(&next.u) >= lo(&g.u));
            g = next;
        }
    }
}

#[test]
fn rotation_error_shrinks_under_refinement() {
    let e: Vec<f64> = [32, 64, 128].iter().map(|&k| rotation_error(k, FRAC_PI_2)).collect();
    assert!(e[0] / e[1] >= 1.8, "{e:?}");
    assert!(e[1] / e[2] >= 1.8, "{e:?}");
}

#[test]
fn full_revolution_returns_near_initial_data() {
    let quarter = rotation_error(64, FRAC_PI_2);
    let full = rotation_error(64, 2.0 * PI);
    // Diffusive error accumulates roughly linearly in time.
    assert!(full < 5.0 * quarter, "{full} vs {quarter}");
    assert!(full < 0.1, "{full}");
}

#[test]
fn wave_system_agrees_with_leapfrog_at_first_order() {
    let levels: Vec<(f64, f64)> = [48, 68, 96].iter().map(|&n| wave_discrepancy(n)).collect();
    for w in levels.windows(2) {
        let (e0, t0) = w[0];
        let (e1, t1) = w[1];
        let normalized = (e0 / e1) / (t0 / t1);
        assert!((0.85..=1.15).contains(&normalized), "{levels:?}");
    }
}

#[test]
fn standing_mode_period() {
    let k = 64;
    let h = 1.0 / k as f64;
    let n = k - 1;
    let tau = 0.005;
    let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, tau, Boundary::ZeroDirichlet).unwrap().with_origin(h, h);
    let g = g.with_field(g.sample(|x, y| (PI * x).sin() * (PI * y).sin()));
    let mut s = WaveSolver::new(&g, &Tensor::zeros(&[1, n, n])).unwrap();
    let centre = |s: &WaveSolver| s.current().u.at3(0, n / 2, n / 2);
    let mut crossings = Vec::new();
    let mut last = centre(&s);
    while crossings.len() < 4 {
        s.step();
        let now = centre(&s);
        if last.signum() != now.signum() {
            let frac = last / (last - now);
            crossings.push((s.steps() as f64 - 1.0 + frac) * tau);
        }
        last = now;
    }
    let period = (crossings[3] - crossings[1] + crossings[2] - crossings[0]) / 2.0;
    let expect = 2f64.sqrt();
    assert!((period - expect).abs() / expect < 0.02, "{period}");
}

#[test]
fn wave_energy_drift_over_100_steps() {
    let k = 64;
    let h = 1.0 / k as f64;
    let g = PdeGrid::new(Tensor::zeros(&[1, k - 1, k - 1]), h, 0.5 * h, Boundary::ZeroDirichlet)
        .unwrap()
        .with_origin(h, h);
    let g = g.with_field(g.sample(bump(0.4, 0.55, 0.08)));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v0 = Tensor::randn(g.u.shape(), 0.1, &mut rng);
    let mut s = WaveSolver::new(&g, &v0).unwrap();
    let e0 = s.energy();
    for _ in 0..100 {
        s.step();
        assert!(((s.energy() - e0) / e0).abs() < 0.01);
    }
}

/// `u_t = c u (u_x + u_y)` keeps `u` constant along `d(x, y)/dt = -c u (1, 1)`,
/// so `u(x, y, t) = f(x + c t u, y + c t u)`, solved here by fixed-point iteration.
fn burgers_exact(f: impl Fn(f64, f64) -> f64, c: f64, t: f64, x: f64, y: f64) -> f64 {
    let mut u = f(x, y);
    for _ in 0..200 {
        u = f(x + c * t * u, y + c * t * u);
    }
    u
}

#[test]
fn scalar_quasilinear_matches_characteristics() {
    let c = 1.0;
    let t_end = 0.2;
    let f = |x: f64, y: f64| 0.5 * bump(0.0, 0.0, 0.25)(x, y);
    let mut errs = Vec::new();
    for k in [16usize, 32, 64] {
        let h = 1.0 / k as f64;
        let n = 2 * k + 1;
        let steps = (t_end / (h * h)).ceil() as usize;
        let tau = t_end / steps as f64;
        let mut g = PdeGrid::centered(Tensor::zeros(&[1, n, n]), h, tau, Boundary::ZeroDirichlet).unwrap();
        g = g.with_field(g.sample(f));
        let one = Tensor::from_vec(vec![1.0]).reshape(&[1, 1]).unwrap();
        let cm = Tensor::from_vec(vec![c]).reshape(&[1, 1]).unwrap();
        let w = QuasiWeights::Factored { a: one.clone(), b: one, c: cm.clone(), d: cm };
        for _ in 0..steps {
            g = quasilinear_step(&g, &w, BlockVariant::Eq3).unwrap();
        }
        let exact = g.sample(|x, y| burgers_exact(f, c, t_end, x, y));
        errs.push(g.u.max_abs_diff(&exact));
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!(errs[2] < 2e-3, "{errs:?}");
}

fn random_weights(variant: BlockVariant, n: usize, rng: &mut ChaCha8Rng) -> QuasiWeights {
    let std = 1.0 / n as f64;
    if variant.is_tensor() {
        QuasiWeights::Tensor { a: Tensor::randn(&[n, n, n], std, rng), b: Tensor::randn(&[n, n, n], std, rng) }
    } else {
        let c = Tensor::randn(&[n, n], std.sqrt(), rng);
        // The factored Eq4 and Eq6 blocks carry one state mix for both directions.
        let d = if matches!(variant, BlockVariant::Eq4 | BlockVariant::Eq6) {
            c.clone()
        } else {
            Tensor::randn(&[n, n], std.sqrt(), rng)
        };
        QuasiWeights::Factored { a: Tensor::randn(&[n, n], std.sqrt(), rng), b: Tensor::randn(&[n, n], std.sqrt(), rng), c, d }
    }
}

#[test]
fn every_variant_block_matches_its_pde_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (hh, ww, h, tau) = (12, 10, 1.0 / 12.0, 0.01);
    for variant in BlockVariant::ALL {
        for bc in [Boundary::ZeroDirichlet, Boundary::NeumannReflect] {
            let n = 3;
            let w = random_weights(variant, n, &mut rng);
            let g = PdeGrid::new(Tensor::randn(&[n, hh, ww], 1.0, &mut rng), h, tau, bc).unwrap();
            let (cfg, bw) = correspondence_block(variant, n, &w, tau, h, bc);
            let block = block_forward(&g.u.reshape(&[1, n, hh, ww]).unwrap(), &cfg, &bw).unwrap();
            let pde = quasilinear_step(&g, &w, variant).unwrap();
            let dev = block.reshape(&[n, hh, ww]).unwrap().max_abs_diff(&pde.u);
            assert!(dev < 1e-10, "{variant:?} {bc:?}: {dev}");
        }
    }
}

#[test]
fn steep_scalar_data_blows_up_at_recorded_step() {
    let k = 16;
    let h = 1.0 / k as f64;
    let n = 2 * k + 1;
    let g = PdeGrid::centered(Tensor::zeros(&[1, n, n]), h, 0.05, Boundary::ZeroDirichlet).unwrap();
    let g = g.with_field(g.sample(|x, y| ((x + y) / 0.05).tanh()));
    let one = Tensor::from_vec(vec![1.0]).reshape(&[1, 1]).unwrap();
    let w = QuasiWeights::Factored { a: one.clone(), b: one.clone(), c: one.clone(), d: one };
    let b = detect_blowup(&g, 200, |g| quasilinear_step(g, &w, BlockVariant::Eq3)).unwrap();
    let b = b.expect("steep data with a large step must blow up");
    // Regression value from the first recorded run.
    assert_eq!(b.step, 18, "{b:?}");
    assert!(!b.non_finite && b.max_abs > 1e6 && b.max_grad > b.max_abs);
}
