//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use hyperconv::blocks::{central_difference_kernels, BlockWeights};
use hyperconv::pde::{
    discrete_l2, rotation_advect, wave_solve_second_order, wave_step_first_order_system, Boundary, QuasiWeights,
};
use hyperconv::{BlockConfig, BlockVariant, PdeGrid, Tensor};

/// Gaussian bump `exp(-|p - c|^2 / (2 s^2))`.
pub fn bump(cx: f64, cy: f64, s: f64) -> impl Fn(f64, f64) -> f64 + Copy {
    move |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
}

/// Upwind rotation of a smooth bump to `t_final` on `[-1, 1]^2` with spacing
/// `1/k` and Courant number 1/2; returns the discrete L2 error against the
/// exactly rotated bump.
pub fn rotation_error(k: usize, t_final: f64) -> f64 {
    let h = 1.0 / k as f64;
    let n = 2 * k + 1;
    let g = PdeGrid::centered(Tensor::zeros(&[1, n, n]), h, h / 4.0, Boundary::ZeroDirichlet).unwrap();
    let f = bump(0.2, 0.0, 0.2);
    let g = g.with_field(g.sample(f));
    let out = rotation_advect(&g, t_final).unwrap();
    let (c, s) = (t_final.cos(), t_final.sin());
    let exact = g.sample(|x, y| f(x * c - y * s, x * s + y * c));
    discrete_l2(&out.u.zip_with(&exact, |a, b| a - b).unwrap(), h)
}

/// Wave equation from a resting Gaussian on `[0, 2]^2` (spacing `1/n`) to
/// `t = 0.1`, once by leapfrog and once through the first-order system with
/// `u` recovered by integrating `u_t`. Time steps satisfy `tau <= h^2 / 2`.
/// Returns `(max |difference|, tau)`.
pub fn wave_discrepancy(n: usize) -> (f64, f64) {
    let t_end = 0.1;
    let s2 = 0.02;
    let h = 1.0 / n as f64;
    let m = 2 * n - 1;
    let steps = (t_end / (0.5 * h * h)).ceil() as usize;
    let tau = t_end / steps as f64;
    let g = PdeGrid::new(Tensor::zeros(&[1, m, m]), h, tau, Boundary::ZeroDirichlet).unwrap().with_origin(h, h);
    let f = |x: f64, y: f64| (-((x - 1.0).powi(2) + (y - 1.0).powi(2)) / s2).exp();
    let u0 = g.sample(f);
    let leap = wave_solve_second_order(&g.with_field(u0.clone()), &Tensor::zeros(&[1, m, m]), steps).unwrap();

    let plane = m * m;
    let mut w = Tensor::zeros(&[3, m, m]);
    let ux = g.sample(|x, y| -2.0 * (x - 1.0) / s2 * f(x, y));
    let uy = g.sample(|x, y| -2.0 * (y - 1.0) / s2 * f(x, y));
    w.data_mut()[..plane].copy_from_slice(ux.data());
    w.data_mut()[plane..2 * plane].copy_from_slice(uy.data());
    let mut wg = g.with_field(w);
    let mut u = u0.into_data();
    for _ in 0..steps {
        for (p, v) in u.iter_mut().enumerate() {
            *v += tau * wg.u.data()[2 * plane + p];
        }
        wg = wave_step_first_order_system(&wg).unwrap();
    }
    let err = leap.u.data().iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (err, tau)
}

/// Block configuration and weights for which one block forward equals one
/// Euler step of the matching quasi-linear system: no batchnorm, no
/// activation, shared central-difference kernels, and `tau` folded into the
/// last linear map.
pub fn correspondence_block(
    variant: BlockVariant,
    n: usize,
    w: &QuasiWeights,
    tau: f64,
    h: f64,
    padding: Boundary,
) -> (BlockConfig, BlockWeights) {
    let mut cfg = BlockConfig::new(variant, n);
    cfg.expansion = 2;
    cfg.batchnorm = false;
    cfg.weight_shared = true;
    cfg.padding = padding;
    let mut bw = BlockWeights::zeros(&cfg).unwrap();
    bw.dw = central_difference_kernels(h);
    match w {
        QuasiWeights::Factored { a, b, c, d } => {
            // Row 2j of an interleaved mix holds C_j (x slot), row 2j+1 holds D_j (y slot).
            let interleave = |scale: f64| {
                Tensor::from_fn(&[2 * n, n], |t| {
                    let (r, k) = (t / n, t % n);
                    let src = if r % 2 == 0 { c } else { d };
                    scale * src.at2(r / 2, k)
                })
            };
            let proj = Tensor::from_fn(&[n, 2 * n], |t| {
                let (i, col) = (t / (2 * n), t % (2 * n));
                let src = if col % 2 == 0 { a } else { b };
                tau * src.at2(i, col / 2)
            });
            match variant {
                BlockVariant::Eq3 | BlockVariant::Eq7 => {
                    bw.mix = Some(interleave(1.0));
                    bw.proj = Some(proj);
                }
                BlockVariant::Eq4 | BlockVariant::Eq6 => {
                    bw.mix = Some(c.clone());
                    bw.proj = Some(proj);
                }
                BlockVariant::Eq5 => bw.mix = Some(interleave(tau)),
                _ => unreachable!(),
            }
        }
        QuasiWeights::Tensor { a, b } => {
            bw.tensor_a = Some(a.map(|v| tau * v));
            bw.tensor_b = Some(b.map(|v| tau * v));
        }
    }
    (cfg, bw)
}

/// Two-stage desk network small enough for exhaustive checks.
pub fn tiny_config(variant: BlockVariant, widths: [usize; 2]) -> hyperconv::NetworkConfig {
    let mut cfg = hyperconv::NetworkConfig::desk(variant);
    cfg.stem_channels = widths[0];
    cfg.stage_channels = widths.to_vec();
    cfg.stage_depths = vec![2, 2];
    cfg.num_classes = 5;
    cfg.image_size = 8;
    if variant.is_tensor() {
        cfg.expansion = 2;
    }
    cfg
}

/// Replaces every batchnorm's affine parameters and running statistics with
/// random values, standing in for a trained model.
pub fn randomize_batchnorm(model: &mut hyperconv::Model, rng: &mut rand_chacha::ChaCha8Rng) {
    for (_, bn) in model.batchnorms_mut() {
        let c = bn.gamma.len();
        bn.gamma = Tensor::uniform(&[c], 0.5, 1.5, rng);
        bn.beta = Tensor::randn(&[c], 0.2, rng);
        bn.running_mean = Tensor::randn(&[c], 0.2, rng);
        bn.running_var = Tensor::uniform(&[c], 0.5, 2.0, rng);
    }
}

/// Tiny three-channel Eq3 classifier on 8x8 images with two stages of width
/// `width`.
pub fn tiny_classifier(width: usize, classes: usize) -> hyperconv::NetworkConfig {
    let mut cfg = tiny_config(BlockVariant::Eq3, [width, width]);
    cfg.num_classes = classes;
    cfg
}

/// Short schedule used by the synthetic training runs.
pub fn tiny_schedule(epochs: usize, seed: u64) -> hyperconv::TrainConfig {
    hyperconv::TrainConfig {
        peak_lr: 0.1,
        warmup_epochs: 2,
        total_epochs: epochs,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

/// Train-mode cross-entropy without recording gradients.
pub fn train_loss(model: &hyperconv::Model, x: &Tensor, y: &[usize]) -> f64 {
    let mut g = hyperconv::Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward_graph(&mut g, xv, hyperconv::nn::Mode::Train, false).unwrap();
    let loss = g.softmax_cross_entropy(out.logits, y).unwrap();
    g.value(loss).item().unwrap()
}

/// Worst relative disagreement between autodiff and a fourth-order central
/// difference with step `eps`, over every trainable scalar. The relative
/// error of one entry is `|a - f| / max(|a|, |f|, floor)`.
pub fn gradient_check(model: &hyperconv::Model, x: &Tensor, y: &[usize], eps: f64, floor: f64) -> (f64, String) {
    let (_, grads, _) = model.clone().loss_and_grads(x, y, hyperconv::nn::Mode::Train).unwrap();
    let mut worst = (0.0, String::new());
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        for i in 0..grads[p].len() {
            let at = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[p].1.data_mut()[i] += delta;
                train_loss(&m, x, y)
            };
            let fd = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            let ad = grads[p].data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: autodiff {ad:e}, fd {fd:e}"));
            }
        }
    }
    worst
}

/// Two blocks of width 4 (the second one downsampling) on 8x8 images.
pub fn two_block_config(variant: BlockVariant) -> hyperconv::NetworkConfig {
    let mut cfg = tiny_config(variant, [4, 4]);
    cfg.stage_depths = vec![1, 1];
    cfg.num_classes = 3;
    cfg
}
