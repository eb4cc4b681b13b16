use super::{central_diff, PdeGrid};
use crate::error::Result;

/// Blow-up threshold as a multiple of the initial `max |u|`.
pub const DEFAULT_BLOWUP_FACTOR: f64 = 1e6;

/// Diagnostic for the first step at which a run left the finite, bounded regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blowup {
    pub step: usize,
    /// `max |u|` over finite entries.
    pub max_abs: f64,
    /// Largest central-difference gradient norm over finite entries.
    pub max_grad: f64,
    pub non_finite: bool,
}

/// Watches a sequence of grids against a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowupMonitor {
    pub threshold: f64,
}

impl BlowupMonitor {
    pub fn new(initial: &PdeGrid) -> Self {
        Self::with_factor(initial, DEFAULT_BLOWUP_FACTOR)
    }

    /// Threshold `factor * max |u0|`, falling back to `factor` for zero data.
    pub fn with_factor(initial: &PdeGrid, factor: f64) -> Self {
        let m = initial.u.max_abs();
        BlowupMonitor { threshold: factor * if m > 0.0 { m } else { 1.0 } }
    }

    /// Diagnostic if `g` at `step` is non-finite or above the threshold.
    pub fn check(&self, step: usize, g: &PdeGrid) -> Option<Blowup> {
        let data = g.u.data();
        let non_finite = data.iter().any(|v| !v.is_finite());
        let max_abs = data.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
        if !non_finite && max_abs <= self.threshold {
            return None;
        }
        Some(Blowup { step, max_abs, max_grad: max_gradient(g), non_finite })
    }
}

fn max_gradient(g: &PdeGrid) -> f64 {
    let (hh, ww) = (g.height(), g.width());
    let plane = hh * ww;
    let mut best = 0.0f64;
    for c in 0..g.channels() {
        let (dx, dy) = central_diff(&g.u.data()[c * plane..(c + 1) * plane], hh, ww, g.h, g.bc);
        for (x, y) in dx.iter().zip(&dy) {
            let n = x.hypot(*y);
            if n.is_finite() {
                best = best.max(n);
            }
        }
    }
    best
}

/// Applies `step` up to `max_steps` times from `g0` and reports the first step
/// (1-based) whose output blows up, using the default threshold.
pub fn detect_blowup(
    g0: &PdeGrid,
    max_steps: usize,
    mut step: impl FnMut(&PdeGrid) -> Result<PdeGrid>,
) -> Result<Option<Blowup>> {
    let monitor = BlowupMonitor::new(g0);
    if let Some(b) = monitor.check(0, g0) {
        return Ok(Some(b));
    }
    let mut g = g0.clone();
    for k in 1..=max_steps {
        g = step(&g)?;
        if let Some(b) = monitor.check(k, &g) {
            return Ok(Some(b));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{heat_step, Boundary};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heat_never_blows_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = PdeGrid::new(Tensor::randn(&[1, 16, 16], 1.0, &mut rng), 0.1, 0.0025, Boundary::ZeroDirichlet).unwrap();
        assert_eq!(detect_blowup(&g, 500, heat_step).unwrap(), None);
    }

    #[test]
    fn injected_nan_is_reported_at_its_step() {
        let g = PdeGrid::new(Tensor::ones(&[1, 4, 4]), 0.1, 0.001, Boundary::NeumannReflect).unwrap();
        let mut count = 0;
        let b = detect_blowup(&g, 50, |g| {
            count += 1;
            let mut next = heat_step(g)?;
            if count == 7 {
                next.u.data_mut()[5] = f64::NAN;
            }
            Ok(next)
        })
        .unwrap()
        .unwrap();
        assert_eq!(b.step, 7);
        assert!(b.non_finite);
    }
}
