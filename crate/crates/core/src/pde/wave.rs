use super::{central_diff, laplacian, read, Boundary, PdeGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Leapfrog integrator for `u_tt = Laplacian(u)`.
///
/// Holds `u^{n-1}` and `u^n`; the first step is seeded by `u^1 = u^0 + tau v^0`.
#[derive(Debug, Clone)]
pub struct WaveSolver {
    prev: Tensor,
    grid: PdeGrid,
    steps: usize,
}

impl WaveSolver {
    /// Starts from `u0` (the grid's field) and initial velocity `v0`; the state
    /// after construction is step 1.
    pub fn new(u0: &PdeGrid, v0: &Tensor) -> Result<Self> {
        if v0.shape() != u0.u.shape() {
            return Err(Error::shape("wave initial velocity", v0.shape(), u0.u.shape()));
        }
        let bound = u0.h / 2f64.sqrt();
        if u0.tau > bound {
            return Err(Error::Cfl { scheme: "wave", tau: u0.tau, bound });
        }
        let tau = u0.tau;
        let u1 = u0.u.zip_with(v0, |u, v| u + tau * v)?;
        Ok(WaveSolver { prev: u0.u.clone(), grid: u0.with_field(u1), steps: 1 })
    }

    /// `u^{n+1} = 2u^n - u^{n-1} + tau^2 Laplacian(u^n)`.
    pub fn step(&mut self) {
        let g = &self.grid;
        let (hh, ww) = (g.height(), g.width());
        let plane = hh * ww;
        let t2 = g.tau * g.tau;
        let cur = g.u.data();
        let mut next = vec![0.0; cur.len()];
        for c in 0..g.channels() {
            let range = c * plane..(c + 1) * plane;
            let lap = laplacian(&cur[range.clone()], hh, ww, g.h, g.bc);
            let prev = &self.prev.data()[range.clone()];
            for (i, dst) in next[range.clone()].iter_mut().enumerate() {
                *dst = 2.0 * cur[range.start + i] - prev[i] + t2 * lap[i];
            }
        }
        let next = Tensor::from_parts(g.u.shape().to_vec(), next);
        self.prev = std::mem::replace(&mut self.grid.u, next);
        self.steps += 1;
    }

    pub fn current(&self) -> &PdeGrid {
        &self.grid
    }

    pub fn previous(&self) -> &Tensor {
        &self.prev
    }

    /// Index of the current time level.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Staggered energy between the previous and current levels.
    pub fn energy(&self) -> f64 {
        wave_energy(&self.prev, &self.grid.u, self.grid.h, self.grid.tau, self.grid.bc)
    }
}

/// Runs the leapfrog scheme to time level `steps` (at least 1).
pub fn wave_solve_second_order(u0: &PdeGrid, v0: &Tensor, steps: usize) -> Result<PdeGrid> {
    let mut s = WaveSolver::new(u0, v0)?;
    if steps == 0 {
        return Ok(u0.clone());
    }
    while s.steps() < steps {
        s.step();
    }
    Ok(s.grid)
}

/// Discrete energy conserved exactly by leapfrog:
/// `1/2 sum ((u1-u0)/tau)^2 h^2 + 1/2 sum over edges grad u1 . grad u0 h^2`,
/// with forward differences on every edge including those to ghost cells.
pub fn wave_energy(u0: &Tensor, u1: &Tensor, h: f64, tau: f64, bc: Boundary) -> f64 {
    let s = u0.shape();
    let (hh, ww) = (s[1], s[2]);
    let plane = hh * ww;
    let mut kinetic = 0.0;
    for (a, b) in u0.data().iter().zip(u1.data()) {
        let v = (b - a) / tau;
        kinetic += v * v;
    }
    let mut potential = 0.0;
    for c in 0..s[0] {
        let p0 = &u0.data()[c * plane..(c + 1) * plane];
        let p1 = &u1.data()[c * plane..(c + 1) * plane];
        for y in -1..hh as isize {
            for x in -1..ww as isize {
                if y >= 0 {
                    let g0 = read(p0, hh, ww, y, x + 1, bc) - read(p0, hh, ww, y, x, bc);
                    let g1 = read(p1, hh, ww, y, x + 1, bc) - read(p1, hh, ww, y, x, bc);
                    potential += g0 * g1;
                }
                if x >= 0 {
                    let g0 = read(p0, hh, ww, y + 1, x, bc) - read(p0, hh, ww, y, x, bc);
                    let g1 = read(p1, hh, ww, y + 1, x, bc) - read(p1, hh, ww, y, x, bc);
                    potential += g0 * g1;
                }
            }
        }
    }
    // Edge differences carry 1/h^2, cancelled by the h^2 area weight.
    0.5 * kinetic * h * h + 0.5 * potential
}

/// Coefficient matrices of `w_t = A w_x + B w_y` for `w = (u_x, u_y, u_t)`.
pub fn wave_system_matrices() -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let a = [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let b = [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
    (a, b)
}

/// One forward-Euler step of the first-order wave system with central
/// differences.
pub fn wave_step_first_order_system(w: &PdeGrid) -> Result<PdeGrid> {
    if w.channels() != 3 {
        return Err(Error::shape("wave first-order system", w.u.shape(), &[3, w.height(), w.width()]));
    }
    let (a, b) = wave_system_matrices();
    for i in 0..3 {
        for j in 0..3 {
            assert!(a[i][j] == a[j][i] && b[i][j] == b[j][i], "wave system matrices must be symmetric");
        }
    }
    let (hh, ww) = (w.height(), w.width());
    let plane = hh * ww;
    let diffs: Vec<(Vec<f64>, Vec<f64>)> =
        (0..3).map(|c| central_diff(&w.u.data()[c * plane..(c + 1) * plane], hh, ww, w.h, w.bc)).collect();
    let mut out = w.u.data().to_vec();
    for i in 0..3 {
        for p in 0..plane {
            let mut rhs = 0.0;
            for j in 0..3 {
                rhs += a[i][j] * diffs[j].0[p] + b[i][j] * diffs[j].1[p];
            }
            out[i * plane + p] += w.tau * rhs;
        }
    }
    Ok(w.with_field(Tensor::from_parts(w.u.shape().to_vec(), out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_data_stays_zero() {
        let g = PdeGrid::new(Tensor::zeros(&[1, 8, 8]), 0.1, 0.05, Boundary::ZeroDirichlet).unwrap();
        let out = wave_solve_second_order(&g, &Tensor::zeros(&[1, 8, 8]), 20).unwrap();
        assert_eq!(out.u.max_abs(), 0.0);
    }

    #[test]
    fn cfl_guard() {
        let g = PdeGrid::new(Tensor::zeros(&[1, 4, 4]), 0.1, 0.08, Boundary::ZeroDirichlet).unwrap();
        assert!(matches!(WaveSolver::new(&g, &Tensor::zeros(&[1, 4, 4])), Err(Error::Cfl { .. })));
    }

    #[test]
    fn energy_is_conserved_to_roundoff() {
        let n = 31;
        let h = 1.0 / 32.0;
        let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, 0.5 * h, Boundary::ZeroDirichlet)
            .unwrap()
            .with_origin(h, h);
        let u0 = g.sample(|x, y| (-((x - 0.5).powi(2) + (y - 0.4).powi(2)) / 0.01).exp());
        let g = g.with_field(u0);
        let mut s = WaveSolver::new(&g, &Tensor::zeros(&[1, n, n])).unwrap();
        let e0 = s.energy();
        for _ in 0..200 {
            s.step();
        }
        assert!(((s.energy() - e0) / e0).abs() < 1e-10);
    }

    #[test]
    fn energy_is_conserved_under_neumann() {
        let n = 20;
        let h = 0.05;
        let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, 0.6 * h, Boundary::NeumannReflect).unwrap();
        let u0 = g.sample(|x, y| (3.0 * x).sin() * (2.0 * y).cos());
        let g = g.with_field(u0);
        let mut s = WaveSolver::new(&g, &Tensor::zeros(&[1, n, n])).unwrap();
        let e0 = s.energy();
        for _ in 0..100 {
            s.step();
        }
        assert!(((s.energy() - e0) / e0).abs() < 1e-10);
    }

    #[test]
    fn standing_mode_oscillates_with_unit_speed() {
        // sin(pi x) sin(pi y) has angular frequency pi * sqrt(2), so u(t) ~ cos(pi sqrt 2 t).
        let n = 15;
        let h = 1.0 / 16.0;
        let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, 0.01, Boundary::ZeroDirichlet)
            .unwrap()
            .with_origin(h, h);
        let u0 = g.sample(|x, y| (PI * x).sin() * (PI * y).sin());
        let g = g.with_field(u0);
        let steps = 20;
        let out = wave_solve_second_order(&g, &Tensor::zeros(&[1, n, n]), steps).unwrap();
        let centre = out.u.at3(0, 7, 7) / g.u.at3(0, 7, 7);
        let expect = (PI * 2f64.sqrt() * steps as f64 * 0.01).cos();
        assert!((centre - expect).abs() < 0.02, "{centre} vs {expect}");
    }

    #[test]
    fn constant_w_is_unchanged() {
        let w = PdeGrid::new(Tensor::full(&[3, 5, 5], 0.7), 0.1, 0.01, Boundary::NeumannReflect).unwrap();
        assert_eq!(wave_step_first_order_system(&w).unwrap().u, w.u);
    }

    #[test]
    fn system_matrices_are_symmetric() {
        let (a, b) = wave_system_matrices();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[i][j], a[j][i]);
                assert_eq!(b[i][j], b[j][i]);
            }
        }
    }

    #[test]
    fn system_rejects_wrong_channel_count() {
        let w = PdeGrid::new(Tensor::zeros(&[2, 4, 4]), 0.1, 0.01, Boundary::ZeroDirichlet).unwrap();
        assert!(matches!(wave_step_first_order_system(&w), Err(Error::ShapeMismatch { .. })));
    }
}
