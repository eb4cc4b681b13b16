//! Finite-difference solvers used as independent oracles for the network
//! layers. Everything here is written with direct loops over the grid and
//! does not call the convolution kernels.
//!
//! Grids are `[n, H, W]`: `n` field components, rows indexed by `y`, columns
//! by `x`. Ghost cells follow the boundary condition: zero for Dirichlet, the
//! mirrored interior cell for Neumann.

mod advect;
mod blowup;
mod quasi;
mod wave;

pub use advect::{linear_advect, rotation_advect, Poly1, LinearOperatorSpec};
pub use blowup::{detect_blowup, Blowup, BlowupMonitor, DEFAULT_BLOWUP_FACTOR};
pub use quasi::{quasilinear_step, tensor_step, QuasiWeights};
pub use wave::{
    wave_energy, wave_solve_second_order, wave_step_first_order_system, wave_system_matrices, WaveSolver,
};

use std::io::Write;

pub use crate::nn::PaddingMode as Boundary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PdeGrid {
    /// `[n, H, W]` field.
    pub u: Tensor,
    pub h: f64,
    pub tau: f64,
    pub bc: Boundary,
    /// Physical `(x, y)` of the cell at row 0, column 0.
    pub origin: (f64, f64),
}

impl PdeGrid {
    pub fn new(u: Tensor, h: f64, tau: f64, bc: Boundary) -> Result<Self> {
        if u.ndim() != 3 {
            return Err(Error::shape("pde grid", u.shape(), &[0, 0, 0]));
        }
        if !(h > 0.0 && h.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("pde grid", format!("need h > 0 and tau > 0, got h={h}, tau={tau}")));
        }
        Ok(PdeGrid { u, h, tau, bc, origin: (0.0, 0.0) })
    }

    /// Grid whose central cell sits at the origin.
    pub fn centered(u: Tensor, h: f64, tau: f64, bc: Boundary) -> Result<Self> {
        let mut g = Self::new(u, h, tau, bc)?;
        let (hh, ww) = (g.height(), g.width());
        g.origin = (-((ww - 1) as f64) * h / 2.0, -((hh - 1) as f64) * h / 2.0);
        Ok(g)
    }

    pub fn with_origin(mut self, x0: f64, y0: f64) -> Self {
        self.origin = (x0, y0);
        self
    }

    pub fn channels(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[2]
    }

    /// Physical `(x, y)` of cell `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        (self.origin.0 + col as f64 * self.h, self.origin.1 + row as f64 * self.h)
    }

    /// Samples `f(x, y)` on this grid's cells for one component.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (hh, ww) = (self.height(), self.width());
        Tensor::from_fn(&[1, hh, ww], |i| {
            let (x, y) = self.coords(i / ww, i % ww);
            f(x, y)
        })
    }

    /// Same geometry and step with a different field.
    pub fn with_field(&self, u: Tensor) -> PdeGrid {
        PdeGrid { u, ..self.clone() }
    }
}

/// Index read by offset `i` along an axis of length `len`, or `None` for a
/// zero ghost cell.
pub(crate) fn tap(len: usize, i: isize, bc: Boundary) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match bc {
        Boundary::ZeroDirichlet => None,
        Boundary::NeumannReflect => {
            let r = if i < 0 { -1 - i } else { 2 * len as isize - 1 - i };
            Some(r.clamp(0, len as isize - 1) as usize)
        }
    }
}

/// Value at `(y, x)` of one plane, honouring the boundary condition.
pub(crate) fn read(plane: &[f64], hh: usize, ww: usize, y: isize, x: isize, bc: Boundary) -> f64 {
    match (tap(hh, y, bc), tap(ww, x, bc)) {
        (Some(r), Some(c)) => plane[r * ww + c],
        _ => 0.0,
    }
}

/// Central differences `(d/dx, d/dy)` of one plane.
pub(crate) fn central_diff(plane: &[f64], hh: usize, ww: usize, h: f64, bc: Boundary) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; hh * ww];
    let mut dy = vec![0.0; hh * ww];
    let inv = 1.0 / (2.0 * h);
    for y in 0..hh {
        for x in 0..ww {
            let (yi, xi) = (y as isize, x as isize);
            dx[y * ww + x] = (read(plane, hh, ww, yi, xi + 1, bc) - read(plane, hh, ww, yi, xi - 1, bc)) * inv;
            dy[y * ww + x] = (read(plane, hh, ww, yi + 1, xi, bc) - read(plane, hh, ww, yi - 1, xi, bc)) * inv;
        }
    }
    (dx, dy)
}

/// Five-point Laplacian of one plane.
pub(crate) fn laplacian(plane: &[f64], hh: usize, ww: usize, h: f64, bc: Boundary) -> Vec<f64> {
    let mut out = vec![0.0; hh * ww];
    let inv = 1.0 / (h * h);
    for y in 0..hh {
        for x in 0..ww {
            let (yi, xi) = (y as isize, x as isize);
            let s = read(plane, hh, ww, yi, xi + 1, bc)
                + read(plane, hh, ww, yi, xi - 1, bc)
                + read(plane, hh, ww, yi + 1, xi, bc)
                + read(plane, hh, ww, yi - 1, xi, bc)
                - 4.0 * plane[y * ww + x];
            out[y * ww + x] = s * inv;
        }
    }
    out
}

/// Five-point heat kernel `tau/h^2 * [0 1 0; 1 -4 1; 0 1 0]` as `[1, 1, 3, 3]`.
pub fn heat_kernel(tau: f64, h: f64) -> Tensor {
    let r = tau / (h * h);
    let base = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    Tensor::from_parts(vec![1, 1, 3, 3], base.iter().map(|w| r * w).collect())
}

/// One forward-Euler step of `u_t = Laplacian(u)`, applied per component.
///
/// The update is `u + sum over taps of k[ky][kx] * u[y+ky-1][x+kx-1]` with the
/// taps visited in row-major kernel order and ghost taps skipped under
/// Dirichlet, so it equals a "same" convolution with [`heat_kernel`] plus the
/// identity to the last bit.
pub fn heat_step(g: &PdeGrid) -> Result<PdeGrid> {
    let bound = g.h * g.h / 4.0;
    if g.tau > bound {
        return Err(Error::Cfl { scheme: "heat", tau: g.tau, bound });
    }
    let k = heat_kernel(g.tau, g.h);
    let k = k.data();
    let (hh, ww) = (g.height(), g.width());
    let plane = hh * ww;
    let mut out = g.u.data().to_vec();
    for (c, dst) in out.chunks_exact_mut(plane).enumerate() {
        let src = &g.u.data()[c * plane..(c + 1) * plane];
        for y in 0..hh {
            for x in 0..ww {
                let mut acc = 0.0;
                for ky in 0..3 {
                    let Some(r) = tap(hh, y as isize + ky as isize - 1, g.bc) else { continue };
                    for kx in 0..3 {
                        if let Some(col) = tap(ww, x as isize + kx as isize - 1, g.bc) {
                            acc += k[ky * 3 + kx] * src[r * ww + col];
                        }
                    }
                }
                dst[y * ww + x] = src[y * ww + x] + acc;
            }
        }
    }
    Ok(g.with_field(Tensor::from_parts(g.u.shape().to_vec(), out)))
}

/// One row of a per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub max_abs: f64,
    pub l2: f64,
}

impl StepRecord {
    pub fn of(step: usize, g: &PdeGrid) -> Self {
        StepRecord {
            step,
            time: step as f64 * g.tau,
            max_abs: g.u.max_abs(),
            l2: discrete_l2(&g.u, g.h),
        }
    }
}

/// `sqrt(h^2 * sum u^2)`, the grid approximation of the L2 norm.
pub fn discrete_l2(u: &Tensor, h: f64) -> f64 {
    (u.data().iter().map(|v| v * v).sum::<f64>() * h * h).sqrt()
}

/// Writes `step,time,max_abs,l2` rows.
pub fn write_trace_csv(mut w: impl Write, records: &[StepRecord]) -> Result<()> {
    writeln!(w, "step,time,max_abs,l2")?;
    for r in records {
        writeln!(w, "{},{:.12e},{:.12e},{:.12e}", r.step, r.time, r.max_abs, r.l2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_fixed_under_neumann() {
        let g = PdeGrid::new(Tensor::full(&[1, 6, 5], 2.5), 0.1, 0.002, Boundary::NeumannReflect).unwrap();
        assert_eq!(heat_step(&g).unwrap().u, g.u);
    }

    #[test]
    fn delta_spreads_to_neighbours() {
        let mut u = Tensor::zeros(&[1, 5, 5]);
        u.data_mut()[12] = 1.0;
        let g = PdeGrid::new(u, 1.0, 0.1, Boundary::ZeroDirichlet).unwrap();
        let next = heat_step(&g).unwrap().u;
        assert!((next.data()[12] - 0.6).abs() < 1e-15);
        for i in [7, 11, 13, 17] {
            assert!((next.data()[i] - 0.1).abs() < 1e-15);
        }
        assert_eq!(next.data()[0], 0.0);
    }

    #[test]
    fn cfl_violation_reports_bound() {
        let g = PdeGrid::new(Tensor::zeros(&[1, 4, 4]), 0.1, 0.01, Boundary::ZeroDirichlet).unwrap();
        match heat_step(&g) {
            Err(Error::Cfl { bound, .. }) => assert!((bound - 0.0025).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn centered_grid_coordinates() {
        let g = PdeGrid::centered(Tensor::zeros(&[1, 5, 5]), 0.5, 0.1, Boundary::ZeroDirichlet).unwrap();
        assert_eq!(g.coords(2, 2), (0.0, 0.0));
        assert_eq!(g.coords(0, 4), (1.0, -1.0));
    }
}
