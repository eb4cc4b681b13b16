use super::{read, PdeGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c0 + cx x + cy y`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Poly1 {
    pub c0: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Poly1 {
    pub const fn constant(c0: f64) -> Self {
        Poly1 { c0, cx: 0.0, cy: 0.0 }
    }

    pub const fn new(c0: f64, cx: f64, cy: f64) -> Self {
        Poly1 { c0, cx, cy }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.c0 + self.cx * x + self.cy * y
    }
}

/// Per-component coefficients of `u_t = alpha(x, y) u_x + beta(x, y) u_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperatorSpec {
    pub alpha: Vec<Poly1>,
    pub beta: Vec<Poly1>,
}

impl LinearOperatorSpec {
    /// The rotation field `u_t = -y u_x + x u_y` for one component.
    pub fn rotation() -> Self {
        LinearOperatorSpec { alpha: vec![Poly1::new(0.0, 0.0, -1.0)], beta: vec![Poly1::new(0.0, 1.0, 0.0)] }
    }

    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    /// Largest `tau` for which upwinding is monotone on `g`: `h / max(|alpha| + |beta|)`.
    /// Degree-1 coefficients peak at a grid corner.
    pub fn cfl_bound(&self, g: &PdeGrid) -> f64 {
        let (x0, y0) = g.coords(0, 0);
        let (x1, y1) = g.coords(g.height() - 1, g.width() - 1);
        let corners = [(x0, y0), (x0, y1), (x1, y0), (x1, y1)];
        let mut speed: f64 = 0.0;
        for (a, b) in self.alpha.iter().zip(&self.beta) {
            for &(x, y) in &corners {
                speed = speed.max(a.eval(x, y).abs() + b.eval(x, y).abs());
            }
        }
        if speed == 0.0 {
            f64::INFINITY
        } else {
            g.h / speed
        }
    }
}

/// `steps` first-order upwind steps of `u_t = alpha u_x + beta u_y`.
pub fn linear_advect(g: &PdeGrid, spec: &LinearOperatorSpec, steps: usize) -> Result<PdeGrid> {
    if spec.alpha.len() != spec.beta.len() || spec.components() != g.channels() {
        return Err(Error::invalid(
            "linear_advect",
            format!(
                "{} alpha and {} beta coefficients for a {}-component grid",
                spec.alpha.len(),
                spec.beta.len(),
                g.channels()
            ),
        ));
    }
    let bound = spec.cfl_bound(g);
    if g.tau > bound {
        return Err(Error::Cfl { scheme: "advection", tau: g.tau, bound });
    }
    let (hh, ww) = (g.height(), g.width());
    let plane = hh * ww;
    // Coefficients are time-independent, so tabulate them once.
    let coef: Vec<Vec<(f64, f64)>> = (0..g.channels())
        .map(|c| {
            (0..plane)
                .map(|p| {
                    let (x, y) = g.coords(p / ww, p % ww);
                    (spec.alpha[c].eval(x, y), spec.beta[c].eval(x, y))
                })
                .collect()
        })
        .collect();
    let mut u = g.u.data().to_vec();
    let mut next = u.clone();
    let r = g.tau / g.h;
    for _ in 0..steps {
        for c in 0..g.channels() {
            let src = &u[c * plane..(c + 1) * plane];
            let dst = &mut next[c * plane..(c + 1) * plane];
            for y in 0..hh {
                for x in 0..ww {
                    let p = y * ww + x;
                    let (a, b) = coef[c][p];
                    let (yi, xi) = (y as isize, x as isize);
                    let centre = src[p];
                    // Information moves with velocity (-alpha, -beta); difference
                    // towards where it comes from.
                    let dx = if a > 0.0 {
                        read(src, hh, ww, yi, xi + 1, g.bc) - centre
                    } else {
                        centre - read(src, hh, ww, yi, xi - 1, g.bc)
                    };
                    let dy = if b > 0.0 {
                        read(src, hh, ww, yi + 1, xi, g.bc) - centre
                    } else {
                        centre - read(src, hh, ww, yi - 1, xi, g.bc)
                    };
                    dst[p] = centre + r * (a * dx + b * dy);
                }
            }
        }
        std::mem::swap(&mut u, &mut next);
    }
    Ok(g.with_field(Tensor::from_parts(g.u.shape().to_vec(), u)))
}

/// Integrates `u_t = -y u_x + x u_y` to `t_final` by upwinding.
///
/// The step count is `ceil(t_final / tau)` and the step is shrunk so the
/// final time is hit exactly. The exact solution rotates the initial data:
/// `u(x, y, t) = f(x cos t - y sin t, x sin t + y cos t)`.
pub fn rotation_advect(g: &PdeGrid, t_final: f64) -> Result<PdeGrid> {
    if g.channels() != 1 {
        return Err(Error::shape("rotation_advect", g.u.shape(), &[1, g.height(), g.width()]));
    }
    let (x0, y0) = g.coords(0, 0);
    let (x1, y1) = g.coords(g.height() - 1, g.width() - 1);
    let tol = 1e-9 * g.h;
    if (x0 + x1).abs() > tol || (y0 + y1).abs() > tol {
        return Err(Error::invalid("rotation_advect", "domain must be centred at the origin"));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::invalid("rotation_advect", format!("t_final must be finite and >= 0, got {t_final}")));
    }
    let spec = LinearOperatorSpec::rotation();
    let bound = spec.cfl_bound(g);
    if g.tau > bound {
        return Err(Error::Cfl { scheme: "rotation", tau: g.tau, bound });
    }
    let steps = (t_final / g.tau - 1e-9).ceil().max(0.0) as usize;
    if steps == 0 {
        return Ok(g.clone());
    }
    let mut run = g.clone();
    run.tau = t_final / steps as f64;
    let mut out = linear_advect(&run, &spec, steps)?;
    out.tau = g.tau;
    Ok(out)
}
