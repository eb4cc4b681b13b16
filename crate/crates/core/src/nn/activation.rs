//! Pointwise and radial activations.
//!
//! `hardball` and `softball` treat the channel vector at each `(sample, pixel)`
//! as one point of `R^C` and act on it through its Euclidean norm only, so they
//! commute with any orthogonal channel mixing. The others act entry by entry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Identity,
    Relu,
    Hardtanh,
    Hardball,
    Softball,
}

impl ActivationKind {
    pub fn is_radial(self) -> bool {
        matches!(self, ActivationKind::Hardball | ActivationKind::Softball)
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::Hardtanh)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
            ActivationKind::Hardtanh => "hardtanh",
            ActivationKind::Hardball => "hardball",
            ActivationKind::Softball => "softball",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "none" => ActivationKind::Identity,
            "relu" => ActivationKind::Relu,
            "hardtanh" => ActivationKind::Hardtanh,
            "hardball" => ActivationKind::Hardball,
            "softball" => ActivationKind::Softball,
            other => return Err(Error::Config(format!("unknown activation '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub kind: ActivationKind,
    pub min_val: f64,
    pub max_val: f64,
    /// Ball radius; `None` means `sqrt(channels)` at the point of use.
    pub radius: Option<f64>,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::new(ActivationKind::Identity)
    }
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation {
            kind,
            min_val: -1.0,
            max_val: 1.0,
            radius: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(ActivationKind::Identity)
    }

    pub fn relu() -> Self {
        Self::new(ActivationKind::Relu)
    }

    pub fn hardtanh(min_val: f64, max_val: f64) -> Self {
        Activation {
            min_val,
            max_val,
            ..Self::new(ActivationKind::Hardtanh)
        }
    }

    pub fn hardball(radius: Option<f64>) -> Self {
        Activation {
            radius,
            ..Self::new(ActivationKind::Hardball)
        }
    }

    pub fn softball(radius: Option<f64>) -> Self {
        Activation {
            radius,
            ..Self::new(ActivationKind::Softball)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ActivationKind::Hardtanh && self.min_val.partial_cmp(&self.max_val) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config(format!(
                "hardtanh needs min_val < max_val, got {} and {}",
                self.min_val, self.max_val
            )));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("ball radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn radius_for(&self, channels: usize) -> f64 {
        self.radius.unwrap_or((channels as f64).sqrt())
    }
}

/// `(channels, inner)` such that element `(n, c, i)` sits at
/// `(n * channels + c) * inner + i`.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

pub fn activation_forward(x: &Tensor, act: &Activation) -> Tensor {
    match act.kind {
        ActivationKind::Identity => x.clone(),
        ActivationKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        ActivationKind::Hardtanh => {
            let (lo, hi) = (act.min_val, act.max_val);
            x.map(|v| {
                if v > hi {
                    hi
                } else if v < lo {
                    lo
                } else {
                    v
                }
            })
        }
        ActivationKind::Hardball | ActivationKind::Softball => {
            let (n, c, inner) = channel_layout(x.shape());
            let r = act.radius_for(c);
            let src = x.data();
            let mut out = vec![0.0; src.len()];
            for b in 0..n {
                for i in 0..inner {
                    let at = |ch: usize| (b * c + ch) * inner + i;
                    let norm = (0..c).map(|ch| src[at(ch)] * src[at(ch)]).sum::<f64>().sqrt();
                    let factor = if act.kind == ActivationKind::Hardball {
                        if norm < r {
                            1.0
                        } else {
                            r / norm
                        }
                    } else {
                        1.0 / (1.0 + norm * norm / (r * r)).sqrt()
                    };
                    for ch in 0..c {
                        out[at(ch)] = src[at(ch)] * factor;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
    }
}

pub fn activation_backward(x: &Tensor, act: &Activation, grad_out: &[f64]) -> Vec<f64> {
    let src = x.data();
    match act.kind {
        ActivationKind::Identity => grad_out.to_vec(),
        ActivationKind::Relu => src
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        ActivationKind::Hardtanh => src
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > act.min_val && v < act.max_val { g } else { 0.0 })
            .collect(),
        ActivationKind::Hardball | ActivationKind::Softball => {
            let (n, c, inner) = channel_layout(x.shape());
            let r = act.radius_for(c);
            let mut out = vec![0.0; src.len()];
            for b in 0..n {
                for i in 0..inner {
                    let at = |ch: usize| (b * c + ch) * inner + i;
                    let norm2 = (0..c).map(|ch| src[at(ch)] * src[at(ch)]).sum::<f64>();
                    let norm = norm2.sqrt();
                    let dot = (0..c).map(|ch| src[at(ch)] * grad_out[at(ch)]).sum::<f64>();
                    // Jacobian is a*I - b*x x^T for both shapes.
                    let (a, bcoef) = if act.kind == ActivationKind::Hardball {
                        if norm < r {
                            (1.0, 0.0)
                        } else {
                            (r / norm, r / (norm * norm2))
                        }
                    } else {
                        let s = (1.0 + norm2 / (r * r)).sqrt();
                        (1.0 / s, 1.0 / (r * r * s * s * s))
                    };
                    for ch in 0..c {
                        out[at(ch)] = a * grad_out[at(ch)] - bcoef * src[at(ch)] * dot;
                    }
                }
            }
            out
        }
    }
}
