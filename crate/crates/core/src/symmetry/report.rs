use std::fmt::Write as _;
use std::io::Write;

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries at or below this fraction of a matrix's max-abs count as zero.
pub const NEAR_ZERO_REL: f64 = 1e-6;

/// Outcome of comparing two models on a probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryReport {
    /// Max abs logit difference per probe.
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
    /// Fraction of probes whose argmax agrees.
    pub argmax_agreement: f64,
    /// Frobenius norms of the second model's pointwise weights.
    pub weight_norms: Vec<(String, f64)>,
    /// Near-zero count over the second model's pointwise weights.
    pub near_zero: usize,
    pub total_pointwise: usize,
}

impl SymmetryReport {
    /// `probe,deviation` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "probe,deviation")?;
        for (i, d) in self.deviations.iter().enumerate() {
            writeln!(w, "{i},{d:.6e}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "probes: {}", self.deviations.len());
        let _ = writeln!(s, "max deviation: {:.6e}", self.max_deviation);
        let _ = writeln!(s, "argmax agreement: {:.2}%", 100.0 * self.argmax_agreement);
        let _ = writeln!(s, "near-zero pointwise weights: {} of {}", self.near_zero, self.total_pointwise);
        s
    }
}

/// Pointwise (1x1) mixing weights: mixes, projections, coefficient tensors
/// and shortcuts.
pub fn pointwise_weights(model: &Model) -> Vec<(String, &Tensor)> {
    model
        .params()
        .into_iter()
        .filter(|(name, _)| {
            [".mix", ".proj", ".tensor_a", ".tensor_b", ".shortcut"].iter().any(|s| name.ends_with(s))
        })
        .collect()
}

/// `(near-zero entries, total entries)` with the threshold taken per matrix.
pub fn sparsity(weights: &[(String, &Tensor)]) -> (usize, usize) {
    let mut zeros = 0;
    let mut total = 0;
    for (_, t) in weights {
        let cut = NEAR_ZERO_REL * t.max_abs();
        zeros += t.data().iter().filter(|v| v.abs() <= cut).count();
        total += t.len();
    }
    (zeros, total)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates both models in inference mode on `probes` `[N, C, H, W]`.
pub fn verify_invariance(a: &Model, b: &Model, probes: &Tensor) -> Result<SymmetryReport> {
    if a.config != b.config {
        return Err(Error::Config("verify_invariance needs models with identical configurations".into()));
    }
    if probes.ndim() != 4 || probes.shape()[0] == 0 {
        return Err(Error::invalid("verify_invariance", "probe set must be a nonempty [N, C, H, W] batch"));
    }
    let la = a.forward(probes)?;
    let lb = b.forward(probes)?;
    let k = la.shape()[1];
    let mut deviations = Vec::new();
    let mut agree = 0;
    for (ra, rb) in la.data().chunks_exact(k).zip(lb.data().chunks_exact(k)) {
        deviations.push(ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        if argmax(ra) == argmax(rb) {
            agree += 1;
        }
    }
    let pw = pointwise_weights(b);
    let (near_zero, total_pointwise) = sparsity(&pw);
    Ok(SymmetryReport {
        max_deviation: deviations.iter().copied().fold(0.0, f64::max),
        argmax_agreement: agree as f64 / deviations.len() as f64,
        weight_norms: pw.iter().map(|(n, t)| (n.clone(), t.l2_norm())).collect(),
        deviations,
        near_zero,
        total_pointwise,
    })
}
