//! 2-D cross-correlation with groups, stride, boundary modes and an optional
//! weight-shared kernel bank.
//!
//! Padding is always "same" for odd kernels: `(k - 1) / 2` ghost cells per
//! side. Zero padding skips ghost taps; Neumann padding reads the mirrored
//! interior cell (`u[-1] = u[0]`, `u[-2] = u[1]`, ...).
//!
//! Every output element accumulates its terms in `(input channel, ky, kx)`
//! row-major order starting from `0.0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    ZeroDirichlet,
    NeumannReflect,
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "zero-dirichlet" | "dirichlet" => Ok(PaddingMode::ZeroDirichlet),
            "neumann" | "neumann-reflect" | "reflect" => Ok(PaddingMode::NeumannReflect),
            other => Err(Error::Config(format!("unknown padding mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PaddingMode::ZeroDirichlet => "zero-dirichlet",
            PaddingMode::NeumannReflect => "neumann-reflect",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub groups: usize,
    pub padding: PaddingMode,
    /// When set, the weight is a bank of `bank` kernels of shape
    /// `[bank, 1, kh, kw]`; output channel `o` uses kernel `o % bank`.
    pub weight_shared: bool,
}

impl ConvSpec {
    /// Dense `k x k` convolution.
    pub fn dense(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride,
            groups: 1,
            padding: PaddingMode::ZeroDirichlet,
            weight_shared: false,
        }
    }

    /// `1 x 1` channel mixing.
    pub fn pointwise(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::dense(in_channels, out_channels, 1, stride)
    }

    /// Depthwise `k x k` with `multiplier` outputs per input channel.
    pub fn depthwise(channels: usize, multiplier: usize, k: usize, stride: usize, weight_shared: bool) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels * multiplier,
            kernel: (k, k),
            stride,
            groups: channels,
            padding: PaddingMode::ZeroDirichlet,
            weight_shared,
        }
    }

    pub fn with_padding(mut self, padding: PaddingMode) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 || self.stride == 0 {
            return Err(Error::invalid("conv2d", format!("degenerate spec {self:?}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must have odd extents")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "channels {} -> {} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        if self.weight_shared && self.groups != self.in_channels {
            return Err(Error::invalid(
                "conv2d",
                "weight sharing requires a depthwise convolution (groups == in_channels)",
            ));
        }
        Ok(())
    }

    /// Weight shape for a non-shared convolution.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        ((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1)
    }

    fn check(&self, input: &[usize], weight: &[usize]) -> Result<()> {
        self.validate()?;
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(Error::shape("conv2d input", input, &[0, self.in_channels, 0, 0]));
        }
        let (kh, kw) = self.kernel;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let (h, w) = (input[2], input[3]);
        let too_small = match self.padding {
            PaddingMode::ZeroDirichlet => h + 2 * ph < kh || w + 2 * pw < kw,
            PaddingMode::NeumannReflect => h < ph.max(1) || w < pw.max(1),
        };
        if too_small {
            return Err(Error::invalid("conv2d", format!("{h}x{w} input too small for {kh}x{kw} kernel")));
        }
        let cin_g = self.in_channels / self.groups;
        let ok = weight.len() == 4
            && weight[1] == cin_g
            && weight[2] == kh
            && weight[3] == kw
            && if self.weight_shared {
                weight[0] > 0 && self.out_channels.is_multiple_of(weight[0])
            } else {
                weight[0] == self.out_channels
            };
        if !ok {
            return Err(Error::shape("conv2d weight", weight, &self.weight_shape()));
        }
        Ok(())
    }
}

/// For each output coordinate along one axis and each tap, the input index
/// read (or `None` for a zero ghost cell).
fn tap_map(len: usize, out_len: usize, k: usize, stride: usize, padding: PaddingMode) -> Vec<Option<usize>> {
    let p = (k - 1) / 2;
    let mut map = Vec::with_capacity(out_len * k);
    for o in 0..out_len {
        for t in 0..k {
            let i = (o * stride + t) as isize - p as isize;
            let idx = if i >= 0 && (i as usize) < len {
                Some(i as usize)
            } else {
                match padding {
                    PaddingMode::ZeroDirichlet => None,
                    PaddingMode::NeumannReflect => {
                        let r = if i < 0 { -1 - i } else { 2 * len as isize - 1 - i };
                        Some(r.clamp(0, len as isize - 1) as usize)
                    }
                }
            };
            map.push(idx);
        }
    }
    map
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    bank: usize,
    ymap: Vec<Option<usize>>,
    xmap: Vec<Option<usize>>,
}

impl Geometry {
    fn new(spec: &ConvSpec, input: &[usize], weight: &[usize]) -> Self {
        let (n, h, w) = (input[0], input[2], input[3]);
        let (oh, ow) = spec.output_hw(h, w);
        let (kh, kw) = spec.kernel;
        Geometry {
            n,
            h,
            w,
            oh,
            ow,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            bank: weight[0],
            ymap: tap_map(h, oh, kh, spec.stride, spec.padding),
            xmap: tap_map(w, ow, kw, spec.stride, spec.padding),
        }
    }

    fn kernel_of(&self, spec: &ConvSpec, o: usize) -> usize {
        if spec.weight_shared {
            o % self.bank
        } else {
            o
        }
    }
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.check(input.shape(), weight.shape())?;
    let g = Geometry::new(spec, input.shape(), weight.shape());
    let (kh, kw) = spec.kernel;
    let x = input.data();
    let wt = weight.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let sample_in = spec.in_channels * in_plane;
    let sample_out = spec.out_channels * out_plane;
    let mut out = vec![0.0; g.n * sample_out];
    out.par_chunks_mut(sample_out).enumerate().for_each(|(b, out_s)| {
        let x_s = &x[b * sample_in..(b + 1) * sample_in];
        for o in 0..spec.out_channels {
            let grp = o / g.cout_g;
            let kidx = g.kernel_of(spec, o);
            let plane = &mut out_s[o * out_plane..(o + 1) * out_plane];
            for ci in 0..g.cin_g {
                let c = grp * g.cin_g + ci;
                let xin = &x_s[c * in_plane..(c + 1) * in_plane];
                let wk = &wt[(kidx * g.cin_g + ci) * kh * kw..(kidx * g.cin_g + ci + 1) * kh * kw];
                for oy in 0..g.oh {
                    let row = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                    for ky in 0..kh {
                        let Some(iy) = g.ymap[oy * kh + ky] else { continue };
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let wrow = &wk[ky * kw..(ky + 1) * kw];
                        // (ky, kx) order per output element is preserved: the
                        // kx loop is innermost across the whole row.
                        for (ox, acc) in row.iter_mut().enumerate() {
                            let taps = &g.xmap[ox * kw..(ox + 1) * kw];
                            for (kx, tap) in taps.iter().enumerate() {
                                if let Some(ix) = *tap {
                                    *acc += wrow[kx] * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.n, spec.out_channels, g.oh, g.ow], out))
}

/// Gradients of a convolution with respect to its input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let g = Geometry::new(spec, input.shape(), weight.shape());
    let (kh, kw) = spec.kernel;
    let x = input.data();
    let wt = weight.data();
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let sample_in = spec.in_channels * in_plane;
    let sample_out = spec.out_channels * out_plane;
    let wlen = wt.len();

    let mut grad_in = vec![0.0; x.len()];
    let partial_w: Vec<Vec<f64>> = grad_in
        .par_chunks_mut(sample_in)
        .enumerate()
        .map(|(b, gin_s)| {
            let mut gw = vec![0.0; wlen];
            let x_s = &x[b * sample_in..(b + 1) * sample_in];
            let go_s = &grad_out[b * sample_out..(b + 1) * sample_out];
            for o in 0..spec.out_channels {
                let grp = o / g.cout_g;
                let kidx = g.kernel_of(spec, o);
                let gplane = &go_s[o * out_plane..(o + 1) * out_plane];
                for ci in 0..g.cin_g {
                    let c = grp * g.cin_g + ci;
                    let xin = &x_s[c * in_plane..(c + 1) * in_plane];
                    let gin = &mut gin_s[c * in_plane..(c + 1) * in_plane];
                    let woff = (kidx * g.cin_g + ci) * kh * kw;
                    for oy in 0..g.oh {
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        for ky in 0..kh {
                            let Some(iy) = g.ymap[oy * kh + ky] else { continue };
                            for kx in 0..kw {
                                let wv = wt[woff + ky * kw + kx];
                                let mut acc = 0.0;
                                for (ox, &gv) in grow.iter().enumerate() {
                                    if let Some(ix) = g.xmap[ox * kw + kx] {
                                        acc += gv * xin[iy * g.w + ix];
                                        gin[iy * g.w + ix] += gv * wv;
                                    }
                                }
                                gw[woff + ky * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
            gw
        })
        .collect();

    let mut grad_w = vec![0.0; wlen];
    for gw in &partial_w {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
    }
    (grad_in, grad_w)
}
