//! The differentiable kernel set.
//!
//! Builder methods on [`Tape`] validate shapes, compute the forward value and
//! record the op; [`Op::backward`] holds the matching reverse-mode rules.
//! Broadcasting is limited to scalar-with-tensor; everything else requires
//! explicit reshapes.

use crate::error::{Error, Result};
use crate::tape::{BackCtx, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Abs,
    Neg,
    /// sin(sqrt(s))/sqrt(s) as a function of s = angle^2 (series near 0).
    RotA,
    /// (1 - cos(sqrt(s)))/s as a function of s = angle^2 (series near 0).
    RotB,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Silu => "silu",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Abs => "abs",
            UnaryKind::Neg => "neg",
            UnaryKind::RotA => "rot_a",
            UnaryKind::RotB => "rot_b",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Neg => -x,
            UnaryKind::RotA => rot_a(x),
            UnaryKind::RotB => rot_b(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Neg => -1.0,
            UnaryKind::RotA => rot_a_prime(x),
            UnaryKind::RotB => rot_b_prime(x),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on positive reals.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

// Series switch-over for the rotation coefficients. At s = 1e-4 the angle is
// 0.01 rad and the 4-term series is accurate to ~1e-16 relative.
const ROT_SERIES_CUTOFF: f64 = 1e-4;

fn rot_a(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0
    } else {
        let t = s.sqrt();
        t.sin() / t
    }
}

fn rot_a_prime(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
    } else {
        let t = s.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * t * t)
    }
}

fn rot_b(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0
    } else {
        (1.0 - s.sqrt().cos()) / s
    }
}

fn rot_b_prime(s: f64) -> f64 {
    if s < ROT_SERIES_CUTOFF {
        -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    } else {
        let t = s.sqrt();
        (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * s * s)
    }
}

/// (e^z - 1)/z with the Taylor branch below the cancellation threshold.
pub(crate) fn zoh_phi(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// d/dz of `zoh_phi`.
pub(crate) fn zoh_phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[derive(Clone, Copy)]
pub(crate) enum Tr {
    N,
    T,
}

/// c = alpha * op(a) * op(b) + beta * c for row-major buffers.
/// `m, k, n` are the logical dimensions after transposition.
pub(crate) fn gemm(
    ta: Tr,
    tb: Tr,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match ta {
        Tr::N => (k as isize, 1),
        Tr::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Tr::N => (n as isize, 1),
        Tr::T => (1, k as isize),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleByScalar {
        s: Var,
        x: Var,
    },
    Unary(UnaryKind, Var),
    Reshape(Var),
    Transpose(Var),
    FlipRows(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    Softmax(Var),
    MaskedSoftmax {
        logits: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    DwConv1d {
        x: Var,
        w: Var,
    },
    BilinearSample {
        grid: Var,
        coords: Var,
    },
    SsmScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        saved_h: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Unary(_, x) => vec![*x],
            Op::ScaleByScalar { s, x } => vec![*s, *x],
            Op::Reshape(x) | Op::Transpose(x) | Op::FlipRows(x) => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Slice { x, .. } => vec![*x],
            Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::SumAxis { x, .. } | Op::MeanAxis { x, .. } => vec![*x],
            Op::AddRowVec(x, v) => vec![*x, *v],
            Op::Softmax(x) => vec![*x],
            Op::MaskedSoftmax { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::DwConv1d { x, w } => vec![*x, *w],
            Op::BilinearSample { grid, coords } => vec![*grid, *coords],
            Op::SsmScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                ..
            } => vec![*u, *delta, *a, *b, *c, *d],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], ctx: &mut BackCtx) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                ctx.add(*a, |ga| accumulate(ga, g, 1.0));
                ctx.add(*b, |gb| accumulate(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                ctx.add(*a, |ga| accumulate(ga, g, 1.0));
                ctx.add(*b, |gb| accumulate(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let bv = ctx.value(*b).data().to_vec();
                let av = ctx.value(*a).data().to_vec();
                ctx.add(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                ctx.add(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = ctx.value(*a).data().to_vec();
                let bv = ctx.value(*b).data().to_vec();
                ctx.add(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                ctx.add(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                ctx.add(*x, |gx| accumulate(gx, g, c));
            }
            Op::AddScalar(x) => {
                ctx.add(*x, |gx| accumulate(gx, g, 1.0));
            }
            Op::ScaleByScalar { s, x } => {
                let sv = ctx.value(*s).data()[0];
                let xv = ctx.value(*x).data().to_vec();
                ctx.add(*x, |gx| accumulate(gx, g, sv));
                ctx.add(*s, |gs| {
                    gs[0] += g.iter().zip(&xv).map(|(gi, xi)| gi * xi).sum::<f64>();
                });
            }
            Op::Unary(kind, x) => {
                let xv = ctx.value(*x).data().to_vec();
                let kind = *kind;
                ctx.add(*x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kind.derivative(xv[i]);
                    }
                });
            }
            Op::Reshape(x) => {
                ctx.add(*x, |gx| accumulate(gx, g, 1.0));
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                // out is (c, r) from x (r, c); g indexed in out layout
                ctx.add(*x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::FlipRows(x) => {
                let rows = out.shape()[0];
                let inner = out.numel() / rows;
                ctx.add(*x, |gx| {
                    for i in 0..rows {
                        let src = &g[(rows - 1 - i) * inner..(rows - i) * inner];
                        for (d, s) in gx[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total_len = out.shape()[*axis];
                let mut offset = 0;
                for x in xs {
                    let len = ctx.value(*x).shape()[*axis];
                    let off = offset;
                    ctx.add(*x, |gx| {
                        for o in 0..outer {
                            for l in 0..len {
                                let src = (o * total_len + off + l) * inner;
                                let dst = (o * len + l) * inner;
                                for i in 0..inner {
                                    gx[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xshape = ctx.value(*x).shape().to_vec();
                let (outer, full_len, inner) = axis_split(&xshape, *axis);
                let (start, len) = (*start, *len);
                ctx.add(*x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * full_len + start + l) * inner;
                            let src = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                ctx.add(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = ctx.value(*x).numel() as f64;
                ctx.add(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xshape = ctx.value(*x).shape().to_vec();
                let (outer, len, inner) = axis_split(&xshape, *axis);
                let scale = if matches!(self, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                ctx.add(*x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * len + l) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[src + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = ctx.value(*a).shape();
                    (s[0], s[1])
                };
                let n = ctx.value(*b).shape()[1];
                let av = ctx.value(*a).data().to_vec();
                let bv = ctx.value(*b).data().to_vec();
                // dA = dY . B^T ; dB = A^T . dY
                ctx.add(*a, |ga| gemm(Tr::N, Tr::T, m, n, k, 1.0, g, &bv, 1.0, ga));
                ctx.add(*b, |gb| gemm(Tr::T, Tr::N, k, m, n, 1.0, &av, g, 1.0, gb));
            }
            Op::AddRowVec(x, v) => {
                let (rows, cols) = {
                    let s = out.shape();
                    (s[0], s[1])
                };
                ctx.add(*x, |gx| accumulate(gx, g, 1.0));
                ctx.add(*v, |gv| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gv[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = *out.shape().last().unwrap();
                let rows = out.numel() / cols;
                let y = out.data();
                ctx.add(*x, |gx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { logits, mask } => {
                let cols = out.shape()[1];
                let rows = out.shape()[0];
                let y = out.data();
                ctx.add(*logits, |gx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mr = &mask[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            if mr[c] > 0.5 {
                                gx[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xs = ctx.value(*x).data().to_vec();
                let gm = ctx.value(*gamma).data().to_vec();
                let cols = *out.shape().last().unwrap();
                let rows = out.numel() / cols;
                let eps = *eps;
                // Recompute row statistics.
                let mut xhat = vec![0.0; xs.len()];
                let mut rstd = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xs[r * cols..(r + 1) * cols];
                    let mu: f64 = row.iter().sum::<f64>() / cols as f64;
                    let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                    let rs = 1.0 / (var + eps).sqrt();
                    rstd[r] = rs;
                    for c in 0..cols {
                        xhat[r * cols + c] = (row[c] - mu) * rs;
                    }
                }
                ctx.add(*beta, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
                ctx.add(*gamma, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                ctx.add(*x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[c];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            gx[r * cols + c] +=
                                rstd[r] * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                train,
            } => {
                let xs = ctx.value(*x).data().to_vec();
                let gm = ctx.value(*gamma).data().to_vec();
                let chans = *out.shape().last().unwrap();
                let pop = out.numel() / chans;
                let eps = *eps;
                let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xhat: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean[i % chans]) * rstd[i % chans])
                    .collect();
                ctx.add(*beta, |gb| {
                    for i in 0..xs.len() {
                        gb[i % chans] += g[i];
                    }
                });
                ctx.add(*gamma, |gg| {
                    for i in 0..xs.len() {
                        gg[i % chans] += g[i] * xhat[i];
                    }
                });
                let train = *train;
                ctx.add(*x, |gx| {
                    if train {
                        // Statistics depend on x: full batch-norm gradient.
                        let mut mean_dxhat = vec![0.0; chans];
                        let mut mean_dxhat_xhat = vec![0.0; chans];
                        for i in 0..xs.len() {
                            let c = i % chans;
                            let dxh = g[i] * gm[c];
                            mean_dxhat[c] += dxh;
                            mean_dxhat_xhat[c] += dxh * xhat[i];
                        }
                        for c in 0..chans {
                            mean_dxhat[c] /= pop as f64;
                            mean_dxhat_xhat[c] /= pop as f64;
                        }
                        for i in 0..xs.len() {
                            let c = i % chans;
                            let dxh = g[i] * gm[c];
                            gx[i] += rstd[c] * (dxh - mean_dxhat[c] - xhat[i] * mean_dxhat_xhat[c]);
                        }
                    } else {
                        for i in 0..xs.len() {
                            let c = i % chans;
                            gx[i] += g[i] * gm[c] * rstd[c];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, bias, spec } => {
                let xshape = ctx.value(*x).shape().to_vec();
                let wshape = ctx.value(*w).shape().to_vec();
                let (h, wd, cin) = (xshape[0], xshape[1], xshape[2]);
                let cout = wshape[3];
                let (ho, wo) = (out.shape()[0], out.shape()[1]);
                let patch = spec.kh * spec.kw * cin;
                let col = im2col(ctx.value(*x).data(), h, wd, cin, *spec, ho, wo);
                let wv = ctx.value(*w).data().to_vec();
                let rows = ho * wo;

                if let Some(b) = bias {
                    ctx.add(*b, |gb| {
                        for r in 0..rows {
                            for c in 0..cout {
                                gb[c] += g[r * cout + c];
                            }
                        }
                    });
                }
                ctx.add(*w, |gw| {
                    // dW = col^T . dY  (patch x cout)
                    gemm(Tr::T, Tr::N, patch, rows, cout, 1.0, &col, g, 1.0, gw);
                });
                let spec = *spec;
                ctx.add(*x, |gx| {
                    // dcol = dY . W^T, then scatter back.
                    let mut dcol = vec![0.0; rows * patch];
                    gemm(Tr::N, Tr::T, rows, cout, patch, 1.0, g, &wv, 0.0, &mut dcol);
                    col2im_acc(&dcol, h, wd, cin, spec, ho, wo, gx);
                });
            }
            Op::DwConv1d { x, w } => {
                let (l, c) = (out.shape()[0], out.shape()[1]);
                let xv = ctx.value(*x).data().to_vec();
                let wv = ctx.value(*w).data().to_vec();
                ctx.add(*w, |gw| {
                    for t in 0..3 {
                        for i in 0..l {
                            let j = i as isize + t as isize - 1;
                            if j < 0 || j >= l as isize {
                                continue;
                            }
                            let j = j as usize;
                            for ch in 0..c {
                                gw[ch * 3 + t] += g[i * c + ch] * xv[j * c + ch];
                            }
                        }
                    }
                });
                ctx.add(*x, |gx| {
                    for i in 0..l {
                        for t in 0..3 {
                            let j = i as isize + t as isize - 1;
                            if j < 0 || j >= l as isize {
                                continue;
                            }
                            let j = j as usize;
                            for ch in 0..c {
                                gx[j * c + ch] += g[i * c + ch] * wv[ch * 3 + t];
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { grid, coords } => {
                let gshape = ctx.value(*grid).shape().to_vec();
                let (gh, gw, c) = (gshape[0], gshape[1], gshape[2]);
                let cv = ctx.value(*coords).data().to_vec();
                let gv = ctx.value(*grid).data().to_vec();
                let npts = cv.len() / 2;
                ctx.add(*grid, |gg| {
                    for p in 0..npts {
                        let s = BilinearStencil::new(cv[2 * p], cv[2 * p + 1], gh, gw);
                        for ch in 0..c {
                            let go = g[p * c + ch];
                            gg[(s.y0 * gw + s.x0) * c + ch] += go * s.w00;
                            gg[(s.y0 * gw + s.x1) * c + ch] += go * s.w01;
                            gg[(s.y1 * gw + s.x0) * c + ch] += go * s.w10;
                            gg[(s.y1 * gw + s.x1) * c + ch] += go * s.w11;
                        }
                    }
                });
                ctx.add(*coords, |gc| {
                    for p in 0..npts {
                        let s = BilinearStencil::new(cv[2 * p], cv[2 * p + 1], gh, gw);
                        let (mut dy, mut dx) = (0.0, 0.0);
                        for ch in 0..c {
                            let go = g[p * c + ch];
                            let g00 = gv[(s.y0 * gw + s.x0) * c + ch];
                            let g01 = gv[(s.y0 * gw + s.x1) * c + ch];
                            let g10 = gv[(s.y1 * gw + s.x0) * c + ch];
                            let g11 = gv[(s.y1 * gw + s.x1) * c + ch];
                            dy += go * ((1.0 - s.fx) * (g10 - g00) + s.fx * (g11 - g01));
                            dx += go * ((1.0 - s.fy) * (g01 - g00) + s.fy * (g11 - g10));
                        }
                        // Clamped coordinates have zero derivative.
                        if s.y_interior {
                            gc[2 * p] += dy;
                        }
                        if s.x_interior {
                            gc[2 * p + 1] += dx;
                        }
                    }
                });
            }
            Op::SsmScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                saved_h,
            } => {
                let uv = ctx.value(*u).data().to_vec();
                let dv = ctx.value(*delta).data().to_vec();
                let av = ctx.value(*a).data().to_vec();
                let bv = ctx.value(*b).data().to_vec();
                let cv = ctx.value(*c).data().to_vec();
                let skip = ctx.value(*d).data().to_vec();
                let (l, chans) = (out.shape()[0], out.shape()[1]);
                let n = av.len() / chans;

                let mut du = vec![0.0; uv.len()];
                let mut ddelta = vec![0.0; dv.len()];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let mut dc = vec![0.0; cv.len()];
                let mut dskip = vec![0.0; skip.len()];
                let mut dh_carry = vec![0.0; chans * n];

                for t in (0..l).rev() {
                    for ch in 0..chans {
                        let go = g[t * chans + ch];
                        dskip[ch] += go * uv[t * chans + ch];
                        du[t * chans + ch] += go * skip[ch];
                        let dt = dv[t * chans + ch];
                        for j in 0..n {
                            let idx = (t * chans + ch) * n + j;
                            let h = saved_h[idx];
                            dc[t * n + j] += go * h;
                            let dh = cv[t * n + j] * go + dh_carry[ch * n + j];
                            let z = dt * av[ch * n + j];
                            let abar = z.exp();
                            let phi = zoh_phi(z);
                            let h_prev = if t > 0 {
                                saved_h[((t - 1) * chans + ch) * n + j]
                            } else {
                                0.0
                            };
                            let dabar = dh * h_prev;
                            let dbbar = dh * uv[t * chans + ch];
                            let bbar = phi * dt * bv[t * n + j];
                            du[t * chans + ch] += dh * bbar;
                            let dz = dabar * abar + dbbar * zoh_phi_prime(z) * dt * bv[t * n + j];
                            ddelta[t * chans + ch] += dz * av[ch * n + j] + dbbar * phi * bv[t * n + j];
                            da[ch * n + j] += dz * dt;
                            db[t * n + j] += dbbar * phi * dt;
                            dh_carry[ch * n + j] = dh * abar;
                        }
                    }
                }

                ctx.add(*u, |gx| accumulate(gx, &du, 1.0));
                ctx.add(*delta, |gx| accumulate(gx, &ddelta, 1.0));
                ctx.add(*a, |gx| accumulate(gx, &da, 1.0));
                ctx.add(*b, |gx| accumulate(gx, &db, 1.0));
                ctx.add(*c, |gx| accumulate(gx, &dc, 1.0));
                ctx.add(*d, |gx| accumulate(gx, &dskip, 1.0));
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let patch = spec.kh * spec.kw * cin;
    let mut col = vec![0.0; ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let dst = base + (ky * spec.kw + kx) * cin;
                    col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    col
}

fn col2im_acc(
    dcol: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    gx: &mut [f64],
) {
    let patch = spec.kh * spec.kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * patch;
            for ky in 0..spec.kh {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..spec.kw {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * cin;
                    let src = base + (ky * spec.kw + kx) * cin;
                    for i in 0..cin {
                        gx[dst + i] += dcol[src + i];
                    }
                }
            }
        }
    }
}

/// Bilinear weights for one point with border clamping.
struct BilinearStencil {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: f64,
    fx: f64,
    w00: f64,
    w01: f64,
    w10: f64,
    w11: f64,
    y_interior: bool,
    x_interior: bool,
}

impl BilinearStencil {
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let cy = y.clamp(0.0, (h - 1) as f64);
        let cx = x.clamp(0.0, (w - 1) as f64);
        let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
        let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = cy - y0 as f64;
        let fx = cx - x0 as f64;
        BilinearStencil {
            y0,
            y1,
            x0,
            x1,
            fy,
            fx,
            w00: (1.0 - fy) * (1.0 - fx),
            w01: (1.0 - fy) * fx,
            w10: fy * (1.0 - fx),
            w11: fy * fx,
            y_interior: y > 0.0 && y < (h - 1) as f64,
            x_interior: x > 0.0 && x < (w - 1) as f64,
        }
    }
}

// ── builder methods ──────────────────────────────────────────────────

impl Tape {
    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), data, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), data, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), data, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), data, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = map(self.value(x), |v| v * c);
        self.push(Op::Scale(x, c), t, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = map(self.value(x), |v| v + c);
        self.push(Op::AddScalar(x), t, "add_scalar")
    }

    /// x scaled by a one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "scale_by",
                shape: self.shape(s).to_vec(),
                reason: "scalar operand must have one element".into(),
            });
        }
        let sv = self.value(s).data()[0];
        let t = map(self.value(x), |v| v * sv);
        self.push(Op::ScaleByScalar { s, x }, t, "scale_by")
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = map(self.value(x), |v| kind.eval(v));
        self.push(Op::Unary(kind, x), t, kind.name())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot view {} elements", self.value(x).numel()),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push(Op::Reshape(x), t, "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expects a 2-d tensor".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(x), t, "transpose")
    }

    /// Reverses the order along axis 0.
    pub fn flip_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let inner = self.value(x).numel() / rows;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..rows {
            out[i * inner..(i + 1) * inner]
                .copy_from_slice(&xd[(rows - 1 - i) * inner..(rows - i) * inner]);
        }
        let t = Tensor::new(shape, out)?;
        self.push(Op::FlipRows(x), t, "flip_rows")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {} out of range", axis)));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &x in xs {
            let len = self.shape(x)[axis];
            let xd = self.value(x).data();
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * total + offset + l) * inner;
                    let src = (o * len + l) * inner;
                    out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                }
            }
            offset += len;
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            t,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * full + start + l) * inner;
                let dst = (o * len + l) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            t,
            "slice",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Mean(x), Tensor::scalar(s / n), "mean")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("reduce_axis", format!("axis {} of {:?}", axis, shape)));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[src + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, out)?;
        let (op, name) = if mean {
            (Op::MeanAxis { x, axis }, "mean_axis")
        } else {
            (Op::SumAxis { x, axis }, "sum_axis")
        };
        self.push(op, t, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Tr::N,
            Tr::N,
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), t, "matmul")
    }

    /// (rows, cols) + (cols,) with the vector added to every row.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: sx,
                rhs: sv,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] + vd[c];
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::AddRowVec(x, v), t, "add_row_vec")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::invalid("softmax", "0-d input"))?;
        let xd = self.value(x).data();
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(Op::Softmax(x), t, "softmax")
    }

    /// Row-wise softmax over the support of a binary mask; entries outside
    /// the support are exactly zero. `logits` and `mask` are 2-d and equal
    /// in shape.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || mask.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: mask.shape().to_vec(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xd = self.value(logits).data();
        let md = mask.data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if md[r * cols + c] > 0.5 {
                    mx = mx.max(xd[r * cols + c]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::invalid(
                    "masked_softmax",
                    format!("row {} has empty support", r),
                ));
            }
            let mut z = 0.0;
            for c in 0..cols {
                if md[r * cols + c] > 0.5 {
                    let e = (xd[r * cols + c] - mx).exp();
                    out[r * cols + c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] /= z;
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::MaskedSoftmax {
                logits,
                mask: md.to_vec(),
            },
            t,
            "masked_softmax",
        )
    }

    /// Layer normalization over the last axis with per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "0-d input"))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / cols;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mu: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mu) * rstd * gd[c] + bd[c];
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(Op::LayerNorm { x, gamma, beta, eps }, t, "layer_norm")
    }

    /// Batch normalization over all axes but the last, with explicit
    /// statistics chosen by the caller (batch stats in training, running
    /// stats in eval).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let chans = *shape.last().ok_or_else(|| Error::invalid("batch_norm", "0-d input"))?;
        if self.shape(gamma) != [chans] || self.shape(beta) != [chans] || mean.len() != chans || var.len() != chans {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for (i, v) in xd.iter().enumerate() {
            let c = i % chans;
            out[i] = (v - mean[c]) * rstd[c] * gd[c] + bd[c];
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
                train,
            },
            t,
            "batch_norm",
        )
    }

    /// Per-channel mean and biased variance over all axes but the last.
    pub fn channel_stats(&self, x: Var) -> (Vec<f64>, Vec<f64>) {
        let shape = self.shape(x);
        let chans = *shape.last().unwrap();
        let xd = self.value(x).data();
        let pop = (xd.len() / chans) as f64;
        let mut mean = vec![0.0; chans];
        for (i, v) in xd.iter().enumerate() {
            mean[i % chans] += v;
        }
        mean.iter_mut().for_each(|m| *m /= pop);
        let mut var = vec![0.0; chans];
        for (i, v) in xd.iter().enumerate() {
            let d = v - mean[i % chans];
            var[i % chans] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= pop);
        (mean, var)
    }

    /// 2-d convolution over an (H, W, Cin) tensor with an
    /// (KH, KW, Cin, Cout) kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[2] != ws[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        let spec = Conv2dSpec {
            kh,
            kw,
            stride,
            pad,
        };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let col = im2col(self.value(x).data(), h, wd, cin, spec, ho, wo);
        let patch = kh * kw * cin;
        let mut out = vec![0.0; ho * wo * cout];
        gemm(
            Tr::N,
            Tr::N,
            ho * wo,
            patch,
            cout,
            1.0,
            &col,
            self.value(w).data(),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..ho * wo {
                for c in 0..cout {
                    out[r * cout + c] += bd[c];
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, cout], out)?;
        self.push(Op::Conv2d { x, w, bias, spec }, t, "conv2d")
    }

    /// Depth-wise 1-d convolution, kernel 3, zero padding 1, no bias.
    /// Input (L, C), weights (C, 3).
    pub fn dwconv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws != [xs[1], 3] {
            return Err(Error::ShapeMismatch {
                op: "dwconv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (l, c) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; l * c];
        for i in 0..l {
            for t in 0..3usize {
                let j = i as isize + t as isize - 1;
                if j < 0 || j >= l as isize {
                    continue;
                }
                let j = j as usize;
                for ch in 0..c {
                    out[i * c + ch] += wd[ch * 3 + t] * xd[j * c + ch];
                }
            }
        }
        let t = Tensor::new(vec![l, c], out)?;
        self.push(Op::DwConv1d { x, w }, t, "dwconv1d")
    }

    /// Bilinear interpolation of an (H, W, C) grid at (N, 2) points given as
    /// (row, col) in grid units. Coordinates are clamped to the border.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> Result<Var> {
        let gs = self.shape(grid).to_vec();
        let cs = self.shape(coords).to_vec();
        if gs.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: gs,
                rhs: cs,
            });
        }
        self.value(coords).check_finite("bilinear_sample")?;
        let (h, w, c) = (gs[0], gs[1], gs[2]);
        let npts = cs[0];
        let gd = self.value(grid).data();
        let cd = self.value(coords).data();
        let mut out = vec![0.0; npts * c];
        for p in 0..npts {
            let s = BilinearStencil::new(cd[2 * p], cd[2 * p + 1], h, w);
            for ch in 0..c {
                out[p * c + ch] = s.w00 * gd[(s.y0 * w + s.x0) * c + ch]
                    + s.w01 * gd[(s.y0 * w + s.x1) * c + ch]
                    + s.w10 * gd[(s.y1 * w + s.x0) * c + ch]
                    + s.w11 * gd[(s.y1 * w + s.x1) * c + ch];
            }
        }
        let t = Tensor::new(vec![npts, c], out)?;
        self.push(Op::BilinearSample { grid, coords }, t, "bilinear_sample")
    }

    /// Fused selective-scan recurrence with zero-order-hold discretization.
    ///
    /// Shapes: u (L, C), delta (L, C) strictly positive, a (C, N), b (L, N),
    /// c (L, N), d (C,). Per step and state:
    ///   h_t = exp(delta*a) h_{t-1} + phi(delta*a) delta b_t u_t
    ///   y_t = sum_n c_t[n] h_t[n] + d u_t
    pub fn ssm_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 2 {
            return Err(Error::InvalidShape {
                op: "ssm_scan",
                shape: us,
                reason: "input must be (L, C)".into(),
            });
        }
        let (l, chans) = (us[0], us[1]);
        let as_ = self.shape(a).to_vec();
        if as_.len() != 2 || as_[0] != chans {
            return Err(Error::ShapeMismatch {
                op: "ssm_scan",
                lhs: us,
                rhs: as_,
            });
        }
        let n = as_[1];
        if self.shape(delta) != [l, chans]
            || self.shape(b) != [l, n]
            || self.shape(c) != [l, n]
            || self.shape(d) != [chans]
        {
            return Err(Error::ShapeMismatch {
                op: "ssm_scan",
                lhs: us,
                rhs: self.shape(delta).to_vec(),
            });
        }
        if self.value(delta).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ssm_scan", "delta must be strictly positive"));
        }

        let uv = self.value(u).data();
        let dv = self.value(delta).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let cv = self.value(c).data();
        let skip = self.value(d).data();

        let mut h = vec![0.0; l * chans * n];
        let mut y = vec![0.0; l * chans];
        for t in 0..l {
            for ch in 0..chans {
                let dt = dv[t * chans + ch];
                let ut = uv[t * chans + ch];
                let mut acc = 0.0;
                for j in 0..n {
                    let z = dt * av[ch * n + j];
                    let abar = z.exp();
                    let bbar = zoh_phi(z) * dt * bv[t * n + j];
                    let h_prev = if t > 0 {
                        h[((t - 1) * chans + ch) * n + j]
                    } else {
                        0.0
                    };
                    let ht = abar * h_prev + bbar * ut;
                    h[(t * chans + ch) * n + j] = ht;
                    acc += cv[t * n + j] * ht;
                }
                y[t * chans + ch] = acc + skip[ch] * ut;
            }
        }
        let t = Tensor::new(vec![l, chans], y)?;
        self.push(
            Op::SsmScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                saved_h: h,
            },
            t,
            "ssm_scan",
        )
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let x = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_hand_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_mismatch_is_structured() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(y), &[4, 3]);
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 3.7));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_pool_grid_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[16, 12, 512]));
        let m1 = tape.mean_axis(x, 0).unwrap();
        let m2 = tape.mean_axis(m1, 0).unwrap();
        assert_eq!(tape.shape(m2), &[512]);
        assert!((tape.value(m2).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_weights_match_closed_form() {
        // Point at (v, u) = (0.75, 0.25) inside the cell spanning
        // (0,0)..(1,1): weights (1-u)(1-v), u(1-v), (1-u)v, uv.
        let mut tape = Tape::new();
        let mut grid = Tensor::zeros(&[2, 2, 1]);
        grid.set(&[0, 0, 0], 1.0);
        let g = tape.constant(grid);
        let c = tape.constant(Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap());
        let y = tape.bilinear_sample(g, c).unwrap();
        assert!((tape.value(y).data()[0] - 0.1875).abs() < 1e-15);

        // All four corners weighted.
        let grid = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let w00 = sample_corner(&grid, 0.75, 0.25);
        assert!((w00 - 0.1875).abs() < 1e-15);
        let grid = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((sample_corner(&grid, 0.75, 0.25) - 0.0625).abs() < 1e-15);
        let grid = Tensor::new(vec![2, 2, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((sample_corner(&grid, 0.75, 0.25) - 0.5625).abs() < 1e-15);
        let grid = Tensor::new(vec![2, 2, 1], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((sample_corner(&grid, 0.75, 0.25) - 0.1875).abs() < 1e-15);

        fn sample_corner(grid: &Tensor, v: f64, u: f64) -> f64 {
            let mut tape = Tape::new();
            let g = tape.constant(grid.clone());
            let c = tape.constant(Tensor::new(vec![1, 2], vec![v, u]).unwrap());
            let y = tape.bilinear_sample(g, c).unwrap();
            tape.value(y).data()[0]
        }
    }

    #[test]
    fn bilinear_cell_center_and_midpoint() {
        let mut grid = Tensor::zeros(&[3, 3, 2]);
        for y in 0..3 {
            for x in 0..3 {
                grid.set(&[y, x, 0], (y * 3 + x) as f64);
                grid.set(&[y, x, 1], 10.0 * (y * 3 + x) as f64);
            }
        }
        let mut tape = Tape::new();
        let g = tape.constant(grid);
        let c = tape.constant(
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.5]).unwrap(),
        );
        let y = tape.bilinear_sample(g, c).unwrap();
        // Exactly on cell (1,1): feature 4; midpoint between (1,1) and (1,2):
        // mean of 4 and 5.
        assert_eq!(tape.value(y).data()[0], 4.0);
        assert_eq!(tape.value(y).data()[1], 40.0);
        assert_eq!(tape.value(y).data()[2], 4.5);
        assert_eq!(tape.value(y).data()[3], 45.0);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1e308]));
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
