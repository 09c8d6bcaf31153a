//! Convolution and pooling kernels.
//!
//! Convolutions lower to GEMM through im2col/col2im. Each batch element is
//! processed independently (and possibly in parallel); cross-batch
//! reductions for weight and bias gradients run in fixed batch order with
//! f64 accumulation, so results do not depend on the worker count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Geometry of a cross-correlation from an `h x w` input to `oh x ow`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::dim(op, format!("kernel {kh}x{kw} must be at least 1x1")));
        }
        if stride == 0 {
            return Err(Error::dim(op, "stride must be >= 1"));
        }
        let out = |axis: &str, n: usize, k: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::dim(
                    op,
                    format!(
                        "axis {axis}: (size {n} + 2*pad {pad} - kernel {k}) not a non-negative multiple of stride {stride}"
                    ),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let oh = out("H", h, kh)?;
        let ow = out("W", w, kw)?;
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let l = g.col_len();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let l = g.col_len();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `C = A * B + beta * C` with arbitrary strides (row-major logical view).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice extents cover every index touched with the given strides,
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sum_partials(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut acc = vec![0f64; len];
    for p in &parts {
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn bias_grad(gy: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    (0..c)
        .map(|ch| {
            let mut s = 0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                s += gy[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            s as f32
        })
        .collect()
}

fn check_bias(op: &'static str, bias: &Tensor, cout: usize) -> Result<()> {
    if bias.shape() != [cout] {
        return Err(Error::dim(
            op,
            format!("bias shape {:?}, expected [{cout}] (Cout)", bias.shape()),
        ));
    }
    Ok(())
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    const OP: &str = "conv2d";
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (cout, wcin, kh, kw) = w.dims4(OP)?;
    if wcin != cin {
        return Err(Error::dim(
            OP,
            format!("input channels (axis C) {cin} vs weight Cin {wcin}"),
        ));
    }
    let g = ConvGeom::new(OP, cin, (h, wd), (kh, kw), stride, pad)?;
    Ok((n, cout, g))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cout, g) = conv_geom(x, w, stride, pad)?;
    check_bias("conv2d", b, cout)?;
    let (k, l) = (g.col_rows(), g.col_len());
    let in_sz = g.channels * g.h * g.w;
    let mut out = vec![0f32; n * cout * l];
    out.par_chunks_mut(cout * l)
        .enumerate()
        .for_each(|(s, y)| {
            let mut cols = vec![0f32; k * l];
            im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut cols);
            for (co, row) in y.chunks_mut(l).enumerate() {
                row.fill(b.data()[co]);
            }
            gemm(cout, k, l, w.data(), (k, 1), &cols, (l, 1), 1.0, y);
        });
    Tensor::new(vec![n, cout, g.oh, g.ow], out)
}

/// Gradients `(dx, dw, db)` of a conv2d given the upstream gradient `gy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f32],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (n, cout, g) = conv_geom(x, w, stride, pad)?;
    let (k, l) = (g.col_rows(), g.col_len());
    let in_sz = g.channels * g.h * g.w;
    let mut dx = vec![0f32; x.numel()];
    let dw_parts: Vec<Vec<f32>> = dx
        .par_chunks_mut(in_sz)
        .enumerate()
        .map(|(s, dxs)| {
            let gys = &gy[s * cout * l..(s + 1) * cout * l];
            let mut cols = vec![0f32; k * l];
            im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut cols);
            let mut dw = vec![0f32; cout * k];
            // dW = dY * cols^T
            gemm(cout, l, k, gys, (l, 1), &cols, (1, l), 0.0, &mut dw);
            // dcols = W^T * dY
            gemm(k, cout, l, w.data(), (1, k), gys, (l, 1), 0.0, &mut cols);
            col2im(&cols, &g, dxs);
            dw
        })
        .collect();
    let dw = sum_partials(dw_parts, cout * k);
    let db = bias_grad(gy, n, cout, l);
    Ok((dx, dw, db))
}

/// Transposed-convolution geometry: the conv that maps the output back to the input.
fn conv_t_geom(x: &Tensor, w: &Tensor, stride: usize) -> Result<(usize, usize, usize, ConvGeom)> {
    const OP: &str = "conv_transpose2d";
    if !(1..=2).contains(&stride) {
        return Err(Error::dim(OP, format!("stride {stride} not in {{1, 2}}")));
    }
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (wcin, cout, kh, kw) = w.dims4(OP)?;
    if wcin != cin {
        return Err(Error::dim(
            OP,
            format!("input channels (axis C) {cin} vs weight Cin {wcin}"),
        ));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::dim(OP, format!("kernel {kh}x{kw} must be at least 1x1")));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    let g = ConvGeom::new(OP, cout, (oh, ow), (kh, kw), stride, 0)?;
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    Ok((n, cin, cout, g))
}

pub fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, cin, cout, g) = conv_t_geom(x, w, stride)?;
    check_bias("conv_transpose2d", b, cout)?;
    let (kc, l) = (g.col_rows(), g.col_len());
    let out_sz = cout * g.h * g.w;
    let mut out = vec![0f32; n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, y)| {
        let xs = &x.data()[s * cin * l..(s + 1) * cin * l];
        let mut cols = vec![0f32; kc * l];
        // cols = W^T * x, W viewed as [Cin, Cout*kh*kw]
        gemm(kc, cin, l, w.data(), (1, kc), xs, (l, 1), 0.0, &mut cols);
        for (co, plane) in y.chunks_mut(g.h * g.w).enumerate() {
            plane.fill(b.data()[co]);
        }
        col2im(&cols, &g, y);
    });
    Tensor::new(vec![n, cout, g.h, g.w], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f32],
    stride: usize,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let (n, cin, cout, g) = conv_t_geom(x, w, stride)?;
    let (kc, l) = (g.col_rows(), g.col_len());
    let out_sz = cout * g.h * g.w;
    let mut dx = vec![0f32; x.numel()];
    let dw_parts: Vec<Vec<f32>> = dx
        .par_chunks_mut(cin * l)
        .enumerate()
        .map(|(s, dxs)| {
            let xs = &x.data()[s * cin * l..(s + 1) * cin * l];
            let mut cols = vec![0f32; kc * l];
            im2col(&gy[s * out_sz..(s + 1) * out_sz], &g, &mut cols);
            gemm(cin, kc, l, w.data(), (kc, 1), &cols, (l, 1), 0.0, dxs);
            let mut dw = vec![0f32; cin * kc];
            gemm(cin, l, kc, xs, (l, 1), &cols, (1, l), 0.0, &mut dw);
            dw
        })
        .collect();
    let dw = sum_partials(dw_parts, cin * kc);
    let db = bias_grad(gy, n, cout, g.h * g.w);
    Ok((dx, dw, db))
}

/// Non-overlapping `k x k` max pooling. Returns the pooled tensor and, for
/// every output element, the flat index of the first (row-major) maximum.
pub fn maxpool2d_forward(x: &Tensor, k: usize) -> Result<(Tensor, Vec<u32>)> {
    const OP: &str = "maxpool2d";
    let (n, c, h, w) = x.dims4(OP)?;
    if k == 0 {
        return Err(Error::dim(OP, "window must be >= 1"));
    }
    if h % k != 0 || w % k != 0 {
        return Err(Error::dim(
            OP,
            format!("H={h} and W={w} must both be divisible by window {k}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    let d = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * k * w + oj * k;
                for di in 0..k {
                    for dj in 0..k {
                        let at = base + (oi * k + di) * w + oj * k + dj;
                        if d[at] > d[best] {
                            best = at;
                        }
                    }
                }
                out.push(d[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
