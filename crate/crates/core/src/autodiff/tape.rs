//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to apply its vector-Jacobian product. `backward` walks the nodes
//! in exact reverse recording order, accumulating gradients across fan-out.

use rand::Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Var, stride: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu(Var),
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Scale(Var, f32),
    Shift(Var),
    Dropout { x: Var, keep: Vec<f32> },
    MeanMasked { x: Var, mask: Vec<bool>, count: usize },
    Sum(Var),
    Pad { x: Var },
    Crop { x: Var },
    Channels { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Ordered record of operations. Single writer; one tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(match &op {
            Op::Leaf => true,
            _ => Self::inputs(&op).iter().all(|i| i.0 < self.nodes.len()),
        });
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(y, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = kernels::conv_transpose2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(y, rg, Op::ConvT { x, w, b, stride }))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2d_forward(self.value(x), k)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, rg, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Ln(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Adds a scalar constant to every element.
    pub fn shift(&mut self, x: Var, offset: f32) -> Var {
        self.unary(x, |v| v + offset, Op::Shift(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Concatenates two rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (na, ca, ha, wa) = self.value(a).dims4(OP)?;
        let (nb, cb, hb, wb) = self.value(b).dims4(OP)?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(
                OP,
                format!("N,H,W mismatch: ({na},{ha},{wa}) vs ({nb},{hb},{wb})"),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            data.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "channels";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if start + len > c || len == 0 {
            return Err(Error::dim(
                OP,
                format!("channel range {start}..{} outside C={c}", start + len),
            ));
        }
        let plane = h * w;
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let off = (s * c + start) * plane;
            data.extend_from_slice(&d[off..off + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Channels { x, start }))
    }

    /// Zero-pads the bottom and right edges of a rank-4 tensor to `h x w`.
    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "pad_to";
        let (n, c, xh, xw) = self.value(x).dims4(OP)?;
        if h < xh || w < xw {
            return Err(Error::dim(OP, format!("cannot pad {xh}x{xw} down to {h}x{w}")));
        }
        let d = self.value(x).data();
        let mut data = vec![0f32; n * c * h * w];
        for p in 0..n * c {
            for i in 0..xh {
                let src = &d[(p * xh + i) * xw..(p * xh + i + 1) * xw];
                data[(p * h + i) * w..(p * h + i) * w + xw].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Pad { x }))
    }

    /// Keeps the top-left `h x w` window of a rank-4 tensor.
    pub fn crop_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        const OP: &str = "crop_to";
        let (n, c, xh, xw) = self.value(x).dims4(OP)?;
        if h > xh || w > xw {
            return Err(Error::dim(OP, format!("cannot crop {xh}x{xw} up to {h}x{w}")));
        }
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for i in 0..h {
                let off = (p * xh + i) * xw;
                data.extend_from_slice(&d[off..off + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Crop { x }))
    }

    /// Inverted dropout: when `active` and `p > 0`, zeroes each element with
    /// probability `p` and scales survivors by `1/(1-p)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, active: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !active || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let t = self.value(x);
        let keep: Vec<f32> = (0..t.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { scale })
            .collect();
        let data = t.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, keep }))
    }

    /// Mean over the elements selected by `mask` (same length as `x`),
    /// accumulated in f64.
    pub fn mean_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::dim(
                "mean_masked",
                format!("mask length {} vs tensor size {}", mask.len(), t.numel()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("mean_masked"));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v as f64)
            .sum();
        let value = Tensor::scalar((s / count as f64) as f32);
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::MeanMasked {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), rg, Op::Sum(x))
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvT { x, w, b, .. } => vec![x, w, b],
            Op::Concat { a, b } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MaxPool { x, .. }
            | Op::Dropout { x, .. }
            | Op::MeanMasked { x, .. }
            | Op::Pad { x }
            | Op::Crop { x }
            | Op::Channels { x, .. } => vec![x],
            Op::Relu(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sum(x) => vec![x],
        }
    }

    /// Reverse pass from a scalar `loss`; returns `d loss / d v` for every
    /// node that requires grad (zero-filled if disconnected from `loss`).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0f32; n.value.numel()]))
            .collect();
        if let Some(g) = grads[loss.0].as_mut() {
            g[0] = 1.0;
        }
        let mut touched = vec![false; self.nodes.len()];
        touched[loss.0] = true;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || !touched[i] || matches!(node.op, Op::Leaf) {
                continue;
            }
            let gy = grads[i].take().expect("requires_grad node has buffer");
            for (input, contrib) in self.vjp(node, &gy)? {
                if let Some(acc) = grads[input.0].as_mut() {
                    touched[input.0] = true;
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, gy: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let val = |v: Var| self.value(v).data();
        let y = node.value.data();
        let zip_map = |xs: &[f32], f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            xs.iter().zip(gy).map(|(&x, &g)| f(x, g)).collect()
        };
        let out = match node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(x), self.value(w), gy, stride, pad)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::ConvT { x, w, b, stride } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(self.value(x), self.value(w), gy, stride)?;
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::MaxPool { x, ref argmax } => {
                let mut dx = vec![0f32; self.value(x).numel()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src as usize] += g;
                }
                vec![(x, dx)]
            }
            Op::Relu(x) => vec![(x, zip_map(val(x), &|v, g| if v > 0.0 { g } else { 0.0 }))],
            Op::Exp(x) => vec![(x, y.iter().zip(gy).map(|(&e, &g)| e * g).collect())],
            Op::Ln(x) => vec![(x, zip_map(val(x), &|v, g| g / v))],
            Op::Softplus(x) => vec![(x, zip_map(val(x), &|v, g| g * kernels::sigmoid(v)))],
            Op::Square(x) => vec![(x, zip_map(val(x), &|v, g| 2.0 * v * g))],
            Op::Scale(x, f) => vec![(x, gy.iter().map(|&g| g * f).collect())],
            Op::Shift(x) => vec![(x, gy.to_vec())],
            Op::Add(a, b) => vec![(a, gy.to_vec()), (b, gy.to_vec())],
            Op::Sub(a, b) => vec![(a, gy.to_vec()), (b, gy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => vec![
                (a, zip_map(val(b), &|v, g| v * g)),
                (b, zip_map(val(a), &|v, g| v * g)),
            ],
            Op::Div(a, b) => {
                let (da, db) = (val(a), val(b));
                let ga = zip_map(db, &|v, g| g / v);
                let gb = da
                    .iter()
                    .zip(db)
                    .zip(gy)
                    .map(|((&n, &d), &g)| -g * n / (d * d))
                    .collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
                let cb = self.value(b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let off = s * (ca + cb) * plane;
                    ga.extend_from_slice(&gy[off..off + ca * plane]);
                    gb.extend_from_slice(&gy[off + ca * plane..off + (ca + cb) * plane]);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Channels { x, start } => {
                let (n, c, h, w) = self.value(x).dims4("channels")?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut dx = vec![0f32; n * c * plane];
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    let src = s * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&gy[src..src + len * plane]);
                }
                vec![(x, dx)]
            }
            Op::Pad { x } => {
                let (n, c, xh, xw) = self.value(x).dims4("pad_to")?;
                let (h, w) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = Vec::with_capacity(n * c * xh * xw);
                for p in 0..n * c {
                    for i in 0..xh {
                        let off = (p * h + i) * w;
                        dx.extend_from_slice(&gy[off..off + xw]);
                    }
                }
                vec![(x, dx)]
            }
            Op::Crop { x } => {
                let (n, c, xh, xw) = self.value(x).dims4("crop_to")?;
                let (h, w) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = vec![0f32; n * c * xh * xw];
                for p in 0..n * c {
                    for i in 0..h {
                        let off = (p * xh + i) * xw;
                        dx[off..off + w].copy_from_slice(&gy[(p * h + i) * w..(p * h + i + 1) * w]);
                    }
                }
                vec![(x, dx)]
            }
            Op::Dropout { x, ref keep } => {
                vec![(x, keep.iter().zip(gy).map(|(&k, &g)| k * g).collect())]
            }
            Op::MeanMasked { x, ref mask, count } => {
                let g = gy[0] / count as f32;
                vec![(x, mask.iter().map(|&m| if m { g } else { 0.0 }).collect())]
            }
            Op::Sum(x) => vec![(x, vec![gy[0]; self.value(x).numel()])],
        };
        Ok(out)
    }
}
