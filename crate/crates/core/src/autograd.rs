//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes one node holding
//! its output value and whatever it needs for the backward pass; node inputs
//! always precede the node itself, so [`Graph::backward`] simply walks the tape
//! in reverse. A graph is built per batch and dropped afterwards.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::gemm::{gemm, gemm_into, Op as Mat};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution kernel selection. Both paths compute the same function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    /// Patch matrix per sample followed by a matrix product.
    #[default]
    Im2col,
    /// Plain nested loops.
    Direct,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        path: ConvPath,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
        channel_broadcast: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        alpha: f64,
    },
    SumSquares {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Single owner; build one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    conv_path: ConvPath,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_conv_path(path: ConvPath) -> Self {
        Graph {
            conv_path: path,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        let rg = value.requires_grad();
        value.zero_grad();
        value.set_requires_grad(rg);
        self.push(value, Op::Leaf)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaves that received a gradient in the last backward pass.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| {
                matches!(self.nodes[i].op, Op::Leaf)
                    && self.grads.get(i).is_some_and(|g| g.is_some())
            })
            .map(Var)
            .collect()
    }

    /// Number of nodes that take part in differentiation.
    pub fn grad_node_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.value.requires_grad())
            .count()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let rg = match &op {
            Op::Leaf => value.requires_grad(),
            _ => op_inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].value.requires_grad()),
        };
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// 2-D cross-correlation, `input [N,C,H,W]`, `weight [F,C,kh,kw]`,
    /// `bias [F]`, symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 4 || ws.len() != 4 {
            bail!(
                InvalidShape,
                "conv2d expects 4-d input and weight, got {:?} and {:?}",
                is,
                ws
            );
        }
        if is[1] != ws[1] {
            bail!(
                InvalidShape,
                "conv2d input has {} channels, weight expects {}",
                is[1],
                ws[1]
            );
        }
        if bs != [ws[0]] {
            bail!(InvalidShape, "conv2d bias {:?} for {} filters", bs, ws[0]);
        }
        if stride == 0 {
            bail!(InvalidArgument, "conv2d stride must be positive");
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            bail!(
                InvalidShape,
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            );
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let path = self.conv_path;
        let out = match path {
            ConvPath::Im2col => {
                conv_forward_im2col(&geom, self.data(input), self.data(weight), self.data(bias))
            }
            ConvPath::Direct => {
                conv_forward_direct(&geom, self.data(input), self.data(weight), self.data(bias))
            }
        };
        let value = Tensor::new(&[n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                path,
            },
        ))
    }

    /// Non-overlapping or strided max pooling without padding.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            bail!(
                InvalidArgument,
                "maxpool2d window {} and stride {} must be positive",
                k,
                stride
            );
        }
        let s = self.shape(input);
        if s.len() != 4 {
            bail!(InvalidShape, "maxpool2d expects 4-d input, got {:?}", s);
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if k > h || k > w {
            bail!(InvalidShape, "pool window {} larger than {}x{}", k, h, w);
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(value, Op::Relu { input }))
    }

    /// `input [N,D] · weight [D,M] + bias [M]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] || bs != [ws[1]] {
            bail!(
                InvalidShape,
                "fully_connected of {:?} with weight {:?} and bias {:?}",
                is,
                ws,
                bs
            );
        }
        let (n, d, m) = (is[0], is[1], ws[1]);
        let mut out: Vec<f64> = self
            .data(bias)
            .iter()
            .copied()
            .cycle()
            .take(n * m)
            .collect();
        gemm(
            n,
            d,
            m,
            self.data(input),
            Mat::N,
            self.data(weight),
            Mat::N,
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Hadamard product. `b` may also be `[N,1,H,W]` against `a` of
    /// `[N,C,H,W]`, in which case it is broadcast over channels.
    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let channel_broadcast = if sa == sb {
            false
        } else if sa.len() == 4
            && sb.len() == 4
            && sb[1] == 1
            && sa[0] == sb[0]
            && sa[2..] == sb[2..]
        {
            true
        } else {
            bail!(InvalidShape, "elementwise_mul of {:?} and {:?}", sa, sb);
        };
        let (xa, xb) = (self.data(a), self.data(b));
        let data: Vec<f64> = if channel_broadcast {
            let (c, plane) = (sa[1], sa[2] * sa[3]);
            xa.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let n = i / (c * plane);
                    x * xb[n * plane + i % plane]
                })
                .collect()
        } else {
            xa.iter().zip(xb).map(|(x, y)| x * y).collect()
        };
        let value = Tensor::new(sa, data)?;
        Ok(self.push(
            value,
            Op::Mul {
                a,
                b,
                channel_broadcast,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|x| alpha * x).collect())?;
        Ok(self.push(value, Op::Scale { a, alpha }))
    }

    /// `Σ aᵢ²` as a one-element tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Flattens `[N, ...]` into `[N, D]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let d = s[1..].iter().product();
        self.reshape(a, &[n, d])
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidShape(format!(
                "{} of {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    /// Reverse pass from a one-element `loss`. Gradients of earlier passes
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            bail!(
                InvalidArgument,
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            );
        }
        self.grads = vec![None; self.nodes.len()];
        if !lv.requires_grad() {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].value.requires_grad() {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Contributions are computed against shared borrows first, then added.
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        let rg = |v: Var| self.nodes[v.0].value.requires_grad();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                path,
            } => {
                let (x, wt) = (self.data(*input), self.data(*weight));
                let (dx, dw) = match path {
                    ConvPath::Im2col => {
                        conv_backward_im2col(geom, x, wt, g, rg(*input), rg(*weight))
                    }
                    ConvPath::Direct => {
                        conv_backward_direct(geom, x, wt, g, rg(*input), rg(*weight))
                    }
                };
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
                if rg(*bias) {
                    let plane = geom.out_plane();
                    let mut db = vec![0.0; geom.f];
                    for (j, chunk) in g.chunks_exact(plane).enumerate() {
                        db[j % geom.f] += chunk.iter().sum::<f64>();
                    }
                    out.push((*bias, db));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*input, dx));
            }
            Op::Relu { input } => {
                let x = self.data(*input);
                out.push((
                    *input,
                    x.iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (n, d, m) = (xs[0], xs[1], ws[1]);
                if rg(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, m, d, g, Mat::N, self.data(*weight), Mat::T, 0.0, &mut dx);
                    out.push((*input, dx));
                }
                if rg(*weight) {
                    let mut dw = vec![0.0; d * m];
                    gemm(d, n, m, self.data(*input), Mat::T, g, Mat::N, 0.0, &mut dw);
                    out.push((*weight, dw));
                }
                if rg(*bias) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul {
                a,
                b,
                channel_broadcast,
            } => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                if *channel_broadcast {
                    let s = self.shape(*a);
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let bidx = |i: usize| (i / (c * plane)) * plane + i % plane;
                    if rg(*a) {
                        out.push((
                            *a,
                            g.iter()
                                .enumerate()
                                .map(|(i, &gv)| gv * xb[bidx(i)])
                                .collect(),
                        ));
                    }
                    if rg(*b) {
                        let mut db = vec![0.0; xb.len()];
                        for (i, &gv) in g.iter().enumerate() {
                            db[bidx(i)] += gv * xa[i];
                        }
                        out.push((*b, db));
                    }
                } else {
                    if rg(*a) {
                        out.push((*a, g.iter().zip(xb).map(|(g, y)| g * y).collect()));
                    }
                    if rg(*b) {
                        out.push((*b, g.iter().zip(xa).map(|(g, x)| g * x).collect()));
                    }
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Scale { a, alpha } => out.push((*a, g.iter().map(|x| alpha * x).collect())),
            Op::SumSquares { a } => {
                let g0 = g[0];
                out.push((*a, self.data(*a).iter().map(|x| 2.0 * x * g0).collect()));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
        }
        for (v, contribution) in out {
            self.accumulate(v, contribution);
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        }
        | Op::Linear {
            input,
            weight,
            bias,
        } => vec![*input, *weight, *bias],
        Op::MaxPool { input, .. } | Op::Relu { input } => vec![*input],
        Op::Mul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } => vec![*a, *b],
        Op::Scale { a, .. } | Op::SumSquares { a } | Op::Reshape { a } => vec![*a],
    }
}

/// Output columns `[lo, hi)` whose input column `ox + j − pad` is in range
/// (stride 1 only).
fn valid_columns(gm: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = gm.pad.saturating_sub(j).min(gm.ow);
    let hi = (gm.w + gm.pad).saturating_sub(j).min(gm.ow).max(lo);
    (lo, hi)
}

/// Fills one sample's `[C·kh·kw, oh·ow]` block of a patch matrix whose rows
/// are `ld` apart.
fn im2col(gm: &ConvGeom, x: &[f64], cols: &mut [f64], ld: usize) {
    let plane = gm.out_plane();
    for c in 0..gm.c {
        for i in 0..gm.kh {
            for j in 0..gm.kw {
                let row = &mut cols[((c * gm.kh + i) * gm.kw + j) * ld..][..plane];
                for oy in 0..gm.oh {
                    let y = (oy * gm.stride + i) as isize - gm.pad as isize;
                    let dst = &mut row[oy * gm.ow..][..gm.ow];
                    if y < 0 || y >= gm.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * gm.h + y as usize) * gm.w..][..gm.w];
                    if gm.stride == 1 {
                        let (lo, hi) = valid_columns(gm, j);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + j - gm.pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * gm.stride + j) as isize - gm.pad as isize;
                        *d = if xx < 0 || xx >= gm.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds one sample's block of a patch-matrix gradient (rows `ld`
/// apart) back onto its input gradient.
fn col2im(gm: &ConvGeom, cols: &[f64], ld: usize, dx: &mut [f64]) {
    let plane = gm.out_plane();
    for c in 0..gm.c {
        for i in 0..gm.kh {
            for j in 0..gm.kw {
                let row = &cols[((c * gm.kh + i) * gm.kw + j) * ld..][..plane];
                for oy in 0..gm.oh {
                    let y = (oy * gm.stride + i) as isize - gm.pad as isize;
                    if y < 0 || y >= gm.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * gm.h + y as usize) * gm.w..][..gm.w];
                    let src = &row[oy * gm.ow..][..gm.ow];
                    if gm.stride == 1 {
                        let (lo, hi) = valid_columns(gm, j);
                        if lo < hi {
                            let off = lo + j - gm.pad;
                            dst[off..off + hi - lo]
                                .iter_mut()
                                .zip(&src[lo..hi])
                                .for_each(|(d, v)| *d += v);
                        }
                        continue;
                    }
                    for (ox, &v) in src.iter().enumerate() {
                        let xx = (ox * gm.stride + j) as isize - gm.pad as isize;
                        if xx >= 0 && (xx as usize) < gm.w {
                            dst[xx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Samples sharing one patch matrix, so small output planes still give
/// products wide enough for the GEMM kernel.
fn group_size(gm: &ConvGeom) -> usize {
    (128 / gm.out_plane()).clamp(1, gm.n.max(1))
}

fn conv_forward_im2col(gm: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, p) = (gm.patch_len(), gm.out_plane());
    let in_len = gm.c * gm.h * gm.w;
    let group = group_size(gm);
    let mut out = vec![0.0; gm.n * gm.f * p];
    let mut cols = vec![0.0; k * group * p];
    let mut tmp = vec![0.0; gm.f * group * p];
    for start in (0..gm.n).step_by(group) {
        let count = group.min(gm.n - start);
        let ld = count * p;
        for s in 0..count {
            im2col(
                gm,
                &x[(start + s) * in_len..][..in_len],
                &mut cols[s * p..],
                ld,
            );
        }
        // tmp[F, ld] = W·cols, evaluated as tmpᵀ = colsᵀ·Wᵀ; faster for few filters.
        gemm_into(
            ld,
            k,
            gm.f,
            &cols[..k * ld],
            Mat::T,
            wt,
            Mat::T,
            0.0,
            &mut tmp[..gm.f * ld],
            Mat::T,
        );
        for s in 0..count {
            for f in 0..gm.f {
                let dst = &mut out[((start + s) * gm.f + f) * p..][..p];
                let src = &tmp[f * ld + s * p..][..p];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + b[f]);
            }
        }
    }
    out
}

fn conv_backward_im2col(
    gm: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p) = (gm.patch_len(), gm.out_plane());
    let in_len = gm.c * gm.h * gm.w;
    let group = group_size(gm);
    let mut dx = need_dx.then(|| vec![0.0; gm.n * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; gm.f * k]);
    let mut cols = vec![0.0; k * group * p];
    let mut gt = vec![0.0; gm.f * group * p];
    for start in (0..gm.n).step_by(group) {
        let count = group.min(gm.n - start);
        let ld = count * p;
        for s in 0..count {
            for f in 0..gm.f {
                gt[f * ld + s * p..][..p].copy_from_slice(&g[((start + s) * gm.f + f) * p..][..p]);
            }
        }
        let gt = &gt[..gm.f * ld];
        if let Some(dw) = dw.as_mut() {
            for s in 0..count {
                im2col(
                    gm,
                    &x[(start + s) * in_len..][..in_len],
                    &mut cols[s * p..],
                    ld,
                );
            }
            gemm(gm.f, ld, k, gt, Mat::N, &cols[..k * ld], Mat::T, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_into(
                ld,
                gm.f,
                k,
                gt,
                Mat::T,
                wt,
                Mat::N,
                0.0,
                &mut cols[..k * ld],
                Mat::T,
            );
            for s in 0..count {
                col2im(
                    gm,
                    &cols[s * p..],
                    ld,
                    &mut dx[(start + s) * in_len..][..in_len],
                );
            }
        }
    }
    (dx, dw)
}

fn conv_forward_direct(gm: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; gm.n * gm.f * gm.out_plane()];
    for n in 0..gm.n {
        for f in 0..gm.f {
            for oy in 0..gm.oh {
                for ox in 0..gm.ow {
                    let mut acc = b[f];
                    for c in 0..gm.c {
                        for i in 0..gm.kh {
                            let y = (oy * gm.stride + i) as isize - gm.pad as isize;
                            if y < 0 || y >= gm.h as isize {
                                continue;
                            }
                            for j in 0..gm.kw {
                                let xx = (ox * gm.stride + j) as isize - gm.pad as isize;
                                if xx < 0 || xx >= gm.w as isize {
                                    continue;
                                }
                                acc += wt[((f * gm.c + c) * gm.kh + i) * gm.kw + j]
                                    * x[((n * gm.c + c) * gm.h + y as usize) * gm.w + xx as usize];
                            }
                        }
                    }
                    out[((n * gm.f + f) * gm.oh + oy) * gm.ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward_direct(
    gm: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    for n in 0..gm.n {
        for f in 0..gm.f {
            for oy in 0..gm.oh {
                for ox in 0..gm.ow {
                    let gv = g[((n * gm.f + f) * gm.oh + oy) * gm.ow + ox];
                    for c in 0..gm.c {
                        for i in 0..gm.kh {
                            let y = (oy * gm.stride + i) as isize - gm.pad as isize;
                            if y < 0 || y >= gm.h as isize {
                                continue;
                            }
                            for j in 0..gm.kw {
                                let xx = (ox * gm.stride + j) as isize - gm.pad as isize;
                                if xx < 0 || xx >= gm.w as isize {
                                    continue;
                                }
                                let xi = ((n * gm.c + c) * gm.h + y as usize) * gm.w + xx as usize;
                                let wi = ((f * gm.c + c) * gm.kh + i) * gm.kw + j;
                                dx[xi] += gv * wt[wi];
                                dw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (need_dx.then_some(dx), need_dw.then_some(dw))
}
