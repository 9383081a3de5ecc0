//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its forward value; [`Tape::backward`]
//! walks the tape once in reverse and returns gradients for every leaf that
//! was created with `requires_grad = true`. Operands always precede their
//! consumers, so the reverse walk is a valid topological order.
//!
//! ```
//! use atent::autodiff::Tape;
//! use atent::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let s = tape.sum(x).unwrap();
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{AtentError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Tensor,
        probs: Tensor,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Ordered record of primitive operations. Confined to one thread at a time;
/// build a fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Records an input. Leaves with `requires_grad` receive a gradient from
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(AtentError::DoubleBackward)
        } else {
            Ok(())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(AtentError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = Tensor::from_parts_unchecked(vec![m, n], out).ensure_finite("matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x[n×m] + b[m]`, the only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.len() != xv.shape()[1] {
            return Err(AtentError::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let m = bv.len();
        let bias = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::from_parts_unchecked(xv.shape().to_vec(), out).ensure_finite("add_bias")?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias(x, b), ng))
    }

    /// Per-channel bias for `x[n×c×h×w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 4 || bv.len() != xv.shape()[1] {
            return Err(AtentError::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let plane = xv.shape()[2] * xv.shape()[3];
        let c = bv.len();
        let bias = bv.data();
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bb = bias[i % c];
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        let value =
            Tensor::from_parts_unchecked(xv.shape().to_vec(), out).ensure_finite("add_channel_bias")?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddChannelBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let value = self.value(a).add(self.value(b))?.ensure_finite("add")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)?
            .ensure_finite("mul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check_open()?;
        let value = self.value(x).scale(k).ensure_finite("scale")?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Scale(x, k), ng))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(x);
        Ok(self.push(value, Op::Relu(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let value = Tensor::scalar(self.value(x).sum()).ensure_finite("sum")?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Sum(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let value = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Valid cross-correlation with zero padding. `input` is `c_in×h×w` or
    /// `n×c_in×h×w`, `kernels` is `c_out×c_in×kh×kw`; the output keeps the
    /// input's rank.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_open()?;
        let (iv, kv) = (self.value(input), self.value(kernels));
        let batched = match iv.rank() {
            3 => false,
            4 => true,
            _ => return Err(AtentError::shape("conv2d", format!("input {:?}", iv.shape()))),
        };
        let s = iv.shape();
        let (batch, c_in, h, w) = if batched {
            (s[0], s[1], s[2], s[3])
        } else {
            (1, s[0], s[1], s[2])
        };
        let ks = kv.shape();
        if kv.rank() != 4 || ks[1] != c_in {
            return Err(AtentError::shape(
                "conv2d",
                format!("input {:?} vs kernels {:?}", s, ks),
            ));
        }
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(AtentError::shape(
                "conv2d",
                format!("degenerate output for {h}x{w} input, {kh}x{kw} kernel, stride {stride}, padding {padding}"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let cols = im2col(iv.data(), &geom);
        let (patch, pos) = (geom.patch(), geom.positions());
        let mut out = vec![0.0; batch * c_out * pos];
        for n in 0..batch {
            gemm(
                c_out,
                patch,
                pos,
                kv.data(),
                false,
                &cols[n * patch * pos..(n + 1) * patch * pos],
                false,
                &mut out[n * c_out * pos..(n + 1) * c_out * pos],
                false,
            );
        }
        let shape = if batched {
            vec![batch, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        let value = Tensor::from_parts_unchecked(shape, out).ensure_finite("conv2d")?;
        let ng = self.needs(input) || self.needs(kernels);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel: kernels,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Non-overlapping `size×size` max pooling over the trailing two axes of
    /// an `n×c×h×w` tensor (remainder rows/columns are dropped).
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        if xv.rank() != 4 || size == 0 || xv.shape()[2] < size || xv.shape()[3] < size {
            return Err(AtentError::shape(
                "max_pool2d",
                format!("{:?} with window {size}", xv.shape()),
            ));
        }
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let data = xv.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![s[0], s[1], oh, ow], out);
        let ng = self.needs(x);
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }, ng))
    }

    /// Cross-entropy of row-wise softmax against one-hot `labels`, using the
    /// max-shift for stability. `Mean` averages over rows, `Sum` adds the
    /// per-row losses.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &Tensor,
        reduction: Reduction,
    ) -> Result<Var> {
        self.check_open()?;
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape() != labels.shape() {
            return Err(AtentError::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs labels {:?}", lv.shape(), labels.shape()),
            ));
        }
        validate_one_hot(labels)?;
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![0.0; n * m];
        let mut total = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let shift = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (v - shift).exp();
                z += *p;
            }
            let log_z = z.ln();
            for (j, p) in probs[i * m..(i + 1) * m].iter_mut().enumerate() {
                *p /= z;
                let y = labels.data()[i * m + j];
                if y != 0.0 {
                    total -= y * (row[j] - shift - log_z);
                }
            }
        }
        if reduction == Reduction::Mean {
            total /= n as f64;
        }
        let value = Tensor::scalar(total).ensure_finite("softmax_cross_entropy")?;
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.clone(),
                probs: Tensor::from_parts_unchecked(vec![n, m], probs),
                reduction,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `root`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.check_open()?;
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(AtentError::NonScalarRoot(root_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                        accumulate(&mut grads, *a, Tensor::from_parts_unchecked(vec![m, k], da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(vec![k, n], db));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let m = self.value(*b).len();
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(shape, db));
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if self.needs(*b) {
                        let s = node.value.shape();
                        let (c, plane) = (s[1], s[2] * s[3]);
                        let mut db = vec![0.0; c];
                        for (i, chunk) in g.data().chunks(plane).enumerate() {
                            db[i % c] += chunk.iter().sum::<f64>();
                        }
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::from_parts_unchecked(shape, db));
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = g.zip_map(self.value(*b), |gg, bb| gg * bb)?;
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = g.zip_map(self.value(*a), |gg, aa| gg * aa)?;
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |gg, xx| if xx > 0.0 { gg } else { 0.0 })?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&shape, g.item()));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.into_reshaped(&shape)?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                    cols,
                } => {
                    let (patch, pos) = (geom.patch(), geom.positions());
                    let c_out = geom.c_out;
                    if self.needs(*kernel) {
                        let mut dk = vec![0.0; c_out * patch];
                        for n in 0..geom.batch {
                            gemm(
                                c_out,
                                pos,
                                patch,
                                &g.data()[n * c_out * pos..(n + 1) * c_out * pos],
                                false,
                                &cols[n * patch * pos..(n + 1) * patch * pos],
                                true,
                                &mut dk,
                                true,
                            );
                        }
                        let shape = self.value(*kernel).shape().to_vec();
                        accumulate(&mut grads, *kernel, Tensor::from_parts_unchecked(shape, dk));
                    }
                    if self.needs(*input) {
                        let kv = self.value(*kernel);
                        let mut dcols = vec![0.0; patch * pos];
                        let mut dx = vec![0.0; geom.batch * geom.c_in * geom.h * geom.w];
                        let img = geom.c_in * geom.h * geom.w;
                        for n in 0..geom.batch {
                            gemm(
                                patch,
                                c_out,
                                pos,
                                kv.data(),
                                true,
                                &g.data()[n * c_out * pos..(n + 1) * c_out * pos],
                                false,
                                &mut dcols,
                                false,
                            );
                            col2im(&dcols, geom, &mut dx[n * img..(n + 1) * img]);
                        }
                        let shape = self.value(*input).shape().to_vec();
                        accumulate(&mut grads, *input, Tensor::from_parts_unchecked(shape, dx));
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let shape = self.value(*input).shape().to_vec();
                    let mut dx = Tensor::zeros(&shape);
                    let dd = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dd[src] += gv;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    let n = probs.shape()[0];
                    let scale = match reduction {
                        Reduction::Mean => g.item() / n as f64,
                        Reduction::Sum => g.item(),
                    };
                    let d = probs.zip_map(labels, |p, y| (p - y) * scale)?;
                    accumulate(&mut grads, *logits, d);
                }
            }
        }

        // Trainable leaves the root never reached get an explicit zero.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(AtentError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Rows must be one-hot: entries in {0, 1} summing to exactly one.
pub fn validate_one_hot(labels: &Tensor) -> Result<()> {
    if labels.rank() != 2 {
        return Err(AtentError::InvalidLabels(format!(
            "expected n×m labels, got {:?}",
            labels.shape()
        )));
    }
    for i in 0..labels.rows() {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(AtentError::InvalidLabels(format!(
                "row {i} is not one-hot: {row:?}"
            )));
        }
    }
    Ok(())
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![0.0; g.batch * patch * pos];
    let img = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        let src = &input[n * img..(n + 1) * img];
        let dst = &mut cols[n * patch * pos..(n + 1) * patch * pos];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let out_row = &mut dst[row * pos..(row + 1) * pos];
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ky) as isize - g.padding as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let x = (ox * g.stride + kx) as isize - g.padding as isize;
                            if x < 0 || x >= g.w as isize {
                                continue;
                            }
                            out_row[oy * g.ow + ox] =
                                src[(c * g.h + y as usize) * g.w + x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let pos = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * pos..(row + 1) * pos];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        dst[(c * g.h + y as usize) * g.w + x as usize] += src_row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}
