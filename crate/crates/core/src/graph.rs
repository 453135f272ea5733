//! Reverse-mode autodiff over a define-by-run graph.
//!
//! Each operation evaluates eagerly and records what backward needs. The
//! node list is the topological order, so [`Graph::backward`] is a single
//! reverse sweep. A graph instance is confined to one thread; individual
//! ops parallelize internally over output planes with deterministic
//! writes (every worker owns a disjoint output slice, reductions stay
//! sequential), so identical inputs give bit-identical results.
//!
//! Gradients accumulate into per-node buffers. `backward` may be called
//! once per graph; call [`Graph::zero_grad`] to reset before reusing the
//! recorded nodes. Double-backward is not supported.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    /// Stride-1 cross-correlation with odd square kernel and same padding.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    /// Stride-2 transposed convolution with a 3x3 kernel; output is 2H x 2W.
    ConvTranspose2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: S,
    },
    AddConst {
        input: NodeId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Registers an input tensor. It participates in gradients iff
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> NodeId {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Registers a constant input (no gradient regardless of the flag).
    pub fn constant(&mut self, tensor: Tensor<S>) -> NodeId {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.value(id).shape().to_vec(), g.clone())
                .expect("gradient buffer matches node shape")
        })
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Same-padding stride-1 convolution (cross-correlation) plus bias.
    ///
    /// `input` is `N x C_in x H x W`, `kernel` is `C_out x C_in x K x K`
    /// with odd `K`, `bias` is `C_out`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, kc_in, kh, kw) = self.value(kernel).dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be odd and square, got {kh}x{kw}"
            )));
        }
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![S::zero(); n * c_out * h * w];
        conv2d_same(
            self.value(input).data(),
            n,
            c_in,
            h,
            w,
            self.value(kernel).data(),
            c_out,
            kh,
            Some(self.value(bias).data()),
            &mut out,
        );
        let value = Tensor::new(vec![n, c_out, h, w], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    /// Stride-2 transposed convolution with 3x3 kernel; maps `H x W` to
    /// `2H x 2W`. `kernel` is `C_out x C_in x 3 x 3`.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, kc_in, kh, kw) = self.value(kernel).dims4()?;
        if (kh, kw) != (3, 3) {
            return Err(Error::Shape(format!(
                "transposed conv kernel must be 3x3, got {kh}x{kw}"
            )));
        }
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "transposed conv kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::Shape(format!(
                "transposed conv bias must have shape [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![S::zero(); n * c_out * 2 * h * 2 * w];
        conv_transpose2d_s2(
            self.value(input).data(),
            n,
            c_in,
            h,
            w,
            self.value(kernel).data(),
            c_out,
            Some(self.value(bias).data()),
            &mut out,
        );
        let value = Tensor::new(vec![n, c_out, 2 * h, 2 * w], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    /// Non-overlapping 2x2 max pooling. Requires even H and W. The
    /// backward pass routes gradient to the argmax position of each
    /// window (first in row-major order on ties).
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let (value, argmax) = maxpool2x2_with_indices(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, needs))
    }

    /// Concatenates along the channel axis; batch and spatial dims must match.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels needs matching batch/spatial dims, got {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for batch in 0..na {
            out.extend_from_slice(&da[batch * ca * plane..(batch + 1) * ca * plane]);
            out.extend_from_slice(&db[batch * cb * plane..(batch + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatChannels { a, b }, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v.max(S::zero()))
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    /// Elementwise logistic function; outputs are clamped into the open
    /// interval (0, 1) so downstream ratios stay well defined.
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&v| sigmoid_scalar(v))
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid { input }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise(a, b, "div", |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div { a, b }, needs))
    }

    /// Sum of all elements, as a shape `[1]` scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: S = self.value(input).data().iter().copied().sum();
        let value = Tensor::new(vec![1], vec![total]).unwrap();
        let needs = self.needs(input);
        self.push(value, Op::Sum { input }, needs)
    }

    pub fn scale(&mut self, input: NodeId, factor: S) -> NodeId {
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v * factor)
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    pub fn add_const(&mut self, input: NodeId, offset: S) -> NodeId {
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v + offset)
            .collect();
        let value = Tensor::new(self.value(input).shape().to_vec(), data).unwrap();
        let needs = self.needs(input);
        self.push(value, Op::AddConst { input }, needs)
    }

    fn elementwise(
        &self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name} needs equal shapes, got {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Runs the reverse sweep from a scalar loss node, filling gradients
    /// for every node that (transitively) requires them. Errors if the
    /// loss is not scalar or if gradients from a previous sweep are still
    /// present.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }

        // Untouched trainable leaves still get a (zero) gradient so the
        // optimizer sees one buffer per parameter.
        for i in 0..self.nodes.len() {
            if self.nodes[i].needs_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![S::zero(); self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: &[S]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, index: usize, grad: &[S]) {
        match &self.nodes[index].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (n, c_in, h, w) = self.value(input).dims4().unwrap();
                let (c_out, _, k, _) = self.value(kernel).dims4().unwrap();
                if self.needs(input) {
                    let d_in =
                        conv2d_dinput(grad, n, c_out, h, w, self.value(kernel).data(), c_in, k);
                    self.accumulate(input, &d_in);
                }
                if self.needs(kernel) {
                    let d_k =
                        conv2d_kernel_grad(self.value(input).data(), n, c_in, h, w, grad, c_out, k);
                    self.accumulate(kernel, &d_k);
                }
                if self.needs(bias) {
                    let d_b = channel_sums(grad, n, c_out, h * w);
                    self.accumulate(bias, &d_b);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (n, c_in, h, w) = self.value(input).dims4().unwrap();
                let (c_out, _, _, _) = self.value(kernel).dims4().unwrap();
                if self.needs(input) {
                    // Adjoint: dX is the stride-2 forward convolution of dY
                    // with the same kernel.
                    let d_in = conv_s2_gather(
                        grad,
                        n,
                        c_out,
                        2 * h,
                        2 * w,
                        self.value(kernel).data(),
                        c_in,
                    );
                    self.accumulate(input, &d_in);
                }
                if self.needs(kernel) {
                    let d_k = conv_transpose2d_kernel_grad(
                        self.value(input).data(),
                        n,
                        c_in,
                        h,
                        w,
                        grad,
                        c_out,
                    );
                    self.accumulate(kernel, &d_k);
                }
                if self.needs(bias) {
                    let d_b = channel_sums(grad, n, c_out, 4 * h * w);
                    self.accumulate(bias, &d_b);
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let input = *input;
                if self.needs(input) {
                    let mut d_in = vec![S::zero(); self.value(input).numel()];
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        d_in[src] += grad[out_idx];
                    }
                    self.accumulate(input, &d_in);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.value(a).dims4().unwrap();
                let (_, cb, _, _) = self.value(b).dims4().unwrap();
                let plane = h * w;
                if self.needs(a) {
                    let mut d_a = vec![S::zero(); n * ca * plane];
                    for batch in 0..n {
                        let src = batch * (ca + cb) * plane;
                        d_a[batch * ca * plane..(batch + 1) * ca * plane]
                            .copy_from_slice(&grad[src..src + ca * plane]);
                    }
                    self.accumulate(a, &d_a);
                }
                if self.needs(b) {
                    let mut d_b = vec![S::zero(); n * cb * plane];
                    for batch in 0..n {
                        let src = batch * (ca + cb) * plane + ca * plane;
                        d_b[batch * cb * plane..(batch + 1) * cb * plane]
                            .copy_from_slice(&grad[src..src + cb * plane]);
                    }
                    self.accumulate(b, &d_b);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.needs(input) {
                    let d_in: Vec<S> = self
                        .value(input)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                        .collect();
                    self.accumulate(input, &d_in);
                }
            }
            Op::Sigmoid { input } => {
                let input = *input;
                if self.needs(input) {
                    let d_in: Vec<S> = self.nodes[index]
                        .value
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g * y * (S::one() - y))
                        .collect();
                    self.accumulate(input, &d_in);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(a, grad);
                }
                if self.needs(b) {
                    self.accumulate(b, grad);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d_a: Vec<S> = self
                        .value(b)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g * y)
                        .collect();
                    self.accumulate(a, &d_a);
                }
                if self.needs(b) {
                    let d_b: Vec<S> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&x, &g)| g * x)
                        .collect();
                    self.accumulate(b, &d_b);
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d_a: Vec<S> = self
                        .value(b)
                        .data()
                        .iter()
                        .zip(grad)
                        .map(|(&y, &g)| g / y)
                        .collect();
                    self.accumulate(a, &d_a);
                }
                if self.needs(b) {
                    let d_b: Vec<S> = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .zip(grad)
                        .map(|((&x, &y), &g)| -g * x / (y * y))
                        .collect();
                    self.accumulate(b, &d_b);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let d_in = vec![grad[0]; self.value(input).numel()];
                    self.accumulate(input, &d_in);
                }
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                if self.needs(input) {
                    let d_in: Vec<S> = grad.iter().map(|&g| g * factor).collect();
                    self.accumulate(input, &d_in);
                }
            }
            Op::AddConst { input } => {
                let input = *input;
                if self.needs(input) {
                    self.accumulate(input, grad);
                }
            }
        }
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    y.max(S::min_positive()).min(S::one_minus_epsilon())
}

/// 2x2 max pooling as a pure function, also returning the flat input
/// index of each window's maximum (ties resolved to the first element in
/// row-major order).
pub fn maxpool2x2_with_indices<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Unrolls same-padding convolution patches: row `(ci, ky, kx)` of the
/// result holds the input plane `ci` shifted by the tap offset, zero
/// outside the frame. Output is `(c_in k^2) x (h w)`, row-major.
fn im2col<S: Scalar>(input: &[S], c_in: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![S::zero(); c_in * k * k * hw];
    for ci in 0..c_in {
        let plane = &input[ci * hw..][..hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let src_off = ((y as isize + dy) as usize) * w;
                    row[y * w + x0..y * w + x1].copy_from_slice(
                        &plane[src_off + ((x0 as isize + dx) as usize)
                            ..src_off + ((x1 as isize + dx) as usize)],
                    );
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into a plane stack.
fn col2im<S: Scalar>(col: &[S], c_in: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![S::zero(); c_in * hw];
    for ci in 0..c_in {
        let plane = &mut out[ci * hw..][..hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let dst_off = ((y as isize + dy) as usize) * w;
                    let dst = &mut plane[dst_off + ((x0 as isize + dx) as usize)
                        ..dst_off + ((x1 as isize + dx) as usize)];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    out
}

/// Same-padding stride-1 convolution via im2col + GEMM:
/// `out[n, co] = bias[co] + sum_ci kernel[co, ci] * input[n, ci]`.
fn conv2d_same<S: Scalar>(
    input: &[S],
    _n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[S],
    c_out: usize,
    k: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let hw = h * w;
    let col_rows = c_in * k * k;
    out.par_chunks_mut(c_out * hw)
        .enumerate()
        .for_each(|(batch, out_n)| {
            let input_n = &input[batch * c_in * hw..][..c_in * hw];
            if let Some(b) = bias {
                for co in 0..c_out {
                    out_n[co * hw..(co + 1) * hw].fill(b[co]);
                }
            }
            // 1x1 kernels need no unrolling: the input is already the matrix.
            let col_storage;
            let col: &[S] = if k == 1 {
                input_n
            } else {
                col_storage = im2col(input_n, c_in, h, w, k);
                &col_storage
            };
            S::gemm(
                c_out,
                col_rows,
                hw,
                S::one(),
                kernel,
                col_rows as isize,
                1,
                col,
                hw as isize,
                1,
                S::one(),
                out_n,
                hw as isize,
                1,
            );
        });
}

/// dX for the same-padding conv: `kernel^T (as (ci k^2) x co) * dY`,
/// folded back with col2im.
fn conv2d_dinput<S: Scalar>(
    d_out: &[S],
    n: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kernel: &[S],
    c_in: usize,
    k: usize,
) -> Vec<S> {
    let hw = h * w;
    let col_rows = c_in * k * k;
    // kernel is (c_out, c_in k^2) row-major; its transpose comes for free
    // through strides.
    let mut d_in = vec![S::zero(); n * c_in * hw];
    d_in.par_chunks_mut(c_in * hw)
        .enumerate()
        .for_each(|(batch, d_in_n)| {
            let g_n = &d_out[batch * c_out * hw..][..c_out * hw];
            if k == 1 {
                S::gemm(
                    c_in,
                    c_out,
                    hw,
                    S::one(),
                    kernel,
                    1,
                    col_rows as isize,
                    g_n,
                    hw as isize,
                    1,
                    S::zero(),
                    d_in_n,
                    hw as isize,
                    1,
                );
            } else {
                let mut col_grad = vec![S::zero(); col_rows * hw];
                S::gemm(
                    col_rows,
                    c_out,
                    hw,
                    S::one(),
                    kernel,
                    1,
                    col_rows as isize,
                    g_n,
                    hw as isize,
                    1,
                    S::zero(),
                    &mut col_grad,
                    hw as isize,
                    1,
                );
                d_in_n.copy_from_slice(&col2im(&col_grad, c_in, h, w, k));
            }
        });
    d_in
}

/// dK for the same-padding conv: `dY * im2col(X)^T`, accumulated over the
/// batch.
fn conv2d_kernel_grad<S: Scalar>(
    input: &[S],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    d_out: &[S],
    c_out: usize,
    k: usize,
) -> Vec<S> {
    let hw = h * w;
    let col_rows = c_in * k * k;
    let mut d_k = vec![S::zero(); c_out * col_rows];
    for batch in 0..n {
        let input_n = &input[batch * c_in * hw..][..c_in * hw];
        let g_n = &d_out[batch * c_out * hw..][..c_out * hw];
        let col_storage;
        let col: &[S] = if k == 1 {
            input_n
        } else {
            col_storage = im2col(input_n, c_in, h, w, k);
            &col_storage
        };
        // b transposed via strides: col^T is (hw, col_rows)
        S::gemm(
            c_out,
            hw,
            col_rows,
            S::one(),
            g_n,
            hw as isize,
            1,
            col,
            1,
            hw as isize,
            S::one(),
            &mut d_k,
            col_rows as isize,
            1,
        );
    }
    d_k
}

/// Per-channel sums of a `N x C x plane` buffer (bias gradients).
fn channel_sums<S: Scalar>(data: &[S], n: usize, c: usize, plane: usize) -> Vec<S> {
    let mut sums = vec![S::zero(); c];
    for batch in 0..n {
        for (ch, sum) in sums.iter_mut().enumerate() {
            let start = (batch * c + ch) * plane;
            *sum += data[start..start + plane].iter().copied().sum();
        }
    }
    sums
}

/// Strided patch gather for the stride-2 transposed conv: row `(c, ky, kx)`
/// of the result holds `src[c, 2i + ky - 1, 2j + kx - 1]` over the
/// low-resolution grid `(i, j)`, zero off-frame. `src` is `c x 2h x 2w`,
/// output `(c * 9) x (h w)`.
fn im2col_s2<S: Scalar>(src: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (sh, sw) = (2 * h, 2 * w);
    let hw = h * w;
    let mut col = vec![S::zero(); c * 9 * hw];
    for cs in 0..c {
        let plane = &src[cs * sh * sw..][..sh * sw];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &mut col[(cs * 9 + (ky * 3 + kx) as usize) * hw..][..hw];
                for i in 0..h {
                    let y = 2 * i as isize + ky - 1;
                    if y < 0 || y as usize >= sh {
                        continue;
                    }
                    let src_row = &plane[(y as usize) * sw..][..sw];
                    let dst_row = &mut row[i * w..(i + 1) * w];
                    for (j, d) in dst_row.iter_mut().enumerate() {
                        let x = 2 * j as isize + kx - 1;
                        if x >= 0 && (x as usize) < sw {
                            *d = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_s2`]: scatter-adds rows into the `c x 2h x 2w` plane
/// stack (which the caller may have pre-filled, e.g. with a bias).
fn col2im_s2<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, out: &mut [S]) {
    let (sh, sw) = (2 * h, 2 * w);
    let hw = h * w;
    for cs in 0..c {
        let plane = &mut out[cs * sh * sw..][..sh * sw];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = &col[(cs * 9 + (ky * 3 + kx) as usize) * hw..][..hw];
                for i in 0..h {
                    let y = 2 * i as isize + ky - 1;
                    if y < 0 || y as usize >= sh {
                        continue;
                    }
                    let dst_row = &mut plane[(y as usize) * sw..][..sw];
                    for (j, &s) in row[i * w..(i + 1) * w].iter().enumerate() {
                        let x = 2 * j as isize + kx - 1;
                        if x >= 0 && (x as usize) < sw {
                            dst_row[x as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Reshapes the `c_out x c_in x 3 x 3` kernel into the `(c_out * 9) x c_in`
/// matrix the transposed-conv GEMMs use.
fn transpose_kernel_matrix<S: Scalar>(kernel: &[S], c_out: usize, c_in: usize) -> Vec<S> {
    let mut resh = vec![S::zero(); c_out * 9 * c_in];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..9 {
                resh[(co * 9 + t) * c_in + ci] = kernel[(co * c_in + ci) * 9 + t];
            }
        }
    }
    resh
}

/// Stride-2 transposed conv: `out = col2im_s2(K_resh * x) + bias`, mapping
/// `H x W` to `2H x 2W`.
fn conv_transpose2d_s2<S: Scalar>(
    input: &[S],
    _n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[S],
    c_out: usize,
    bias: Option<&[S]>,
    out: &mut [S],
) {
    let hw = h * w;
    let big = 4 * hw;
    let resh = transpose_kernel_matrix(kernel, c_out, c_in);
    out.par_chunks_mut(c_out * big)
        .enumerate()
        .for_each(|(batch, out_n)| {
            let input_n = &input[batch * c_in * hw..][..c_in * hw];
            if let Some(b) = bias {
                for co in 0..c_out {
                    out_n[co * big..(co + 1) * big].fill(b[co]);
                }
            }
            let mut wcol = vec![S::zero(); c_out * 9 * hw];
            S::gemm(
                c_out * 9,
                c_in,
                hw,
                S::one(),
                &resh,
                c_in as isize,
                1,
                input_n,
                hw as isize,
                1,
                S::zero(),
                &mut wcol,
                hw as isize,
                1,
            );
            col2im_s2(&wcol, c_out, h, w, out_n);
        });
}

/// dX of the transposed conv: the stride-2 forward convolution of dY with
/// the same kernel (adjointness), via im2col_s2 + GEMM.
fn conv_s2_gather<S: Scalar>(
    src: &[S],
    n: usize,
    c_src: usize,
    sh: usize,
    sw: usize,
    kernel: &[S],
    c_dst: usize,
) -> Vec<S> {
    let (h, w) = (sh / 2, sw / 2);
    let hw = h * w;
    let resh = transpose_kernel_matrix(kernel, c_src, c_dst);
    let mut out = vec![S::zero(); n * c_dst * hw];
    out.par_chunks_mut(c_dst * hw)
        .enumerate()
        .for_each(|(batch, out_n)| {
            let src_n = &src[batch * c_src * sh * sw..][..c_src * sh * sw];
            let col = im2col_s2(src_n, c_src, h, w);
            // resh^T is (c_dst, c_src * 9), transposed through strides
            S::gemm(
                c_dst,
                c_src * 9,
                hw,
                S::one(),
                &resh,
                1,
                c_dst as isize,
                &col,
                hw as isize,
                1,
                S::zero(),
                out_n,
                hw as isize,
                1,
            );
        });
    out
}

/// dK for the stride-2 transposed conv: `im2col_s2(dY) * x^T`, accumulated
/// over the batch and folded back into kernel layout.
fn conv_transpose2d_kernel_grad<S: Scalar>(
    input: &[S],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    d_out: &[S],
    c_out: usize,
) -> Vec<S> {
    let hw = h * w;
    let mut d_resh = vec![S::zero(); c_out * 9 * c_in];
    for batch in 0..n {
        let input_n = &input[batch * c_in * hw..][..c_in * hw];
        let g_n = &d_out[batch * c_out * 4 * hw..][..c_out * 4 * hw];
        let col = im2col_s2(g_n, c_out, h, w);
        S::gemm(
            c_out * 9,
            hw,
            c_in,
            S::one(),
            &col,
            hw as isize,
            1,
            input_n,
            1,
            hw as isize,
            S::one(),
            &mut d_resh,
            c_in as isize,
            1,
        );
    }
    let mut d_k = vec![S::zero(); c_out * c_in * 9];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..9 {
                d_k[(co * c_in + ci) * 9 + t] = d_resh[(co * 9 + t) * c_in + ci];
            }
        }
    }
    d_k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    /// Naive quadruple-loop same-padding conv, independent of the
    /// production loop order.
    fn naive_conv2d(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
        let (n, c_in, h, w) = input.dims4().unwrap();
        let (c_out, _, k, _) = kernel.dims4().unwrap();
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; n * c_out * h * w];
        for b in 0..n {
            for co in 0..c_out {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for ky in 0..k as isize {
                                for kx in 0..k as isize {
                                    let iy = y + ky - pad;
                                    let ix = x + kx - pad;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()
                                        [((b * c_in + ci) * h + iy as usize) * w + ix as usize]
                                        * kernel.data()[((co * c_in + ci) * k + ky as usize) * k
                                            + kx as usize];
                                }
                            }
                        }
                        out[((b * c_out + co) * h + y as usize) * w + x as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_vec(len: usize, seed: &mut u64) -> Vec<f64> {
        (0..len).map(|_| lcg(seed)).collect()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(
            vec![1, 1, 4, 5],
            (0..20).map(|v| v as f64).collect(),
        ));
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let kid = g.leaf(tensor(vec![1, 1, 3, 3], k));
        let b = g.leaf(tensor(vec![1], vec![0.0]));
        let y = g.conv2d(x, kid, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_ones_kernel_gives_9c_in_the_interior() {
        let mut g = Graph::<f64>::new();
        let c = 2.5;
        let x = g.leaf(Tensor::full(vec![1, 1, 6, 6], c));
        let kid = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.leaf(tensor(vec![1], vec![0.0]));
        let y = g.conv2d(x, kid, b).unwrap();
        // interior pixel (2,3)
        assert!((g.value(y).data()[2 * 6 + 3] - 9.0 * c).abs() < 1e-12);
        // corner touches only 4 taps
        assert!((g.value(y).data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        let mut seed = 7u64;
        let x = tensor(vec![1, 2, 5, 5], random_vec(50, &mut seed));
        let k = tensor(vec![3, 2, 3, 3], random_vec(54, &mut seed));
        let bias = random_vec(3, &mut seed);
        let expected = naive_conv2d(&x, &k, &bias);

        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x);
        let kid = g.leaf(k);
        let bid = g.leaf(tensor(vec![3], bias));
        let y = g.conv2d(xid, kid, bid).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            let rel = (a - e).abs() / e.abs().max(1.0);
            assert!(rel < 1e-5, "conv mismatch: {a} vs {e}");
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let k = g.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_1x1_channel_identity_and_sum() {
        // identity matrix over channels -> output equals input
        let mut g = Graph::<f64>::new();
        let mut seed = 3u64;
        let x = tensor(vec![1, 2, 3, 3], random_vec(18, &mut seed));
        let xid = g.leaf(x.clone());
        let k = tensor(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let kid = g.leaf(k);
        let b = g.leaf(Tensor::zeros(vec![2]));
        let y = g.conv2d(xid, kid, b).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        // weights (1,1) -> per-pixel channel sum
        let kid2 = g.leaf(tensor(vec![1, 2, 1, 1], vec![1.0, 1.0]));
        let b2 = g.leaf(Tensor::zeros(vec![1]));
        let s = g.conv2d(xid, kid2, b2).unwrap();
        for p in 0..9 {
            let expect = x.data()[p] + x.data()[9 + p];
            assert!((g.value(s).data()[p] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.leaf(Tensor::full(vec![1, 1, 4, 4], 7.0));
        let yc = g.maxpool2x2(c).unwrap();
        assert_eq!(g.value(yc).shape(), &[1, 1, 2, 2]);
        assert!(g.value(yc).data().iter().all(|&v| v == 7.0));

        let odd = g.leaf(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(g.maxpool2x2(odd).is_err());
    }

    #[test]
    fn maxpool_matches_per_window_scan_oracle() {
        let mut seed = 11u64;
        let x = tensor(vec![1, 1, 8, 10], random_vec(80, &mut seed));
        let (pooled, argmax) = maxpool2x2_with_indices(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..5 {
                let mut best = f64::NEG_INFINITY;
                for wy in 0..2 {
                    for wx in 0..2 {
                        best = best.max(x.data()[(2 * oy + wy) * 10 + 2 * ox + wx]);
                    }
                }
                assert_eq!(pooled.data()[oy * 5 + ox], best);
            }
        }
        // argmax indices point at the max values
        for (o, &src) in argmax.iter().enumerate() {
            assert_eq!(x.data()[src], pooled.data()[o]);
        }
    }

    #[test]
    fn maxpool_tie_takes_first_in_row_major_order() {
        let x = tensor(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let (_, argmax) = maxpool2x2_with_indices(&x).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass_at_argmax_only() {
        let mut g = Graph::<f64>::new();
        let mut seed = 13u64;
        let x = g.leaf(tensor(vec![1, 1, 4, 4], random_vec(16, &mut seed)).with_requires_grad());
        let y = g.maxpool2x2(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        let nonzero = grad.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 4); // one per window
        assert!((grad.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_conv_scatter_example() {
        // 1x1 input v with all-ones kernel: output 2x2, all taps carry v.
        let mut g = Graph::<f64>::new();
        let v = 3.0;
        let x = g.leaf(tensor(vec![1, 1, 1, 1], vec![v]));
        let k = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv_transpose2d(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&o| (o - v).abs() < 1e-12));
    }

    #[test]
    fn transposed_conv_zero_input_gives_zero_output() {
        let mut g = Graph::<f64>::new();
        let mut seed = 17u64;
        let x = g.leaf(Tensor::zeros(vec![1, 2, 3, 3]));
        let k = g.leaf(tensor(vec![1, 2, 3, 3], random_vec(18, &mut seed)));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = g.conv_transpose2d(x, k, b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    /// Naive stride-2 3x3 gather conv (padding 1), independent of the
    /// GEMM-backed production path.
    fn naive_conv_s2(
        src: &[f64],
        c_src: usize,
        sh: usize,
        sw: usize,
        kernel: &[f64],
        c_dst: usize,
    ) -> Vec<f64> {
        let (h, w) = (sh / 2, sw / 2);
        let mut out = vec![0.0; c_dst * h * w];
        for ci in 0..c_dst {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for cs in 0..c_src {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let y = 2 * i + ky - 1;
                                let x = 2 * j + kx - 1;
                                if y < 0 || y >= sh as isize || x < 0 || x >= sw as isize {
                                    continue;
                                }
                                acc += src[(cs * sh + y as usize) * sw + x as usize]
                                    * kernel
                                        [((cs * c_dst + ci) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    out[(ci * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn transposed_conv_is_adjoint_of_stride2_conv() {
        // <convT(x), y> == <x, conv_s2(y)> for random x, y, kernel.
        let mut seed = 23u64;
        let (c_in, c_out, h, w) = (2, 3, 4, 5);
        let x = tensor(vec![1, c_in, h, w], random_vec(c_in * h * w, &mut seed));
        let k = tensor(
            vec![c_out, c_in, 3, 3],
            random_vec(c_out * c_in * 9, &mut seed),
        );
        let y = random_vec(c_out * 2 * h * 2 * w, &mut seed);

        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x.clone());
        let kid = g.leaf(k.clone());
        let bid = g.leaf(Tensor::zeros(vec![c_out]));
        let fwd = g.conv_transpose2d(xid, kid, bid).unwrap();
        let lhs: f64 = g.value(fwd).data().iter().zip(&y).map(|(a, b)| a * b).sum();

        // The kernel is stored C_out x C_in; the adjoint maps the C_out
        // channels of y back to C_in, so the naive oracle swaps roles.
        let adj = naive_conv_s2(&y, c_out, 2 * h, 2 * w, k.data(), c_in);
        let rhs: f64 = x.data().iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-5,
            "adjointness broken: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn concat_channels_layout_and_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(vec![1, 2, 2, 2], 1.0).with_requires_grad());
        let b = g.leaf(Tensor::full(vec![1, 3, 2, 2], 2.0));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5, 2, 2]);
        assert!(g.value(y).data()[..8].iter().all(|&v| v == 1.0));
        assert!(g.value(y).data()[8..].iter().all(|&v| v == 2.0));

        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(g.grad(a).unwrap().len(), 8);

        let mismatched = g.leaf(Tensor::zeros(vec![1, 1, 3, 2]));
        assert!(g.concat_channels(a, mismatched).is_err());
    }

    #[test]
    fn concat_with_zeros_preserves_original_channels() {
        let mut seed = 29u64;
        let x = tensor(vec![1, 2, 2, 2], random_vec(8, &mut seed));
        let mut g = Graph::<f64>::new();
        let a = g.leaf(x.clone());
        let z = g.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let y = g.concat_channels(a, z).unwrap();
        assert_eq!(&g.value(y).data()[..8], x.data());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(vec![3], vec![0.0, -3.0, 3.0]));
        let s = g.sigmoid(x);
        assert!((g.value(s).data()[0] - 0.5).abs() < 1e-12);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_matches_finite_difference() {
        let eps = 1e-6;
        let grad_at = |x: f64| {
            let mut g = Graph::<f64>::new();
            let xid = g.leaf(tensor(vec![1], vec![x]).with_requires_grad());
            let s = g.sigmoid(xid);
            let loss = g.sum(s);
            g.backward(loss).unwrap();
            g.grad(xid).unwrap()[0]
        };
        let value_at = |x: f64| sigmoid_scalar(x);
        let analytic = grad_at(0.0);
        assert!((analytic - 0.25).abs() < 1e-12);
        let numeric = (value_at(eps) - value_at(-eps)) / (2.0 * eps);
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_stays_inside_open_unit_interval() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![2], vec![100.0f32, -200.0]).unwrap());
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![2, 3], 4.0).with_requires_grad());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(tensor(vec![2], vec![1.0, 2.0]).with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![3], 1.0).with_requires_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn double_backward_without_reset_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(vec![2], 1.0).with_requires_grad());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        g.zero_grad();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn div_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(tensor(vec![1], vec![3.0]).with_requires_grad());
        let b = g.leaf(tensor(vec![1], vec![2.0]).with_requires_grad());
        let q = g.div(a, b).unwrap();
        assert!((g.value(q).data()[0] - 1.5).abs() < 1e-12);
        g.backward(q).unwrap();
        assert!((g.grad(a).unwrap()[0] - 0.5).abs() < 1e-12); // 1/b
        assert!((g.grad(b).unwrap()[0] + 0.75).abs() < 1e-12); // -a/b^2
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut seed = 31u64;
        let x = tensor(vec![2, 3, 8, 8], random_vec(2 * 3 * 64, &mut seed));
        let k = tensor(vec![4, 3, 3, 3], random_vec(4 * 3 * 9, &mut seed));
        let b = tensor(vec![4], random_vec(4, &mut seed));
        let run = || {
            let mut g = Graph::<f64>::new();
            let xi = g.leaf(x.clone());
            let ki = g.leaf(k.clone());
            let bi = g.leaf(b.clone());
            let y = g.conv2d(xi, ki, bi).unwrap();
            let y = g.relu(y);
            let y = g.maxpool2x2(y).unwrap();
            g.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
