//! Recording tape for one forward pass and its reverse-mode sweep.
//!
//! Each op validates shapes, computes its output eagerly, checks the result
//! for NaN/Inf, and appends a node. `backward` walks the tape in exact
//! reverse record order, accumulating gradients into every node that
//! requires them. A graph is single-use: recording or differentiating after
//! `backward` is an error.

use super::kernels::{col2im_add, im2col_into, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Elem, LabelMap, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<u32>,
    },
    UpsampleBilinear {
        input: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: LabelMap,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sum {
        input: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn ensure_finite(data: &[Elem], op: &'static str) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Half-pixel source mapping for one axis: for each output index, the two
/// source indices and the interpolation fraction toward the second one.
fn axis_map(n_in: usize, n_out: usize) -> Vec<(usize, usize, Elem)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as Elem)
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// The tensor held at `id` (value plus, after `backward`, its gradient).
    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[Elem] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[Elem]> {
        self.nodes[id.0].tensor.grad()
    }

    fn check_open(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tensor.requires_grad())
    }

    /// Moves a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Copies the value at `id` onto the tape as a gradient-stopping leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let t = self.nodes[id.0]
            .tensor
            .leaf_clone()
            .with_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// 2-D cross-correlation with bias. `input` is `[n, c_in, h, w]`,
    /// `weight` `[c_out, c_in, kh, kw]`, `bias` `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_open()?;
        assert!(stride >= 1, "conv2d stride must be positive");
        let (n, c_in, h, w) = self.nodes[input.0].tensor.dims4()?;
        let (c_out, wc_in, kh, kw) = self.nodes[weight.0].tensor.dims4()?;
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        if c_in != wc_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                weight: wc_in,
            });
        }
        let bias_len = self.nodes[bias.0].tensor.numel();
        if self.nodes[bias.0].tensor.shape().len() != 1 || bias_len != c_out {
            return Err(TensorError::BiasMismatch {
                bias: bias_len,
                out_channels: c_out,
            });
        }
        let out_dim = |size: usize, kernel: usize| -> Result<usize, TensorError> {
            let padded = size + 2 * padding;
            if padded < kernel || (padded - kernel) % stride != 0 {
                return Err(TensorError::NonIntegralConvOutput {
                    size,
                    padding,
                    kernel,
                    stride,
                });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let oh = out_dim(h, kh)?;
        let ow = out_dim(w, kw)?;

        let k2 = c_in * kh * kw;
        let x = self.nodes[input.0].tensor.data();
        let wgt = self.nodes[weight.0].tensor.data();
        let b = self.nodes[bias.0].tensor.data();
        let mut out = vec![0.0 as Elem; n * c_out * oh * ow];
        let mut col = vec![0.0 as Elem; k2 * oh * ow];
        for ni in 0..n {
            im2col_into(
                &x[ni * c_in * h * w..(ni + 1) * c_in * h * w],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut col,
            );
            let out_n = &mut out[ni * c_out * oh * ow..(ni + 1) * c_out * oh * ow];
            for co in 0..c_out {
                out_n[co * oh * ow..(co + 1) * oh * ow].fill(b[co]);
            }
            matmul_acc(wgt, &col, out_n, c_out, k2, oh * ow);
        }
        ensure_finite(&out, "conv2d")?;
        let requires = self.any_requires(&[input.0, weight.0, bias.0]);
        let t = Tensor::new(vec![n, c_out, oh, ow], out)?.with_requires_grad(requires);
        Ok(self.push(
            t,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                padding,
            },
        ))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        self.check_open()?;
        let src = &self.nodes[input.0].tensor;
        let out: Vec<Elem> = src.data().iter().map(|&v| v.max(0.0)).collect();
        ensure_finite(&out, "relu")?;
        let requires = src.requires_grad();
        let t = Tensor::new(src.shape().to_vec(), out)?.with_requires_grad(requires);
        Ok(self.push(t, Op::Relu { input: input.0 }))
    }

    /// Non-overlapping `k`x`k` max pooling. Gradient routes to the first
    /// maximal position in row-major window scan order.
    pub fn max_pool2d(&mut self, input: TensorId, k: usize) -> Result<TensorId, TensorError> {
        self.check_open()?;
        assert!(k >= 1, "pool size must be positive");
        let (n, c, h, w) = self.nodes[input.0].tensor.dims4()?;
        if h % k != 0 || w % k != 0 {
            return Err(TensorError::PoolNotDivisible { h, w, k });
        }
        let (oh, ow) = (h / k, w / k);
        let x = self.nodes[input.0].tensor.data();
        let mut out = vec![0.0 as Elem; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Elem::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let row = (oy * k + ky) * w + ox * k;
                        for kx in 0..k {
                            let v = plane[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = (base + best_idx) as u32;
                }
            }
        }
        ensure_finite(&out, "max_pool2d")?;
        let requires = self.nodes[input.0].tensor.requires_grad();
        let t = Tensor::new(vec![n, c, oh, ow], out)?.with_requires_grad(requires);
        Ok(self.push(
            t,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
        ))
    }

    /// Bilinear resize with half-pixel source coordinates clamped to the
    /// input extent. Exact on constants and on identity resizes.
    pub fn upsample_bilinear(
        &mut self,
        input: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId, TensorError> {
        self.check_open()?;
        let (n, c, h, w) = self.nodes[input.0].tensor.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::ZeroUpsample { out_h, out_w });
        }
        if h == 0 || w == 0 {
            return Err(TensorError::EmptyUpsampleInput { h, w });
        }
        let ymap = axis_map(h, out_h);
        let xmap = axis_map(w, out_w);
        let x = self.nodes[input.0].tensor.data();
        let mut out = vec![0.0 as Elem; n * c * out_h * out_w];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            let out_plane = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                let row0 = &plane[y0 * w..(y0 + 1) * w];
                let row1 = &plane[y1 * w..(y1 + 1) * w];
                let dst = &mut out_plane[oy * out_w..(oy + 1) * out_w];
                for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                    // Lerp form keeps constants bit-exact.
                    let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                    let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                    dst[ox] = top + fy * (bot - top);
                }
            }
        }
        ensure_finite(&out, "upsample_bilinear")?;
        let requires = self.nodes[input.0].tensor.requires_grad();
        let t = Tensor::new(vec![n, c, out_h, out_w], out)?.with_requires_grad(requires);
        Ok(self.push(t, Op::UpsampleBilinear { input: input.0 }))
    }

    /// Concatenates along the channel axis: `a` first, then `b`.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_open()?;
        let (na, ca, ha, wa) = self.nodes[a.0].tensor.dims4()?;
        let (nb, cb, hb, wb) = self.nodes[b.0].tensor.dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(TensorError::ConcatMismatch {
                a: self.nodes[a.0].tensor.shape().to_vec(),
                b: self.nodes[b.0].tensor.shape().to_vec(),
            });
        }
        let (xa, xb) = (self.nodes[a.0].tensor.data(), self.nodes[b.0].tensor.data());
        let hw = ha * wa;
        let mut out = vec![0.0 as Elem; na * (ca + cb) * hw];
        for ni in 0..na {
            out[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw]
                .copy_from_slice(&xa[ni * ca * hw..(ni + 1) * ca * hw]);
            out[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw]
                .copy_from_slice(&xb[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let requires = self.any_requires(&[a.0, b.0]);
        let t = Tensor::new(vec![na, ca + cb, ha, wa], out)?.with_requires_grad(requires);
        Ok(self.push(t, Op::ConcatChannels { a: a.0, b: b.0 }))
    }

    /// Mean per-pixel softmax cross-entropy. `logits` is `[n, k, h, w]`,
    /// `labels` `[n, h, w]` with class ids below `k`. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &LabelMap,
    ) -> Result<TensorId, TensorError> {
        self.check_open()?;
        let (n, k, h, w) = self.nodes[logits.0].tensor.dims4()?;
        if labels.shape() != [n, h, w] {
            return Err(TensorError::LabelShapeMismatch {
                labels: labels.shape().to_vec(),
                logits: self.nodes[logits.0].tensor.shape().to_vec(),
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyBatch);
        }
        for &l in labels.data() {
            if usize::from(l) >= k {
                return Err(TensorError::LabelOutOfRange {
                    label: usize::from(l),
                    classes: k,
                });
            }
        }
        let x = self.nodes[logits.0].tensor.data();
        let hw = h * w;
        let plane = k * hw;
        let mut acc = 0.0f64;
        for ni in 0..n {
            for p in 0..hw {
                let base = ni * plane + p;
                let mut m = Elem::NEG_INFINITY;
                for ki in 0..k {
                    m = m.max(x[base + ki * hw]);
                }
                let mut sum_exp = 0.0 as Elem;
                for ki in 0..k {
                    sum_exp += (x[base + ki * hw] - m).exp();
                }
                let label = usize::from(labels.data()[ni * hw + p]);
                acc += f64::from(sum_exp.ln() - (x[base + label * hw] - m));
            }
        }
        let loss = (acc / (n * hw) as f64) as Elem;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let requires = self.nodes[logits.0].tensor.requires_grad();
        let t = Tensor::new(vec![1], vec![loss])?.with_requires_grad(requires);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.clone(),
            },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_open()?;
        if self.nodes[a.0].tensor.shape() != self.nodes[b.0].tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                a: self.nodes[a.0].tensor.shape().to_vec(),
                b: self.nodes[b.0].tensor.shape().to_vec(),
            });
        }
        let out: Vec<Elem> = self.nodes[a.0]
            .tensor
            .data()
            .iter()
            .zip(self.nodes[b.0].tensor.data())
            .map(|(x, y)| x + y)
            .collect();
        ensure_finite(&out, "add")?;
        let requires = self.any_requires(&[a.0, b.0]);
        let t =
            Tensor::new(self.nodes[a.0].tensor.shape().to_vec(), out)?.with_requires_grad(requires);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }))
    }

    /// Sums all elements to a scalar.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        self.check_open()?;
        let mut acc = 0.0f64;
        for &v in self.nodes[input.0].tensor.data() {
            acc += f64::from(v);
        }
        let s = acc as Elem;
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "sum" });
        }
        let requires = self.nodes[input.0].tensor.requires_grad();
        let t = Tensor::new(vec![1], vec![s])?.with_requires_grad(requires);
        Ok(self.push(t, Op::Sum { input: input.0 }))
    }

    /// Inner product of two same-shape tensors; the scalarizer used by the
    /// gradient-check suite.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_open()?;
        if self.nodes[a.0].tensor.shape() != self.nodes[b.0].tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                a: self.nodes[a.0].tensor.shape().to_vec(),
                b: self.nodes[b.0].tensor.shape().to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (x, y) in self.nodes[a.0]
            .tensor
            .data()
            .iter()
            .zip(self.nodes[b.0].tensor.data())
        {
            acc += f64::from(x * y);
        }
        let s = acc as Elem;
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op: "dot" });
        }
        let requires = self.any_requires(&[a.0, b.0]);
        let t = Tensor::new(vec![1], vec![s])?.with_requires_grad(requires);
        Ok(self.push(t, Op::Dot { a: a.0, b: b.0 }))
    }

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// node on a path from a `requires_grad` leaf to the loss; leaves that
    /// require gradients but are unused end up with all-zero buffers.
    /// Consumes the graph: any further recording or a second `backward`
    /// is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        self.check_open()?;
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].tensor.shape().to_vec(),
            });
        }
        self.consumed = true;
        // Zero-fill buffers for all grad-requiring leaves so unused
        // parameters report zeros rather than nothing.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.tensor.requires_grad() {
                node.tensor.grad_mut();
            }
        }
        if !self.nodes[loss.0].tensor.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tensor.requires_grad() || self.nodes[i].tensor.grad().is_none() {
                continue;
            }
            let contribs = self.node_backward(i);
            for (idx, contrib) in contribs {
                debug_assert!(idx < i);
                let g = self.nodes[idx].tensor.grad_mut();
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs. Only inputs that
    /// require gradients get a contribution.
    fn node_backward(&self, i: usize) -> Vec<(usize, Vec<Elem>)> {
        let node = &self.nodes[i];
        let grad = node.tensor.grad().expect("checked by caller");
        let wants = |idx: usize| self.nodes[idx].tensor.requires_grad();
        let mut out: Vec<(usize, Vec<Elem>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, c_in, h, w) = self.nodes[*input].tensor.dims4().unwrap();
                let (c_out, _, kh, kw) = self.nodes[*weight].tensor.dims4().unwrap();
                let (_, _, oh, ow) = node.tensor.dims4().unwrap();
                let k2 = c_in * kh * kw;
                let x = self.nodes[*input].tensor.data();
                let wgt = self.nodes[*weight].tensor.data();
                let (want_x, want_w, want_b) = (wants(*input), wants(*weight), wants(*bias));
                let mut gx = if want_x {
                    Some(vec![0.0 as Elem; n * c_in * h * w])
                } else {
                    None
                };
                let mut gw = if want_w {
                    Some(vec![0.0 as Elem; c_out * k2])
                } else {
                    None
                };
                let mut col = vec![0.0 as Elem; k2 * oh * ow];
                let mut dcol = vec![0.0 as Elem; k2 * oh * ow];
                for ni in 0..n {
                    let gy = &grad[ni * c_out * oh * ow..(ni + 1) * c_out * oh * ow];
                    if let Some(gw) = gw.as_mut() {
                        im2col_into(
                            &x[ni * c_in * h * w..(ni + 1) * c_in * h * w],
                            c_in,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut col,
                        );
                        matmul_nt_acc(gy, &col, gw, c_out, k2, oh * ow);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcol.fill(0.0);
                        matmul_tn_acc(wgt, gy, &mut dcol, c_out, k2, oh * ow);
                        col2im_add(
                            &dcol,
                            c_in,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *padding,
                            oh,
                            ow,
                            &mut gx[ni * c_in * h * w..(ni + 1) * c_in * h * w],
                        );
                    }
                }
                if want_b {
                    let mut gb = vec![0.0 as Elem; c_out];
                    for ni in 0..n {
                        for co in 0..c_out {
                            let offset = (ni * c_out + co) * oh * ow;
                            let mut s = 0.0 as Elem;
                            for &g in &grad[offset..offset + oh * ow] {
                                s += g;
                            }
                            gb[co] += s;
                        }
                    }
                    out.push((*bias, gb));
                }
                if let Some(gw) = gw {
                    out.push((*weight, gw));
                }
                if let Some(gx) = gx {
                    out.push((*input, gx));
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = self.nodes[*input].tensor.data();
                    let gx: Vec<Elem> = grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    out.push((*input, gx));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants(*input) {
                    let mut gx = vec![0.0 as Elem; self.nodes[*input].tensor.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src as usize] += grad[o];
                    }
                    out.push((*input, gx));
                }
            }
            Op::UpsampleBilinear { input } => {
                if wants(*input) {
                    let (n, c, h, w) = self.nodes[*input].tensor.dims4().unwrap();
                    let (_, _, oh, ow) = node.tensor.dims4().unwrap();
                    let ymap = axis_map(h, oh);
                    let xmap = axis_map(w, ow);
                    let mut gx = vec![0.0 as Elem; n * c * h * w];
                    for nc in 0..n * c {
                        let gsrc = &grad[nc * oh * ow..(nc + 1) * oh * ow];
                        let plane = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                                let g = gsrc[oy * ow + ox];
                                let g_top = g - fy * g;
                                let g_bot = g * fy;
                                plane[y0 * w + x0] += g_top - fx * g_top;
                                plane[y0 * w + x1] += g_top * fx;
                                plane[y1 * w + x0] += g_bot - fx * g_bot;
                                plane[y1 * w + x1] += g_bot * fx;
                            }
                        }
                    }
                    out.push((*input, gx));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.nodes[*a].tensor.dims4().unwrap();
                let cb = self.nodes[*b].tensor.shape()[1];
                let hw = h * w;
                if wants(*a) {
                    let mut ga = vec![0.0 as Elem; n * ca * hw];
                    for ni in 0..n {
                        ga[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(
                            &grad[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw],
                        );
                    }
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0 as Elem; n * cb * hw];
                    for ni in 0..n {
                        gb[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(
                            &grad[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw],
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let (n, k, h, w) = self.nodes[*logits].tensor.dims4().unwrap();
                    let x = self.nodes[*logits].tensor.data();
                    let hw = h * w;
                    let plane = k * hw;
                    let gs = grad[0];
                    let inv = gs / (n * hw) as Elem;
                    let mut gx = vec![0.0 as Elem; n * plane];
                    let mut exps = vec![0.0 as Elem; k];
                    for ni in 0..n {
                        for p in 0..hw {
                            let base = ni * plane + p;
                            let mut m = Elem::NEG_INFINITY;
                            for ki in 0..k {
                                m = m.max(x[base + ki * hw]);
                            }
                            let mut sum_exp = 0.0 as Elem;
                            for ki in 0..k {
                                let e = (x[base + ki * hw] - m).exp();
                                exps[ki] = e;
                                sum_exp += e;
                            }
                            let label = usize::from(labels.data()[ni * hw + p]);
                            for ki in 0..k {
                                let onehot = if ki == label { 1.0 } else { 0.0 };
                                gx[base + ki * hw] = (exps[ki] / sum_exp - onehot) * inv;
                            }
                        }
                    }
                    out.push((*logits, gx));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, grad.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, grad.to_vec()));
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    let g = grad[0];
                    out.push((*input, vec![g; self.nodes[*input].tensor.numel()]));
                }
            }
            Op::Dot { a, b } => {
                let g = grad[0];
                if wants(*a) {
                    let ga: Vec<Elem> = self.nodes[*b]
                        .tensor
                        .data()
                        .iter()
                        .map(|&v| g * v)
                        .collect();
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let gb: Vec<Elem> = self.nodes[*a]
                        .tensor
                        .data()
                        .iter()
                        .map(|&v| g * v)
                        .collect();
                    out.push((*b, gb));
                }
            }
        }
        out
    }
}
