//! Computation tape: eager forward ops that record themselves for reverse-mode
//! gradients. Node indices are append-only, so tape order is topological and
//! one reverse sweep visits every node exactly once.

use rand::Rng;

use super::{broadcast_shapes, broadcast_strides, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Square { a: TensorId },
    /// Forward sqrt(x); backward g / (2 sqrt(x + eps)) so zero inputs stay finite.
    SqrtGuarded { a: TensorId, eps: f64 },
    Exp { a: TensorId },
    Elu { a: TensorId },
    ClampMin { a: TensorId, floor: f64 },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId, axis: usize },
    MeanAll { a: TensorId },
    SumAll { a: TensorId },
    MeanAxis { a: TensorId, axis: usize },
    SumAxis { a: TensorId, axis: usize },
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Narrow { a: TensorId, axis: usize, start: usize },
    Conv2d { input: TensorId, kernel: TensorId, groups: usize, stride: (usize, usize), pad: (usize, usize, usize, usize) },
    AvgPool2d { a: TensorId, kh: usize, kw: usize },
    BatchNormTrain { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: TensorId, mask: Vec<f64> },
    PairwiseSqDist { a: TensorId, b: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a single forward pass; dropped after the corresponding backward.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn add_grad(node: &mut Node, contrib: &[f64]) {
    if !node.requires_grad {
        return;
    }
    let grad = node
        .grad
        .get_or_insert_with(|| vec![0.0; node.tensor.numel()]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

/// outer/inner extents for iterating lanes along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if len == 0 {
        return Err(Error::dim(format!("axis {} of shape {:?} is empty", axis, shape)));
    }
    Ok((outer, len, inner))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { tensor, op, requires_grad, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a tensor that participates in gradient computation.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf, true)
    }

    /// Inserts a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.node(id).tensor
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.node(id).tensor.shape()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        self.node(id).tensor.item()
    }

    /// Gradient of `id` after [`Tape::backward`]; None if none flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ---- elementwise and broadcast binary ops ----

    fn binary(&mut self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.node(a).tensor, &self.node(b).tensor);
        let shape = broadcast_shapes(ta.shape(), tb.shape())?;
        let rank = shape.len();
        let sa = broadcast_strides(ta.shape(), rank);
        let sb = broadcast_strides(tb.shape(), rank);
        let n: usize = shape.iter().product::<usize>().max(1);
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; rank];
        for (lin, out) in data.iter_mut().enumerate() {
            let mut rem = lin;
            for i in (0..rank).rev() {
                idx[i] = rem % shape[i];
                rem /= shape[i];
            }
            let (mut oa, mut ob) = (0, 0);
            for i in 0..rank {
                oa += idx[i] * sa[i];
                ob += idx[i] * sb[i];
            }
            *out = f(ta.data()[oa], tb.data()[ob]);
        }
        let req = self.req(a) || self.req(b);
        Ok((Tensor::new(shape, data)?, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (t, req) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (t, req) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (t, req) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Scale { a, c }, req))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::AddScalar { a }, req))
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta.data().iter().map(|v| v * v).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Square { a }, req))
    }

    /// Elementwise sqrt with a guarded gradient: backward divides by
    /// sqrt(x + eps) so x = 0 yields a large but finite derivative.
    pub fn sqrt_guarded(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        if ta.data().iter().any(|&v| v < 0.0) {
            return Err(Error::numeric("sqrt of negative value"));
        }
        let data = ta.data().iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::SqrtGuarded { a, eps }, req))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Exp { a }, req))
    }

    /// ELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Elu { a }, req))
    }

    /// Elementwise max(x, floor); gradient passes only where x clears the
    /// floor.
    pub fn clamp_min(&mut self, a: TensorId, floor: f64) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let data = ta.data().iter().map(|&v| v.max(floor)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::ClampMin { a, floor }, req))
    }

    fn softmax_forward(&self, a: TensorId, axis: usize, log: bool) -> Result<Tensor> {
        let ta = &self.node(a).tensor;
        let (outer, len, inner) = lanes(ta.shape(), axis)?;
        let mut data = vec![0.0; ta.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(ta.data()[at(k)]);
                }
                let mut denom = 0.0;
                for k in 0..len {
                    denom += (ta.data()[at(k)] - max).exp();
                }
                for k in 0..len {
                    let shifted = ta.data()[at(k)] - max;
                    data[at(k)] = if log {
                        shifted - denom.ln()
                    } else {
                        shifted.exp() / denom
                    };
                }
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let t = self.softmax_forward(a, axis, false)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Softmax { a, axis }, req))
    }

    /// Numerically stabilized log-softmax (max subtraction).
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let t = self.softmax_forward(a, axis, true)?;
        let req = self.req(a);
        Ok(self.push(t, Op::LogSoftmax { a, axis }, req))
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        if ta.numel() == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll { a }, req))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let s = ta.data().iter().sum::<f64>();
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, req))
    }

    fn reduce_axis(&self, a: TensorId, axis: usize, mean: bool) -> Result<Tensor> {
        let ta = &self.node(a).tensor;
        let (outer, len, inner) = lanes(ta.shape(), axis)?;
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for k in 0..len {
                    acc += ta.data()[o * len * inner + k * inner + i];
                }
                data[o * inner + i] = if mean { acc / len as f64 } else { acc };
            }
        }
        Tensor::new(shape, data)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let t = self.reduce_axis(a, axis, true)?;
        let req = self.req(a);
        Ok(self.push(t, Op::MeanAxis { a, axis }, req))
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let t = self.reduce_axis(a, axis, false)?;
        let req = self.req(a);
        Ok(self.push(t, Op::SumAxis { a, axis }, req))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.node(a).tensor, &self.node(b).tensor);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul needs [m,k] x [k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += av * tb.data()[p * n + j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Matmul { a, b }, req))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let s = ta.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Transpose { a }, req))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let t = Tensor::new(shape, ta.data().to_vec())?;
        let req = self.req(a);
        Ok(self.push(t, Op::Reshape { a }, req))
    }

    // ---- structural ops ----

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.node(inputs[0]).tensor.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.node(id).tensor.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::dim(format!(
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let t = &self.node(id).tensor;
            let len = t.shape()[axis];
            for o in 0..outer {
                for k in 0..len {
                    let src = (o * len + k) * inner;
                    let dst = (o * axis_total + offset + k) * inner;
                    data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                }
            }
            offset += len;
        }
        let req = inputs.iter().any(|&id| self.req(id));
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, req))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let s = ta.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::dim(format!(
                "narrow axis {} range {}..{} invalid for shape {:?}",
                axis,
                start,
                start + len,
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let mut shape = s.to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = (o * axis_len + start + k) * inner;
                let dst = (o * len + k) * inner;
                data[dst..dst + inner].copy_from_slice(&ta.data()[src..src + inner]);
            }
        }
        let t = Tensor::new(shape, data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Narrow { a, axis, start }, req))
    }

    // ---- convolution family ----

    /// Grouped 2-D cross-correlation. Input [B, Cin, H, W], kernel
    /// [Cout, Cin/groups, kh, kw], pad = (top, bottom, left, right).
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        groups: usize,
        stride: (usize, usize),
        pad: (usize, usize, usize, usize),
    ) -> Result<TensorId> {
        let (ti, tk) = (&self.node(input).tensor, &self.node(kernel).tensor);
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
                si, sk
            )));
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || ck != cin / groups {
            return Err(Error::dim(format!(
                "conv2d groups {} incompatible with Cin {} / Cout {} / kernel {:?}",
                groups, cin, cout, sk
            )));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (pt, pb, pl, pr) = pad;
        let hp = h + pt + pb;
        let wp = w + pl + pr;
        if kh > hp || kw > wp {
            return Err(Error::dim(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh, kw, hp, wp
            )));
        }
        let h_out = (hp - kh) / sh + 1;
        let w_out = (wp - kw) / sw + 1;
        let cpg = cin / groups;
        let opg = cout / groups;
        let mut data = vec![0.0; b * cout * h_out * w_out];
        for bi in 0..b {
            for co in 0..cout {
                let ci_base = (co / opg) * cpg;
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0;
                        for cg in 0..cpg {
                            let ci = ci_base + cg;
                            for ki in 0..kh {
                                let ih = (oh * sh + ki) as isize - pt as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let iw = (ow * sw + kj) as isize - pl as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let iv = ti.data()
                                        [((bi * cin + ci) * h + ih as usize) * w + iw as usize];
                                    let kv = tk.data()[((co * cpg + cg) * kh + ki) * kw + kj];
                                    acc += iv * kv;
                                }
                            }
                        }
                        data[((bi * cout + co) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, cout, h_out, w_out], data)?;
        let req = self.req(input) || self.req(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, groups, stride, pad }, req))
    }

    /// Non-overlapping average pooling; trailing rows/cols that do not fill a
    /// window are dropped.
    pub fn avg_pool2d(&mut self, a: TensorId, kh: usize, kw: usize) -> Result<TensorId> {
        let ta = &self.node(a).tensor;
        let s = ta.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("avg_pool2d needs rank 4, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::dim(format!(
                "pool window {}x{} invalid for input {}x{}",
                kh, kw, h, w
            )));
        }
        let h_out = h / kh;
        let w_out = w / kw;
        let inv = 1.0 / (kh * kw) as f64;
        let mut data = vec![0.0; b * c * h_out * w_out];
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                acc += ta.data()
                                    [((bi * c + ci) * h + oh * kh + ki) * w + ow * kw + kj];
                            }
                        }
                        data[((bi * c + ci) * h_out + oh) * w_out + ow] = acc * inv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c, h_out, w_out], data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::AvgPool2d { a, kh, kw }, req))
    }

    /// Batch norm over (B, H, W) per channel using batch statistics.
    /// Returns (output, batch mean, biased batch variance) so the caller can
    /// maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let (s, c) = self.batch_norm_check(x, gamma, beta)?;
        let (b, h, w) = (s[0], s[2], s[3]);
        let m = b * h * w;
        if m == 0 {
            return Err(Error::contract("batch_norm on empty batch"));
        }
        let tx = &self.node(x).tensor;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        acc += tx.data()[((bi * c + ci) * h + hi) * w + wi];
                    }
                }
            }
            mean[ci] = acc / m as f64;
            let mut vacc = 0.0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        let d = tx.data()[((bi * c + ci) * h + hi) * w + wi] - mean[ci];
                        vacc += d * d;
                    }
                }
            }
            var[ci] = vacc / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = self.batch_norm_apply(x, gamma, beta, &mean, &inv_std);
        let t = Tensor::new(s.to_vec(), data)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let id = self.push(
            t,
            Op::BatchNormTrain { x, gamma, beta, mean: mean.clone(), inv_std },
            req,
        );
        Ok((id, mean, var))
    }

    /// Batch norm using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let (s, c) = self.batch_norm_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(format!(
                "running stats length {} / {} does not match {} channels",
                running_mean.len(),
                running_var.len(),
                c
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = self.batch_norm_apply(x, gamma, beta, running_mean, &inv_std);
        let t = Tensor::new(s.to_vec(), data)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let op = Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std };
        Ok(self.push(t, op, req))
    }

    fn batch_norm_check(&self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<(Vec<usize>, usize)> {
        let s = self.node(x).tensor.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("batch_norm needs rank 4, got {:?}", s)));
        }
        let c = s[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let gs = self.node(id).tensor.shape();
            if gs != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {} must have shape [{}], got {:?}",
                    name, c, gs
                )));
            }
        }
        Ok((s, c))
    }

    fn batch_norm_apply(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Vec<f64> {
        let tx = &self.node(x).tensor;
        let tg = self.node(gamma).tensor.data();
        let tb = self.node(beta).tensor.data();
        let s = tx.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![0.0; tx.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let i = ((bi * c + ci) * h + hi) * w + wi;
                        data[i] = tg[ci] * (tx.data()[i] - mean[ci]) * inv_std[ci] + tb[ci];
                    }
                }
            }
        }
        data
    }

    /// Inverted dropout: keeps each element with probability 1-p and scales
    /// kept elements by 1/(1-p). Call only in training; eval is the identity.
    pub fn dropout<R: Rng>(&mut self, a: TensorId, p: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {} not in [0, 1)", p)));
        }
        let ta = &self.node(a).tensor;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.req(a);
        Ok(self.push(t, Op::Dropout { a, mask }, req))
    }

    /// Squared Euclidean distances between rows: out[i][j] = |a_i - b_j|^2.
    pub fn pairwise_sq_dist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.node(a).tensor, &self.node(b).tensor);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!(
                "pairwise_sq_dist needs [m,d] and [n,d], got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                    acc += diff * diff;
                }
                data[i * n + j] = acc;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::PairwiseSqDist { a, b }, req))
    }

    // ---- backward ----

    /// Reverse sweep from `loss` (one element). Each node is visited once in
    /// reverse creation order; gradients accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.tensor.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a one-element loss, shape is {:?}",
                lnode.tensor.shape()
            )));
        }
        if !lnode.requires_grad {
            return Err(Error::contract(
                "backward on a tensor with no gradient-requiring ancestors",
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let grad = node.grad.as_ref().unwrap().clone();
            Self::backward_node(before, node, &grad);
        }
        Ok(())
    }

    fn backward_node(before: &mut [Node], node: &Node, g: &[f64]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let out_shape = node.tensor.shape();
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let sa = before[a.0].tensor.shape().to_vec();
                let sb = before[b.0].tensor.shape().to_vec();
                if before[a.0].requires_grad {
                    let ga = reduce_to_shape(g, out_shape, &sa);
                    add_grad(&mut before[a.0], &ga);
                }
                if before[b.0].requires_grad {
                    let gb: Vec<f64> = g.iter().map(|v| v * sign).collect();
                    let gb = reduce_to_shape(&gb, out_shape, &sb);
                    add_grad(&mut before[b.0], &gb);
                }
            }
            Op::Mul { a, b } => {
                let out_shape = node.tensor.shape().to_vec();
                let rank = out_shape.len();
                let sa = before[a.0].tensor.shape().to_vec();
                let sb = before[b.0].tensor.shape().to_vec();
                let stra = broadcast_strides(&sa, rank);
                let strb = broadcast_strides(&sb, rank);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                let mut idx = vec![0usize; rank];
                for (lin, &gv) in g.iter().enumerate() {
                    let mut rem = lin;
                    for i in (0..rank).rev() {
                        idx[i] = rem % out_shape[i];
                        rem /= out_shape[i];
                    }
                    let (mut oa, mut ob) = (0, 0);
                    for i in 0..rank {
                        oa += idx[i] * stra[i];
                        ob += idx[i] * strb[i];
                    }
                    ga[lin] = gv * before[b.0].tensor.data()[ob];
                    gb[lin] = gv * before[a.0].tensor.data()[oa];
                }
                if before[a.0].requires_grad {
                    let ga = reduce_to_shape(&ga, &out_shape, &sa);
                    add_grad(&mut before[a.0], &ga);
                }
                if before[b.0].requires_grad {
                    let gb = reduce_to_shape(&gb, &out_shape, &sb);
                    add_grad(&mut before[b.0], &gb);
                }
            }
            Op::Scale { a, c } => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::AddScalar { a } => {
                add_grad(&mut before[a.0], g);
            }
            Op::Square { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(before[a.0].tensor.data())
                    .map(|(gv, x)| 2.0 * x * gv)
                    .collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::SqrtGuarded { a, eps } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(before[a.0].tensor.data())
                    .map(|(gv, x)| gv / (2.0 * (x + eps).sqrt()))
                    .collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::Exp { a } => {
                let ga: Vec<f64> = g.iter().zip(node.tensor.data()).map(|(gv, y)| gv * y).collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::Elu { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(before[a.0].tensor.data().iter().zip(node.tensor.data()))
                    .map(|(gv, (x, y))| if *x >= 0.0 { *gv } else { gv * (y + 1.0) })
                    .collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::ClampMin { a, floor } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(before[a.0].tensor.data())
                    .map(|(gv, x)| if *x >= *floor { *gv } else { 0.0 })
                    .collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::Softmax { a, axis } => {
                let s = node.tensor.data();
                let shape = node.tensor.shape();
                let (outer, len, inner) = lanes(shape, *axis).expect("validated in forward");
                let mut ga = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[at(k)] * s[at(k)];
                        }
                        for k in 0..len {
                            ga[at(k)] = s[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::LogSoftmax { a, axis } => {
                let ls = node.tensor.data();
                let shape = node.tensor.shape();
                let (outer, len, inner) = lanes(shape, *axis).expect("validated in forward");
                let mut ga = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let mut gsum = 0.0;
                        for k in 0..len {
                            gsum += g[at(k)];
                        }
                        for k in 0..len {
                            ga[at(k)] = g[at(k)] - ls[at(k)].exp() * gsum;
                        }
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::MeanAll { a } => {
                let n = before[a.0].tensor.numel();
                let gv = g[0] / n as f64;
                let ga = vec![gv; n];
                add_grad(&mut before[a.0], &ga);
            }
            Op::SumAll { a } => {
                let ga = vec![g[0]; before[a.0].tensor.numel()];
                add_grad(&mut before[a.0], &ga);
            }
            Op::MeanAxis { a, axis } | Op::SumAxis { a, axis } => {
                let in_shape = before[a.0].tensor.shape().to_vec();
                let (outer, len, inner) = lanes(&in_shape, *axis).expect("validated in forward");
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i] * scale;
                        for k in 0..len {
                            ga[o * len * inner + k * inner + i] = gv;
                        }
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::Matmul { a, b } => {
                let sa = before[a.0].tensor.shape().to_vec();
                let sb = before[b.0].tensor.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if before[a.0].requires_grad {
                    // dA = G * B^T
                    let bd = before[b.0].tensor.data().to_vec();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                    add_grad(&mut before[a.0], &ga);
                }
                if before[b.0].requires_grad {
                    // dB = A^T * G
                    let ad = before[a.0].tensor.data().to_vec();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    add_grad(&mut before[b.0], &gb);
                }
            }
            Op::Transpose { a } => {
                let s = node.tensor.shape();
                let (n, m) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::Reshape { a } => {
                add_grad(&mut before[a.0], g);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.tensor.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &id in inputs {
                    let len = before[id.0].tensor.shape()[*axis];
                    if before[id.0].requires_grad {
                        let mut gi = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for k in 0..len {
                                let src = (o * axis_total + offset + k) * inner;
                                let dst = (o * len + k) * inner;
                                gi[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        add_grad(&mut before[id.0], &gi);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = before[a.0].tensor.shape().to_vec();
                let out_shape = node.tensor.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let axis_len = in_shape[*axis];
                let len = out_shape[*axis];
                let mut ga = vec![0.0; before[a.0].tensor.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        let dst = (o * axis_len + start + k) * inner;
                        let src = (o * len + k) * inner;
                        ga[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::Conv2d { input, kernel, groups, stride, pad } => {
                let si = before[input.0].tensor.shape().to_vec();
                let sk = before[kernel.0].tensor.shape().to_vec();
                let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
                let (cout, cpg, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                let opg = cout / groups;
                let (sh, sw) = *stride;
                let (pt, _, pl, _) = *pad;
                let os = node.tensor.shape();
                let (h_out, w_out) = (os[2], os[3]);
                let need_gi = before[input.0].requires_grad;
                let need_gk = before[kernel.0].requires_grad;
                let mut gi = if need_gi { vec![0.0; before[input.0].tensor.numel()] } else { Vec::new() };
                let mut gk = if need_gk { vec![0.0; before[kernel.0].tensor.numel()] } else { Vec::new() };
                let idata = before[input.0].tensor.data();
                let kdata = before[kernel.0].tensor.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let ci_base = (co / opg) * cpg;
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                let gv = g[((bi * cout + co) * h_out + oh) * w_out + ow];
                                if gv == 0.0 {
                                    continue;
                                }
                                for cg in 0..cpg {
                                    let ci = ci_base + cg;
                                    for ki in 0..kh {
                                        let ih = (oh * sh + ki) as isize - pt as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..kw {
                                            let iw = (ow * sw + kj) as isize - pl as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let ii = ((bi * cin + ci) * h + ih as usize) * w
                                                + iw as usize;
                                            let ki_ = ((co * cpg + cg) * kh + ki) * kw + kj;
                                            if need_gi {
                                                gi[ii] += kdata[ki_] * gv;
                                            }
                                            if need_gk {
                                                gk[ki_] += idata[ii] * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_gi {
                    add_grad(&mut before[input.0], &gi);
                }
                if need_gk {
                    add_grad(&mut before[kernel.0], &gk);
                }
            }
            Op::AvgPool2d { a, kh, kw } => {
                let in_shape = before[a.0].tensor.shape().to_vec();
                let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let os = node.tensor.shape();
                let (h_out, w_out) = (os[2], os[3]);
                let inv = 1.0 / (kh * kw) as f64;
                let mut ga = vec![0.0; before[a.0].tensor.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for oh in 0..h_out {
                            for ow in 0..w_out {
                                let gv = g[((bi * c + ci) * h_out + oh) * w_out + ow] * inv;
                                for ki in 0..*kh {
                                    for kj in 0..*kw {
                                        ga[((bi * c + ci) * h + oh * kh + ki) * w + ow * kw + kj] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                add_grad(&mut before[a.0], &ga);
            }
            Op::BatchNormTrain { x, gamma, beta, mean, inv_std } => {
                let s = node.tensor.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let m = (b * h * w) as f64;
                let xd = before[x.0].tensor.data();
                let gd = before[gamma.0].tensor.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = ((bi * c + ci) * h + hi) * w + wi;
                                let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                                sum_g[ci] += g[i];
                                sum_gx[ci] += g[i] * xhat;
                            }
                        }
                    }
                }
                if before[x.0].requires_grad {
                    let mut gx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let i = ((bi * c + ci) * h + hi) * w + wi;
                                    let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                                    gx[i] = gd[ci]
                                        * inv_std[ci]
                                        * (g[i] - sum_g[ci] / m - xhat * sum_gx[ci] / m);
                                }
                            }
                        }
                    }
                    add_grad(&mut before[x.0], &gx);
                }
                if before[gamma.0].requires_grad {
                    add_grad(&mut before[gamma.0], &sum_gx);
                }
                if before[beta.0].requires_grad {
                    add_grad(&mut before[beta.0], &sum_g);
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let s = node.tensor.shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let gd = before[gamma.0].tensor.data();
                let xd = before[x.0].tensor.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let i = ((bi * c + ci) * h + hi) * w + wi;
                                let xhat = (xd[i] - mean[ci]) * inv_std[ci];
                                sum_g[ci] += g[i];
                                sum_gx[ci] += g[i] * xhat;
                            }
                        }
                    }
                }
                if before[x.0].requires_grad {
                    let mut gx = vec![0.0; b * c * h * w];
                    for bi in 0..b {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let i = ((bi * c + ci) * h + hi) * w + wi;
                                    gx[i] = g[i] * gd[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                    add_grad(&mut before[x.0], &gx);
                }
                if before[gamma.0].requires_grad {
                    add_grad(&mut before[gamma.0], &sum_gx);
                }
                if before[beta.0].requires_grad {
                    add_grad(&mut before[beta.0], &sum_g);
                }
            }
            Op::Dropout { a, mask } => {
                let ga: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                add_grad(&mut before[a.0], &ga);
            }
            Op::PairwiseSqDist { a, b } => {
                let sa = before[a.0].tensor.shape().to_vec();
                let sb = before[b.0].tensor.shape().to_vec();
                let (m, n, d) = (sa[0], sb[0], sa[1]);
                let ad = before[a.0].tensor.data().to_vec();
                let bd = before[b.0].tensor.data().to_vec();
                if before[a.0].requires_grad {
                    let mut ga = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = 2.0 * g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                ga[i * d + k] += gv * (ad[i * d + k] - bd[j * d + k]);
                            }
                        }
                    }
                    add_grad(&mut before[a.0], &ga);
                }
                if before[b.0].requires_grad {
                    let mut gb = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = 2.0 * g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                gb[j * d + k] += gv * (bd[j * d + k] - ad[i * d + k]);
                            }
                        }
                    }
                    add_grad(&mut before[b.0], &gb);
                }
            }
        }
    }
}
