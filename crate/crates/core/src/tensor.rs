//! Dense `f64` tensors and a single-use reverse-mode gradient tape.
//!
//! Every differentiable operation the backbone, the synthesis path and the
//! losses need is recorded on a [`Tape`]. Values are computed eagerly; calling
//! [`Tape::backward`] walks the record in reverse and returns accumulated
//! gradients for every leaf that was registered with `requires_grad`.
//!
//! Layout is row-major throughout: images are `N×C×H×W`, kernels are
//! `O×I×K×K`, linear weights are `in×out`.

use crate::error::{Error, Result};

/// A dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Classification target for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target {
    /// One class index per batch row.
    Hard(Vec<usize>),
    /// `B×C` distributions; each row must sum to 1.
    Soft(Tensor),
}

impl Target {
    fn to_dense(&self, batch: usize, classes: usize) -> Result<Tensor> {
        match self {
            Target::Hard(labels) => {
                if labels.len() != batch {
                    return Err(Error::shape("cross_entropy", &[batch], &[labels.len()]));
                }
                let mut t = Tensor::zeros(&[batch, classes]);
                for (b, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::invalid(format!(
                            "label {y} out of range for {classes} classes"
                        )));
                    }
                    t.data[b * classes + y] = 1.0;
                }
                Ok(t)
            }
            Target::Soft(t) => {
                if t.shape() != [batch, classes] {
                    return Err(Error::shape("cross_entropy", &[batch, classes], t.shape()));
                }
                for (b, row) in t.data().chunks(classes).enumerate() {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                        return Err(Error::invalid(format!(
                            "soft target row {b} is not a distribution (sum {s})"
                        )));
                    }
                }
                Ok(t.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    NormalizeLastAxis(Var),
    GlobalAvgPool(Var),
    Matmul(Var, Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    RepeatRows(Var),
    Combine {
        coeffs: Var,
        row: usize,
        kernels: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor,
        probs: Tensor,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when `var` does not require gradients
    /// or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Record of executed operations.
///
/// A tape is single-shot: after [`Tape::backward`] succeeds, a second call
/// returns [`Error::TapeConsumed`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    madds: u64,
}

pub(crate) fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
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

    /// Multiply-accumulate count of every conv, matmul and kernel combination
    /// executed so far (nominal count, padded taps included).
    pub fn madds(&self) -> u64 {
        self.madds
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ks[0], ks[2]);
        let (oh, ow) = match (
            conv_out_dim(h, k, stride, padding),
            conv_out_dim(w, k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("conv2d", &xs, &ks)),
        };
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let out_plane = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let in_plane = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                                let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                                for (ox, o_v) in out_row.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *o_v += wv * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.madds += (n * oh * ow * o * c * k * k) as u64;
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| x.max(0.0)).collect())?;
        self.push(value, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(
            v.shape.clone(),
            v.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
        )?;
        self.push(value, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::shape("add", &va.shape, &vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape.clone(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::shape("mul", &va.shape, &vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape.clone(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| x * s).collect())?;
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| x + c).collect())?;
        self.push(value, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                v.shape
            )));
        }
        let value = softmax_along(v, axis);
        self.push(value, Op::Softmax { input: a, axis }, &[a], "softmax")
    }

    /// Divides every slice along the last axis by its sum.
    pub fn normalize_last_axis(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape.last().unwrap();
        let mut data = v.data.clone();
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let value = Tensor::new(v.shape.clone(), data)?;
        self.push(value, Op::NormalizeLastAxis(a), &[a], "normalize_last_axis")
    }

    /// `N×C×H×W -> N×C` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", &v.shape, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (v.shape[0], v.shape[1], v.shape[2] * v.shape[3]);
        let data = v
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        self.push(value, Op::GlobalAvgPool(a), &[a], "global_avg_pool")
    }

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::shape("matmul", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = va.data[i * k + p];
                let b_row = &vb.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        self.madds += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// Adds `bias[c]` to every spatial cell of channel `c` in an NCHW tensor.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape.len() != 4 || vb.shape != [va.shape[1]] {
            return Err(Error::shape("add_channel_bias", &va.shape, &vb.shape));
        }
        let (c, hw) = (va.shape[1], va.shape[2] * va.shape[3]);
        let mut data = va.data.clone();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let b = vb.data[i % c];
            plane.iter_mut().for_each(|x| *x += b);
        }
        let value = Tensor::new(va.shape.clone(), data)?;
        self.push(value, Op::AddChannelBias(a, bias), &[a, bias], "add_channel_bias")
    }

    /// Adds a length-`F` bias to every row of a `B×F` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.shape.len() != 2 || vb.shape != [va.shape[1]] {
            return Err(Error::shape("add_row_bias", &va.shape, &vb.shape));
        }
        let f = va.shape[1];
        let mut data = va.data.clone();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(&vb.data).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(va.shape.clone(), data)?;
        self.push(value, Op::AddRowBias(a, bias), &[a, bias], "add_row_bias")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a], "reshape")
    }

    /// `1×N -> rows×N` by repetition.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 2 || v.shape[0] != 1 || rows == 0 {
            return Err(Error::shape("repeat_rows", &v.shape, &[1, rows]));
        }
        let mut data = Vec::with_capacity(rows * v.numel());
        for _ in 0..rows {
            data.extend_from_slice(&v.data);
        }
        let value = Tensor::new(vec![rows, v.shape[1]], data)?;
        self.push(value, Op::RepeatRows(a), &[a], "repeat_rows")
    }

    /// `Σ_n coeffs[row, n] · kernels[n]` over same-shaped kernels.
    pub fn combine(&mut self, coeffs: Var, row: usize, kernels: &[Var]) -> Result<Var> {
        let cs = self.shape(coeffs).to_vec();
        if cs.len() != 2 || row >= cs[0] || cs[1] != kernels.len() || kernels.is_empty() {
            return Err(Error::shape("combine", &cs, &[row, kernels.len()]));
        }
        let shape = self.shape(kernels[0]).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (n, &kv) in kernels.iter().enumerate() {
            let kt = self.value(kv);
            if kt.shape != shape {
                return Err(Error::shape("combine", &shape, &kt.shape));
            }
            let alpha = self.value(coeffs).data[row * cs[1] + n];
            for (o, &w) in out.iter_mut().zip(&kt.data) {
                *o += alpha * w;
            }
        }
        self.madds += (kernels.len() * out.len()) as u64;
        let value = Tensor::new(shape, out)?;
        let mut inputs = kernels.to_vec();
        inputs.push(coeffs);
        self.push(
            value,
            Op::Combine {
                coeffs,
                row,
                kernels: kernels.to_vec(),
            },
            &inputs,
            "combine",
        )
    }

    /// Mean over the batch of `-Σ_c target_c · log softmax(logits)_c`.
    pub fn cross_entropy(&mut self, logits: Var, target: &Target) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape.len() != 2 || lv.shape[1] < 2 {
            return Err(Error::shape("cross_entropy", &lv.shape, &[0, 2]));
        }
        let (b, c) = (lv.shape[0], lv.shape[1]);
        let target = target.to_dense(b, c)?;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
                let t = target.data[i * c + j];
                if t != 0.0 {
                    loss -= t * (row[j] - lse);
                }
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let probs = Tensor::new(vec![b, c], probs)?;
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(value, Op::Sum(a), &[a], "sum")
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum_squares());
        self.push(value, Op::SumSquares(a), &[a], "sum_squares")
    }

    /// Back-propagates from a scalar `loss`. Consumes the tape's record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (stride, padding) = (*stride, *padding);
                    let xs = nodes[input.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let ks = nodes[kernel.0].value.shape();
                    let (o, k) = (ks[0], ks[2]);
                    let (oh, ow) = (out.shape[2], out.shape[3]);
                    let x = nodes[input.0].value.data();
                    let wt = nodes[kernel.0].value.data();
                    let input_needs = nodes[input.0].needs_grad;
                    let kernel_needs = nodes[kernel.0].needs_grad;
                    let mut gx = input_needs.then(|| vec![0.0; x.len()]);
                    let mut gw = kernel_needs.then(|| vec![0.0; wt.len()]);
                    for b in 0..n {
                        for oc in 0..o {
                            let g_plane = &g[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                            for ic in 0..c {
                                let base = (b * c + ic) * h * w;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                                        let wv = wt[widx];
                                        let mut wsum = 0.0;
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as isize - padding as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            let row = base + iy as usize * w;
                                            for ox in 0..ow {
                                                let ix = (ox * stride + kx) as isize - padding as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let gv = g_plane[oy * ow + ox];
                                                let xi = row + ix as usize;
                                                if let Some(gx) = gx.as_mut() {
                                                    gx[xi] += wv * gv;
                                                }
                                                wsum += x[xi] * gv;
                                            }
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            gw[widx] += wsum;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let (Some(gx), Some(dst)) = (gx, acc(&mut grads, nodes, *input)) {
                        dst.iter_mut().zip(gx).for_each(|(d, v)| *d += v);
                    }
                    if let (Some(gw), Some(dst)) = (gw, acc(&mut grads, nodes, *kernel)) {
                        dst.iter_mut().zip(gw).for_each(|(d, v)| *d += v);
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for ((d, &gv), &xv) in dst.iter_mut().zip(&g).zip(x) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for ((d, &gv), &y) in dst.iter_mut().zip(&g).zip(&out.data) {
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(dst) = acc(&mut grads, nodes, *v) {
                            dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for ((d, gv), y) in dst.iter_mut().zip(&g).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if let Some(dst) = acc(&mut grads, nodes, *b) {
                        for ((d, gv), x) in dst.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv * s);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                    }
                }
                Op::Softmax { input, axis } => {
                    let (outer, len, inner) = axis_strides(&out.shape, *axis);
                    if let Some(dst) = acc(&mut grads, nodes, *input) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let dot: f64 = (0..len).map(|j| g[idx(j)] * out.data[idx(j)]).sum();
                                for j in 0..len {
                                    dst[idx(j)] += out.data[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::NormalizeLastAxis(a) => {
                    let n = *out.shape.last().unwrap();
                    let x = nodes[a.0].value.data();
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for r in 0..out.numel() / n {
                            let span = r * n..(r + 1) * n;
                            let s: f64 = x[span.clone()].iter().sum();
                            let dot: f64 = span.clone().map(|j| g[j] * out.data[j]).sum();
                            for j in span {
                                dst[j] += (g[j] - dot) / s;
                            }
                        }
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let xs = nodes[a.0].value.shape();
                    let hw = xs[2] * xs[3];
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for (p, plane) in dst.chunks_mut(hw).enumerate() {
                            let gv = g[p] / hw as f64;
                            plane.iter_mut().for_each(|d| *d += gv);
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * vb.data[p * n + j];
                                }
                                dst[i * k + p] += s;
                            }
                        }
                    }
                    if let Some(dst) = acc(&mut grads, nodes, *b) {
                        for i in 0..m {
                            for p in 0..k {
                                let av = va.data[i * k + p];
                                for j in 0..n {
                                    dst[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::AddChannelBias(a, bias) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                    }
                    let (c, hw) = (out.shape[1], out.shape[2] * out.shape[3]);
                    if let Some(dst) = acc(&mut grads, nodes, *bias) {
                        for (p, plane) in g.chunks(hw).enumerate() {
                            dst[p % c] += plane.iter().sum::<f64>();
                        }
                    }
                }
                Op::AddRowBias(a, bias) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                    }
                    let f = out.shape[1];
                    if let Some(dst) = acc(&mut grads, nodes, *bias) {
                        for row in g.chunks(f) {
                            dst.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
                Op::RepeatRows(a) => {
                    let n = out.shape[1];
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        for row in g.chunks(n) {
                            dst.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
                Op::Combine {
                    coeffs,
                    row,
                    kernels,
                } => {
                    let cv = &nodes[coeffs.0].value;
                    let nb = cv.shape[1];
                    for (n, kv) in kernels.iter().enumerate() {
                        let alpha = cv.data[row * nb + n];
                        if let Some(dst) = acc(&mut grads, nodes, *kv) {
                            dst.iter_mut().zip(&g).for_each(|(d, gv)| *d += alpha * gv);
                        }
                    }
                    if let Some(dst) = acc(&mut grads, nodes, *coeffs) {
                        for (n, kv) in kernels.iter().enumerate() {
                            let kd = nodes[kv.0].value.data();
                            dst[row * nb + n] += kd.iter().zip(&g).map(|(w, gv)| w * gv).sum::<f64>();
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let (b, c) = (probs.shape[0], probs.shape[1]);
                    let scale = g[0] / b as f64;
                    if let Some(dst) = acc(&mut grads, nodes, *logits) {
                        for i in 0..b {
                            let t = &target.data[i * c..(i + 1) * c];
                            let mass: f64 = t.iter().sum();
                            for j in 0..c {
                                dst[i * c + j] += scale * (probs.data[i * c + j] * mass - t[j]);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::SumSquares(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(dst) = acc(&mut grads, nodes, *a) {
                        dst.iter_mut().zip(x).for_each(|(d, xv)| *d += 2.0 * xv * g[0]);
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Tensor::new(node.value.shape.clone(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax_along(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_strides(&t.shape, axis);
    let mut data = t.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| t.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (t.data[idx(j)] - m).exp();
                data[idx(j)] = e;
                s += e;
            }
            for j in 0..len {
                data[idx(j)] /= s;
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

/// Average-pools an NCHW tensor by `factor` in both spatial dimensions.
/// Trailing rows/columns that do not fill a window are dropped.
pub fn downsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || factor == 0 || s[2] < factor || s[3] < factor {
        return Err(Error::shape("downsample", s, &[factor]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += t.data[p * h * w + (oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc / norm;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six-loop reference convolution over an explicitly zero-padded input.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, k) = (w.shape[0], w.shape[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let at = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                0.0
            } else {
                x.data[((b * c + ch) * h + y as usize) * wd + xx as usize]
            }
        };
        Tensor::from_fn(&[n, o, oh, ow], |i| {
            let ox = i % ow;
            let oy = (i / ow) % oh;
            let oc = (i / (ow * oh)) % o;
            let b = i / (ow * oh * o);
            let mut s = 0.0;
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        s += w.data[((oc * c + ic) * k + ky) * k + kx] * at(b, ic, y, xx);
                    }
                }
            }
            s
        })
    }

    fn conv_value(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv_value(&x, &w, 1, 0), x);
    }

    #[test]
    fn ones_kernel_sums() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_value(&x, &w, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let got = conv_value(&x, &w, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let msg = tape.conv2d(x, w, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_is_linear_in_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w1 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let w2 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let (a, b) = (0.3, -1.7);
        let mixed = Tensor::from_fn(w1.shape(), |i| a * w1.data[i] + b * w2.data[i]);
        let lhs = conv_value(&x, &mixed, 1, 1);
        let y1 = conv_value(&x, &w1, 1, 1);
        let y2 = conv_value(&x, &w2, 1, 1);
        for i in 0..lhs.numel() {
            assert!((lhs.data[i] - (a * y1.data[i] + b * y2.data[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn relu_and_scale_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.scale(x, 0.0).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_requires_equal_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
        let b = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = tape.softmax(b, 0).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 1.0);
        assert!(v[1] < 1e-300);
        assert!(tape.softmax(b, 1).is_err());
    }

    #[test]
    fn global_avg_pool_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2, 2], vec![7.0, 7.0, 7.0, 7.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 2.5]);
    }

    #[test]
    fn cross_entropy_uniform_and_one_hot() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 10]));
        let l = tape.cross_entropy(z, &Target::Hard(vec![3])).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let z = tape.constant(logits);
        let hard = tape.cross_entropy(z, &Target::Hard(vec![2, 0])).unwrap();
        let soft = Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let soft = tape.cross_entropy(z, &Target::Soft(soft)).unwrap();
        assert_eq!(tape.value(hard).item(), tape.value(soft).item());
    }

    #[test]
    fn cross_entropy_rejects_bad_soft_rows() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let t = Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap();
        assert!(tape.cross_entropy(z, &Target::Soft(t)).is_err());
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_is_single_shot() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.param(Tensor::scalar(1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(y).is_none());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn downsample_averages_windows() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let d = downsample(&x, 2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 2, 2]);
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn madds_counted_for_conv_and_matmul() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let w = tape.constant(Tensor::zeros(&[8, 3, 3, 3]));
        tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.madds(), 221_184);
        let a = tape.constant(Tensor::zeros(&[2, 5]));
        let b = tape.constant(Tensor::zeros(&[5, 3]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.madds(), 221_184 + 30);
    }
}
