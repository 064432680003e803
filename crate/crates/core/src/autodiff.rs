//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Nodes only ever reference earlier nodes, so the tape is already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Feature maps are `[channels, time]`. Convolution weights are
//! `[out_channels, in_channels, kernel]`.

use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Hardtanh,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::Sigmoid => sigmoid(x),
            Pointwise::Hardtanh => x.clamp(-1.0, 1.0),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Sigmoid => y * (1.0 - y),
            Pointwise::Hardtanh => {
                if x > -1.0 && x < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel moments of one normalization call, used to update running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages of per-channel mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Identity statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        for (v, b) in self.var.iter_mut().zip(&batch.var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the input's own per-channel statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Pointwise(Pointwise, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    SliceTime { input: Var, start: usize },
    ConcatTime(Vec<Var>),
    LogSoftmax(Var),
    MeanOverTime(Var),
    Sum(Var),
    Ctc { input: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest distance from any relu/hardtanh input on the tape to a point
    /// where that function is not differentiable. `inf` if there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Op::Pointwise(f, input) = node.op else { continue };
            let kinks: &[f64] = match f {
                Pointwise::Relu => &[0.0],
                Pointwise::Hardtanh => &[-1.0, 1.0],
                Pointwise::Sigmoid => &[],
            };
            for x in self.value(input).data() {
                for k in kinks {
                    margin = margin.min((x - k).abs());
                }
            }
        }
        margin
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 1-D cross-correlation over time with zero padding.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (c_in, t_in) = x.dims2()?;
        let [c_out, wc_in, k] = w.shape()[..] else {
            return Err(Error::dim("conv1d", format!("weight must be rank 3, got {:?}", w.shape())));
        };
        if wc_in != c_in {
            return Err(Error::dim(
                "conv1d",
                format!("weight expects {wc_in} input channels, input has {c_in}"),
            ));
        }
        if b.shape() != [c_out] {
            return Err(Error::dim("conv1d", format!("bias shape {:?}, expected [{c_out}]", b.shape())));
        }
        if stride == 0 {
            return Err(Error::contract("conv1d", "stride must be positive"));
        }
        if k > t_in + 2 * padding {
            return Err(Error::dim(
                "conv1d",
                format!("kernel {k} longer than padded input {}", t_in + 2 * padding),
            ));
        }
        let t_out = conv_out_len(t_in, k, stride, padding);
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            let row = &mut out[o * t_out..(o + 1) * t_out];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let xrow = &xd[c * t_in..(c + 1) * t_in];
                for kk in 0..k {
                    let wv = wd[(o * c_in + c) * k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let (t0, t1) = valid_range(t_in, t_out, kk, stride, padding);
                    for t in t0..t1 {
                        row[t] += wv * xrow[t * stride + kk - padding];
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, t_out], out)?;
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &[input, weight, bias],
        )
    }

    /// Per-channel normalization over the time axis followed by `gamma * x_hat + beta`.
    ///
    /// In train mode the returned [`BatchStats`] hold the moments that were used,
    /// for the caller to fold into running statistics.
    pub fn batchnorm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let (c, t) = x.dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim("batchnorm1d", format!("gamma/beta must be [{c}]")));
        }
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let row = x.row(ch);
                    let m = row.iter().sum::<f64>() / t as f64;
                    mean[ch] = m;
                    var[ch] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
                }
                (mean, var)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(Error::dim("batchnorm1d", "running stats channel mismatch"));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0; c * t];
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for (i, v) in x.row(ch).iter().enumerate() {
                let xh = (v - mean[ch]) * inv_std[ch];
                x_hat[ch * t + i] = xh;
                out[ch * t + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(vec![c, t], out)?;
        let train = matches!(mode, BatchNormMode::Train);
        let var_out = self.push(
            "batchnorm1d",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: train,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, train.then_some(BatchStats { mean, var })))
    }

    pub fn pointwise(&mut self, f: Pointwise, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| f.apply(x));
        self.push("pointwise", value, Op::Pointwise(f, input), &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.pointwise(Pointwise::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.pointwise(Pointwise::Sigmoid, input)
    }

    pub fn hardtanh(&mut self, input: Var) -> Result<Var> {
        self.pointwise(Pointwise::Hardtanh, input)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of `[C, T]` maps. `b` may also be `[1, T]`, in which
    /// case its single row scales every channel of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (c, t) = x.dims2()?;
        let (cb, tb) = y.dims2()?;
        if tb != t || (cb != c && cb != 1) {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let (xd, yd) = (x.data(), y.data());
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            let yrow = if cb == 1 { 0 } else { ch };
            for i in 0..t {
                out[ch * t + i] = xd[ch * t + i] * yd[yrow * t + i];
            }
        }
        let value = Tensor::new(vec![c, t], out)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.affine(input, factor, 0.0)
    }

    /// `factor * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, factor: f64, shift: f64) -> Result<Var> {
        let value = self.value(input).map(|x| factor * x + shift);
        self.push("affine", value, Op::Affine(input, factor), &[input])
    }

    /// Concatenate `[C_i, T]` maps along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let t = self.value(*first).dims2()?.1;
        let mut data = Vec::new();
        let mut channels = 0;
        for v in inputs {
            let x = self.value(*v);
            let (c, tv) = x.dims2()?;
            if tv != t {
                return Err(Error::dim("concat_channels", format!("time length {tv} vs {t}")));
            }
            channels += c;
            data.extend_from_slice(x.data());
        }
        let value = Tensor::new(vec![channels, t], data)?;
        self.push("concat_channels", value, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Frames `start..start + len` of a `[C, T]` map.
    pub fn slice_time(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (c, t) = x.dims2()?;
        if len == 0 || start + len > t {
            return Err(Error::dim("slice_time", format!("frames {start}..{} of {t}", start + len)));
        }
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            data.extend_from_slice(&x.row(ch)[start..start + len]);
        }
        let value = Tensor::new(vec![c, len], data)?;
        self.push("slice_time", value, Op::SliceTime { input, start }, &[input])
    }

    /// Concatenate `[C, T_i]` maps along the time axis.
    pub fn concat_time(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat_time", "no inputs"))?;
        let c = self.value(*first).dims2()?.0;
        let mut total = 0;
        for v in inputs {
            let (cv, t) = self.value(*v).dims2()?;
            if cv != c {
                return Err(Error::dim("concat_time", format!("{cv} channels vs {c}")));
            }
            total += t;
        }
        let mut data = Vec::with_capacity(c * total);
        for ch in 0..c {
            for v in inputs {
                data.extend_from_slice(self.value(*v).row(ch));
            }
        }
        let value = Tensor::new(vec![c, total], data)?;
        self.push("concat_time", value, Op::ConcatTime(inputs.to_vec()), inputs)
    }

    /// Log-softmax over the channel axis, independently per frame.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, t) = x.dims2()?;
        let xd = x.data();
        let mut out = vec![0.0; c * t];
        for i in 0..t {
            let m = (0..c).map(|ch| xd[ch * t + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (xd[ch * t + i] - m).exp()).sum::<f64>().ln();
            for ch in 0..c {
                out[ch * t + i] = xd[ch * t + i] - lse;
            }
        }
        let value = Tensor::new(vec![c, t], out)?;
        self.push("log_softmax", value, Op::LogSoftmax(input), &[input])
    }

    /// `[C, T] -> [C, 1]` average over time.
    pub fn mean_over_time(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (c, t) = x.dims2()?;
        let data = (0..c).map(|ch| x.row(ch).iter().sum::<f64>() / t as f64).collect();
        let value = Tensor::new(vec![c, 1], data)?;
        self.push("mean_over_time", value, Op::MeanOverTime(input), &[input])
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push("sum", value, Op::Sum(input), &[input])
    }

    /// CTC negative log-likelihood of `target` under `[|A|+1, T]` log-probabilities.
    pub fn ctc_loss(&mut self, logprobs: Var, target: &[usize]) -> Result<Var> {
        let (loss, grad) = ctc::ctc_loss(self.value(logprobs), target)?;
        self.push(
            "ctc_loss",
            Tensor::scalar(loss),
            Op::Ctc {
                input: logprobs,
                grad: grad.into_data(),
            },
            &[logprobs],
        )
    }

    /// Accumulate `d loss / d leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (c_in, t_in) = (x.shape()[0], x.shape()[1]);
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let t_out = node.value.shape()[1];
                let (s, p) = (*stride, *padding);
                if wants(bias) {
                    let gb = accum(adj, *bias, c_out);
                    for o in 0..c_out {
                        gb[o] += g[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
                    }
                }
                if wants(weight) {
                    let gw = accum(adj, *weight, c_out * c_in * k);
                    let xd = x.data();
                    for o in 0..c_out {
                        let grow = &g[o * t_out..(o + 1) * t_out];
                        for c in 0..c_in {
                            let xrow = &xd[c * t_in..(c + 1) * t_in];
                            for kk in 0..k {
                                let (t0, t1) = valid_range(t_in, t_out, kk, s, p);
                                let mut acc = 0.0;
                                for t in t0..t1 {
                                    acc += grow[t] * xrow[t * s + kk - p];
                                }
                                gw[(o * c_in + c) * k + kk] += acc;
                            }
                        }
                    }
                }
                if wants(input) {
                    let wd = w.data();
                    let gx = accum(adj, *input, c_in * t_in);
                    for o in 0..c_out {
                        let grow = &g[o * t_out..(o + 1) * t_out];
                        for c in 0..c_in {
                            let gxrow = &mut gx[c * t_in..(c + 1) * t_in];
                            for kk in 0..k {
                                let wv = wd[(o * c_in + c) * k + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (t0, t1) = valid_range(t_in, t_out, kk, s, p);
                                for t in t0..t1 {
                                    gxrow[t * s + kk - p] += wv * grow[t];
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (c, t) = (node.value.shape()[0], node.value.shape()[1]);
                let gam = self.value(*gamma).data();
                if wants(beta) {
                    let gb = accum(adj, *beta, c);
                    for ch in 0..c {
                        gb[ch] += g[ch * t..(ch + 1) * t].iter().sum::<f64>();
                    }
                }
                if wants(gamma) {
                    let gg = accum(adj, *gamma, c);
                    for ch in 0..c {
                        gg[ch] += (0..t).map(|i| g[ch * t + i] * x_hat[ch * t + i]).sum::<f64>();
                    }
                }
                if wants(input) {
                    let gx = accum(adj, *input, c * t);
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        let grow = &g[ch * t..(ch + 1) * t];
                        let xh = &x_hat[ch * t..(ch + 1) * t];
                        if *batch_stats {
                            let tf = t as f64;
                            let sum_g: f64 = grow.iter().sum();
                            let sum_gx: f64 = grow.iter().zip(xh).map(|(a, b)| a * b).sum();
                            for i in 0..t {
                                gx[ch * t + i] += scale * (grow[i] - sum_g / tf - xh[i] * sum_gx / tf);
                            }
                        } else {
                            for i in 0..t {
                                gx[ch * t + i] += scale * grow[i];
                            }
                        }
                    }
                }
            }
            Op::Pointwise(f, input) => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let gx = accum(adj, *input, x.len());
                for i in 0..x.len() {
                    gx[i] += g[i] * f.derivative(x[i], y[i]);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        let gv = accum(adj, *v, g.len());
                        gv.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let cb = y.shape()[0];
                let (xd, yd) = (x.data(), y.data());
                if wants(a) {
                    let ga = accum(adj, *a, c * t);
                    for ch in 0..c {
                        let yrow = if cb == 1 { 0 } else { ch };
                        for i in 0..t {
                            ga[ch * t + i] += g[ch * t + i] * yd[yrow * t + i];
                        }
                    }
                }
                if wants(b) {
                    let gbv = accum(adj, *b, cb * t);
                    for ch in 0..c {
                        let yrow = if cb == 1 { 0 } else { ch };
                        for i in 0..t {
                            gbv[yrow * t + i] += g[ch * t + i] * xd[ch * t + i];
                        }
                    }
                }
            }
            Op::Affine(input, factor) => {
                let gx = accum(adj, *input, g.len());
                gx.iter_mut().zip(g).for_each(|(p, q)| *p += factor * q);
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for v in inputs {
                    let n = self.value(*v).len();
                    if wants(v) {
                        let gv = accum(adj, *v, n);
                        gv.iter_mut().zip(&g[offset..offset + n]).for_each(|(p, q)| *p += q);
                    }
                    offset += n;
                }
            }
            Op::SliceTime { input, start } => {
                let (c, len) = (node.value.shape()[0], node.value.shape()[1]);
                let t = self.value(*input).shape()[1];
                let gx = accum(adj, *input, c * t);
                for ch in 0..c {
                    for i in 0..len {
                        gx[ch * t + start + i] += g[ch * len + i];
                    }
                }
            }
            Op::ConcatTime(inputs) => {
                let (c, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for v in inputs {
                    let t = self.value(*v).shape()[1];
                    if wants(v) {
                        let gv = accum(adj, *v, c * t);
                        for ch in 0..c {
                            for i in 0..t {
                                gv[ch * t + i] += g[ch * total + offset + i];
                            }
                        }
                    }
                    offset += t;
                }
            }
            Op::LogSoftmax(input) => {
                let y = node.value.data();
                let (c, t) = (node.value.shape()[0], node.value.shape()[1]);
                let gx = accum(adj, *input, c * t);
                for i in 0..t {
                    let total: f64 = (0..c).map(|ch| g[ch * t + i]).sum();
                    for ch in 0..c {
                        gx[ch * t + i] += g[ch * t + i] - y[ch * t + i].exp() * total;
                    }
                }
            }
            Op::MeanOverTime(input) => {
                let (c, t) = self.value(*input).dims2().expect("rank checked in forward");
                let gx = accum(adj, *input, c * t);
                for ch in 0..c {
                    let share = g[ch] / t as f64;
                    gx[ch * t..(ch + 1) * t].iter_mut().for_each(|v| *v += share);
                }
            }
            Op::Sum(input) => {
                let gx = accum(adj, *input, self.value(*input).len());
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Ctc { input, grad } => {
                let gx = accum(adj, *input, grad.len());
                gx.iter_mut().zip(grad).for_each(|(p, q)| *p += g[0] * q);
            }
        }
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (t_in + 2 * padding - kernel) / stride + 1
}

/// Output positions `t` for which input index `t*stride + k - padding` lies in `[0, t_in)`.
fn valid_range(t_in: usize, t_out: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let t0 = if k >= padding { 0 } else { (padding - k).div_ceil(stride) };
    // t*stride + k - padding <= t_in - 1
    let limit = t_in + padding;
    let t1 = if limit > k { ((limit - k - 1) / stride + 1).min(t_out) } else { 0 };
    (t0.min(t1), t1)
}

/// Maximum over elements of `|analytic - central difference| / max(1, |analytic|)`
/// for the scalar function `f` evaluated at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |input: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input, false);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<Vec<f64>> {
        let (c_in, t_in) = x.dims2().unwrap();
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let mut out = vec![vec![0.0; t_out]; c_out];
        for o in 0..c_out {
            for t in 0..t_out {
                let mut acc = b[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < t_in {
                            acc += w.data()[(o * c_in + c) * k + kk] * x.at2(c, pos as usize);
                        }
                    }
                }
                out[o][t] = acc;
            }
        }
        out
    }

    fn conv(x: Vec<Vec<f64>>, w: Tensor, b: Vec<f64>, stride: usize, pad: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_rows(&x), false);
        let wv = tape.leaf(w, false);
        let bv = tape.leaf(Tensor::vector(b), false);
        let y = tape.conv1d(xv, wv, bv, stride, pad)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn conv1d_examples() {
        let w1 = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let y = conv(vec![vec![1.0, 2.0, 3.0]], w1, vec![0.0], 1, 0).unwrap();
        assert_eq!(y.to_rows(), vec![vec![1.0, 2.0, 3.0]]);

        let w2 = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv(vec![vec![1.0, 2.0, 3.0, 4.0]], w2.clone(), vec![0.0], 1, 0).unwrap();
        assert_eq!(y.to_rows(), vec![vec![3.0, 5.0, 7.0]]);
        let y = conv(vec![vec![1.0, 2.0, 3.0, 4.0]], w2, vec![0.0], 2, 0).unwrap();
        assert_eq!(y.to_rows(), vec![vec![3.0, 7.0]]);
    }

    #[test]
    fn conv1d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c_in, c_out, t, k, s, p) in [(3, 2, 9, 3, 1, 1), (2, 4, 10, 5, 2, 2), (1, 1, 4, 4, 3, 0), (2, 3, 5, 3, 2, 3)] {
            let x = Tensor::randn(&[c_in, t], 1.0, &mut rng);
            let w = Tensor::randn(&[c_out, c_in, k], 1.0, &mut rng);
            let b: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
            let expected = naive_conv(&x, &w, &b, s, p);
            let got = conv(x.to_rows(), w, b, s, p).unwrap();
            for (r, e) in got.to_rows().iter().zip(&expected) {
                for (a, b) in r.iter().zip(e) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let w = Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap();
        let err = conv(vec![vec![1.0, 2.0]], w, vec![0.0], 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "conv1d", .. }));
    }

    #[test]
    fn same_padding_preserves_length() {
        for k in [1, 3, 5, 7, 15] {
            assert_eq!(conv_out_len(20, k, 1, (k - 1) / 2), 20);
        }
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![3.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let (y, stats) = tape.batchnorm1d(x, g, b, BatchNormMode::Train).unwrap();
        assert!(tape.value(y).row(0).iter().all(|&v| v == 0.0));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0, 3.0]);
        assert_eq!(stats.var, vec![0.0, 2.0]);

        let g0 = tape.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let b0 = tape.leaf(Tensor::vector(vec![0.5, -2.0]), false);
        let (y, _) = tape.batchnorm1d(x, g0, b0, BatchNormMode::Train).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.5; 5]);
        assert_eq!(tape.value(y).row(1), &[-2.0; 5]);
    }

    #[test]
    fn batchnorm_train_output_has_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[4, 16], 3.0, &mut rng), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 4]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0; 4]), false);
        let (y, stats) = tape.batchnorm1d(x, g, b, BatchNormMode::Train).unwrap();
        let stats = stats.unwrap();
        let out = tape.value(y);
        for ch in 0..4 {
            let row = out.row(ch);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-10);
            // Undo the epsilon to compare against unit variance.
            let v_unbiased = v * (stats.var[ch] + BN_EPS) / stats.var[ch];
            assert!((v_unbiased - 1.0).abs() < 1e-10, "{v_unbiased}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut stats = RunningStats::new(1);
        stats.update(
            &BatchStats {
                mean: vec![10.0],
                var: vec![4.0],
            },
            BN_MOMENTUM,
        );
        assert!((stats.mean[0] - 1.0).abs() < 1e-15);
        assert!((stats.var[0] - 1.3).abs() < 1e-15);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.3]]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        let (y, none) = tape.batchnorm1d(x, g, b, BatchNormMode::Eval(&stats)).unwrap();
        assert!(none.is_none());
        let expected = 1.3 / (1.3 + BN_EPS).sqrt();
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-12);
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-20.0) - 2.061_153_618_190_204_4e-9).abs() < 1e-20);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), false);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = tape.leaf(Tensor::vector(vec![-3.0, 0.25, 7.0]), false);
        let h = tape.hardtanh(x).unwrap();
        assert_eq!(tape.value(h).data(), &[-1.0, 0.25, 1.0]);
    }

    #[test]
    fn structural_ops() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 3]), false);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[5, 3]);
        let d = tape.leaf(Tensor::zeros(&[3, 4]), false);
        assert!(tape.concat_channels(&[a, d]).is_err());
        assert!(tape.add(a, b).is_err());

        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let z = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));

        let u = tape.leaf(Tensor::full(&[4, 2], 0.7), false);
        let l = tape.log_softmax(u).unwrap();
        for v in tape.value(l).data() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let m = tape.mean_over_time(x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, 3.5]);
    }

    #[test]
    fn log_softmax_frames_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[7, 20], 10.0, &mut rng), false);
        let y = tape.log_softmax(x).unwrap();
        let y = tape.value(y);
        for t in 0..20 {
            let s: f64 = (0..7).map(|c| y.at2(c, t).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        // Accumulates without zeroing.
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e308]), false);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
        assert!(grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap() < 1e-10);
    }
}
