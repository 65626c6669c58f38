//! Dense tensors and a fixed set of layers with explicit backward passes.
//!
//! Layout conventions (batch first, row major):
//! - `Dense`: `[n, inputs] -> [n, outputs]`, weight `[outputs, inputs]`
//! - `Conv1d`: `[n, c_in, len] -> [n, c_out, (len - k) / stride + 1]`, weight
//!   `[c_out, c_in, k]`, no padding
//! - `BatchNorm1d`: `[n, c]` or `[n, c, len]`, statistics per channel
//! - `GlobalAvgPool`: `[n, c, len] -> [n, c]`
//! - `Relu`, `Softmax`: any rank, softmax over the last axis

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::invalid(format!("zero-sized shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Size of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    BatchNorm1d {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    GlobalAvgPool,
    Softmax,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs } if inputs == 0 || outputs == 0 => {
                Err(Error::config("dense widths must be >= 1"))
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                Err(Error::config("conv1d sizes must be >= 1"))
            }
            LayerSpec::BatchNorm1d {
                channels,
                momentum,
                eps,
            } if channels == 0 || !(0.0..=1.0).contains(&momentum) || eps <= 0.0 => {
                Err(Error::config("batchnorm needs channels >= 1, momentum in [0,1], eps > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Output shape for a given input shape (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::config(format!("{self:?} cannot take input of shape {input:?}"));
        match *self {
            LayerSpec::Dense { inputs, outputs } => match input {
                [n, w] if *w == inputs => Ok(vec![*n, outputs]),
                _ => Err(mismatch()),
            },
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => match input {
                [n, c, len] if *c == in_channels && kernel <= *len => {
                    Ok(vec![*n, out_channels, (len - kernel) / stride + 1])
                }
                _ => Err(mismatch()),
            },
            LayerSpec::BatchNorm1d { channels, .. } => match input {
                [_, c] | [_, c, _] if *c == channels => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            LayerSpec::GlobalAvgPool => match input {
                [n, c, _] => Ok(vec![*n, *c]),
                _ => Err(mismatch()),
            },
            LayerSpec::Relu | LayerSpec::Softmax => {
                if input.is_empty() {
                    Err(mismatch())
                } else {
                    Ok(input.to_vec())
                }
            }
        }
    }

    /// Shapes and names of the trainable parameter blocks this layer owns.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm1d { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub values: Tensor,
    pub grad: Tensor,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, values: Tensor) -> Self {
        let grad = Tensor::zeros(values.shape());
        ParamBlock {
            name: name.into(),
            values,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// BatchNorm running statistics (not trainable, but averaged in federated mode).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched.
    TrainFrozen,
    /// Running statistics.
    Infer,
}

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Dense {
        input: Tensor,
    },
    Conv1d {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
    Softmax {
        output: Tensor,
    },
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let cols = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn param_check(spec: &LayerSpec, params: &[ParamBlock]) -> Result<()> {
    let shapes = spec.param_shapes();
    if shapes.len() != params.len()
        || shapes
            .iter()
            .zip(params)
            .any(|((_, s), p)| p.values.shape() != s.as_slice())
    {
        return Err(Error::config(format!(
            "parameter blocks do not match {spec:?}"
        )));
    }
    Ok(())
}

fn channel_geometry(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, c] => (*n, *c, 1),
        [n, c, l] => (*n, *c, *l),
        _ => unreachable!("validated by output_shape"),
    }
}

/// Forward pass of one layer.
pub fn layer_forward(
    spec: &LayerSpec,
    params: &[ParamBlock],
    running: Option<&mut RunningStats>,
    input: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    param_check(spec, params)?;
    let out_shape = spec.output_shape(input.shape())?;
    if input.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let x = input.data();
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let w = params[0].values.data();
            let b = params[1].values.data();
            let n = input.rows();
            let mut y = vec![0.0; n * outputs];
            for (xr, yr) in x.chunks(inputs).zip(y.chunks_mut(outputs)) {
                for (o, yo) in yr.iter_mut().enumerate() {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    *yo = b[o] + dot(wr, xr);
                }
            }
            Ok((
                Tensor::new(out_shape, y)?,
                Cache::Dense {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let w = params[0].values.data();
            let b = params[1].values.data();
            let (n, len_in) = (input.shape()[0], input.shape()[2]);
            let len_out = out_shape[2];
            let mut y = vec![0.0; n * out_channels * len_out];
            let plen = phase_len(len_in, stride);
            let mut phases = vec![0.0; in_channels * stride * plen];
            for s in 0..n {
                let xs = &x[s * in_channels * len_in..(s + 1) * in_channels * len_in];
                split_phases(xs, in_channels, len_in, stride, &mut phases);
                for o in 0..out_channels {
                    let yo = &mut y[(s * out_channels + o) * len_out..][..len_out];
                    yo.fill(b[o]);
                    for c in 0..in_channels {
                        let wk = &w[(o * in_channels + c) * kernel..][..kernel];
                        for (j, &wj) in wk.iter().enumerate() {
                            let ph = &phases[(c * stride + j % stride) * plen + j / stride..][..len_out];
                            axpy(wj, ph, yo);
                        }
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, y)?,
                Cache::Conv1d {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::Relu => {
            let y = x.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
            Ok((
                Tensor::new(out_shape, y)?,
                Cache::Relu {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::BatchNorm1d {
            channels,
            momentum,
            eps,
        } => {
            let running = running
                .ok_or_else(|| Error::config("batchnorm layer without running statistics"))?;
            let gamma = params[0].values.data();
            let beta = params[1].values.data();
            let (n, c_count, len) = channel_geometry(input.shape());
            let count = (n * len) as f64;
            let batch_stats = mode != Mode::Infer;
            let (mean, var) = if batch_stats {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for s in 0..n {
                    for c in 0..c_count {
                        let xs = &x[(s * c_count + c) * len..][..len];
                        mean[c] += xs.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for c in 0..c_count {
                        let xs = &x[(s * c_count + c) * len..][..len];
                        var[c] += xs.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                if mode == Mode::Train {
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    for c in 0..channels {
                        running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * mean[c];
                        running.var[c] =
                            (1.0 - momentum) * running.var[c] + momentum * var[c] * unbiased;
                    }
                }
                (mean, var)
            } else {
                (running.mean.clone(), running.var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; x.len()];
            let mut y = vec![0.0; x.len()];
            for s in 0..n {
                for c in 0..c_count {
                    let base = (s * c_count + c) * len;
                    for i in base..base + len {
                        xhat[i] = (x[i] - mean[c]) * inv_std[c];
                        y[i] = gamma[c] * xhat[i] + beta[c];
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, y)?,
                Cache::BatchNorm {
                    xhat: Tensor::new(input.shape().to_vec(), xhat)?,
                    inv_std,
                    batch_stats,
                },
            ))
        }
        LayerSpec::GlobalAvgPool => {
            let len = input.shape()[2];
            let y = x
                .chunks(len)
                .map(|r| r.iter().sum::<f64>() / len as f64)
                .collect();
            Ok((
                Tensor::new(out_shape, y)?,
                Cache::GlobalAvgPool {
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Softmax => {
            let y = softmax(input);
            Ok((y.clone(), Cache::Softmax { output: y }))
        }
    }
}

/// Backward pass of one layer. Returns the input gradient; parameter
/// gradients are added into `params[..].grad` when `accumulate` is set.
pub fn layer_backward(
    spec: &LayerSpec,
    params: &mut [ParamBlock],
    cache: &Cache,
    grad_output: &Tensor,
    accumulate: bool,
) -> Result<Tensor> {
    param_check(spec, params)?;
    let bad = || Error::invalid(format!("cache or gradient does not match {spec:?}"));
    let dy = grad_output.data();
    match (*spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, Cache::Dense { input }) => {
            let n = input.rows();
            if grad_output.shape() != [n, outputs] {
                return Err(bad());
            }
            let x = input.data();
            let mut dx = vec![0.0; n * inputs];
            {
                let w = params[0].values.data();
                for (dyr, dxr) in dy.chunks(outputs).zip(dx.chunks_mut(inputs)) {
                    for (o, &g) in dyr.iter().enumerate() {
                        if g != 0.0 {
                            axpy(g, &w[o * inputs..(o + 1) * inputs], dxr);
                        }
                    }
                }
            }
            if accumulate {
                let (wblock, bblock) = params.split_at_mut(1);
                let dw = wblock[0].grad.data_mut();
                let db = bblock[0].grad.data_mut();
                for (dyr, xr) in dy.chunks(outputs).zip(x.chunks(inputs)) {
                    for (o, &g) in dyr.iter().enumerate() {
                        db[o] += g;
                        if g != 0.0 {
                            axpy(g, xr, &mut dw[o * inputs..(o + 1) * inputs]);
                        }
                    }
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            },
            Cache::Conv1d { input },
        ) => {
            let out_shape = spec.output_shape(input.shape())?;
            if grad_output.shape() != out_shape.as_slice() {
                return Err(bad());
            }
            let (n, len_in, len_out) = (input.shape()[0], input.shape()[2], out_shape[2]);
            let x = input.data();
            let mut dx = vec![0.0; x.len()];
            let plen = phase_len(len_in, stride);
            let mut dphases = vec![0.0; in_channels * stride * plen];
            {
                let w = params[0].values.data();
                for s in 0..n {
                    dphases.fill(0.0);
                    for o in 0..out_channels {
                        let g = &dy[(s * out_channels + o) * len_out..][..len_out];
                        for c in 0..in_channels {
                            let wk = &w[(o * in_channels + c) * kernel..][..kernel];
                            for (j, &wj) in wk.iter().enumerate() {
                                let ph = &mut dphases[(c * stride + j % stride) * plen + j / stride..][..len_out];
                                axpy(wj, g, ph);
                            }
                        }
                    }
                    let dxs = &mut dx[s * in_channels * len_in..(s + 1) * in_channels * len_in];
                    merge_phases(&dphases, in_channels, len_in, stride, dxs);
                }
            }
            if accumulate {
                let (wblock, bblock) = params.split_at_mut(1);
                let dw = wblock[0].grad.data_mut();
                let db = bblock[0].grad.data_mut();
                let mut phases = vec![0.0; in_channels * stride * plen];
                for s in 0..n {
                    let xs = &x[s * in_channels * len_in..(s + 1) * in_channels * len_in];
                    split_phases(xs, in_channels, len_in, stride, &mut phases);
                    for o in 0..out_channels {
                        let g = &dy[(s * out_channels + o) * len_out..][..len_out];
                        db[o] += g.iter().sum::<f64>();
                        for c in 0..in_channels {
                            let dwk = &mut dw[(o * in_channels + c) * kernel..][..kernel];
                            for (j, dwj) in dwk.iter_mut().enumerate() {
                                let ph = &phases[(c * stride + j % stride) * plen + j / stride..][..len_out];
                                *dwj += dot(g, ph);
                            }
                        }
                    }
                }
            }
            Tensor::new(input.shape().to_vec(), dx)
        }
        (LayerSpec::Relu, Cache::Relu { input }) => {
            if grad_output.shape() != input.shape() {
                return Err(bad());
            }
            let dx = input
                .data()
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::new(input.shape().to_vec(), dx)
        }
        (
            LayerSpec::BatchNorm1d { channels, .. },
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            if grad_output.shape() != xhat.shape() {
                return Err(bad());
            }
            let (n, c_count, len) = channel_geometry(xhat.shape());
            let xh = xhat.data();
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for s in 0..n {
                for c in 0..c_count {
                    let base = (s * c_count + c) * len;
                    for i in base..base + len {
                        sum_dy[c] += dy[i];
                        sum_dy_xhat[c] += dy[i] * xh[i];
                    }
                }
            }
            let count = (n * len) as f64;
            let gamma = params[0].values.data().to_vec();
            let mut dx = vec![0.0; xh.len()];
            for s in 0..n {
                for c in 0..c_count {
                    let base = (s * c_count + c) * len;
                    let scale = gamma[c] * inv_std[c];
                    for i in base..base + len {
                        dx[i] = if *batch_stats {
                            scale * (dy[i] - sum_dy[c] / count - xh[i] * sum_dy_xhat[c] / count)
                        } else {
                            scale * dy[i]
                        };
                    }
                }
            }
            if accumulate {
                let (gblock, bblock) = params.split_at_mut(1);
                for c in 0..channels {
                    gblock[0].grad.data_mut()[c] += sum_dy_xhat[c];
                    bblock[0].grad.data_mut()[c] += sum_dy[c];
                }
            }
            Tensor::new(xhat.shape().to_vec(), dx)
        }
        (LayerSpec::GlobalAvgPool, Cache::GlobalAvgPool { input_shape }) => {
            let (n, c, len) = (input_shape[0], input_shape[1], input_shape[2]);
            if grad_output.shape() != [n, c] {
                return Err(bad());
            }
            let mut dx = Vec::with_capacity(n * c * len);
            for &g in dy {
                dx.extend(std::iter::repeat_n(g / len as f64, len));
            }
            Tensor::new(input_shape.clone(), dx)
        }
        (LayerSpec::Softmax, Cache::Softmax { output }) => {
            if grad_output.shape() != output.shape() {
                return Err(bad());
            }
            let cols = *output.shape().last().unwrap();
            let mut dx = vec![0.0; dy.len()];
            for ((yr, gr), dr) in output
                .data()
                .chunks(cols)
                .zip(dy.chunks(cols))
                .zip(dx.chunks_mut(cols))
            {
                let inner = dot(yr, gr);
                for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - inner);
                }
            }
            Tensor::new(output.shape().to_vec(), dx)
        }
        _ => Err(bad()),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Samples per phase when a row is split by `stride`.
fn phase_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// `out[(c*stride + p)*plen + u] = x[c*len + u*stride + p]`, zero padded.
fn split_phases(x: &[f64], channels: usize, len: usize, stride: usize, out: &mut [f64]) {
    let plen = phase_len(len, stride);
    out.fill(0.0);
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for (i, &v) in xc.iter().enumerate() {
            out[(c * stride + i % stride) * plen + i / stride] = v;
        }
    }
}

/// Inverse of `split_phases`, adding into `x`.
fn merge_phases(phases: &[f64], channels: usize, len: usize, stride: usize, x: &mut [f64]) {
    let plen = phase_len(len, stride);
    for c in 0..channels {
        let xc = &mut x[c * len..(c + 1) * len];
        for (i, v) in xc.iter_mut().enumerate() {
            *v += phases[(c * stride + i % stride) * plen + i / stride];
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A layer together with its parameters and (for BatchNorm) running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<ParamBlock>,
    pub running: Option<RunningStats>,
}

impl Layer {
    /// He-normal weights, zero biases, unit BatchNorm scale.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let fan_in = match spec {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv1d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel,
            _ => 1,
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let size = shape.iter().product();
                let data = match name {
                    "weight" => (0..size).map(|_| normal.sample(rng)).collect(),
                    "gamma" => vec![1.0; size],
                    _ => vec![0.0; size],
                };
                ParamBlock::new(name, Tensor::new(shape, data).expect("shape from spec"))
            })
            .collect();
        let running = match spec {
            LayerSpec::BatchNorm1d { channels, .. } => Some(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
            _ => None,
        };
        Ok(Layer {
            spec,
            params,
            running,
        })
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        layer_forward(&self.spec, &self.params, self.running.as_mut(), input, mode)
    }

    pub fn backward(&mut self, cache: &Cache, grad_output: &Tensor, accumulate: bool) -> Result<Tensor> {
        layer_backward(&self.spec, &mut self.params, cache, grad_output, accumulate)
    }
}

/// A plain feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&s| Layer::init(s, rng))
            .collect::<Result<_>>()?;
        Ok(Stack { layers })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.spec.output_shape(&shape))
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(&mut self, caches: &[Cache], grad_output: &Tensor, accumulate: bool) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(Error::invalid("cache count does not match layer count"));
        }
        let mut g = grad_output.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, &g, accumulate)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamBlock> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn running_stats(&self) -> impl Iterator<Item = &RunningStats> {
        self.layers.iter().filter_map(|l| l.running.as_ref())
    }

    pub fn running_stats_mut(&mut self) -> impl Iterator<Item = &mut RunningStats> {
        self.layers.iter_mut().filter_map(|l| l.running.as_mut())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.values.len()).sum()
    }

    /// All trainable values, concatenated in layer order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.values.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("flat parameter length mismatch"));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.values.len();
            p.values.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// `values -= stepsize * grad`, then zero the gradients.
pub fn sgd_update<'a>(params: impl IntoIterator<Item = &'a mut ParamBlock>, stepsize: f64) -> Result<()> {
    if !(stepsize > 0.0) || !stepsize.is_finite() {
        return Err(Error::config(format!("stepsize must be positive, got {stepsize}")));
    }
    for p in params {
        let ParamBlock { values, grad, .. } = p;
        for (v, g) in values.data_mut().iter_mut().zip(grad.data_mut()) {
            *v -= stepsize * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

/// Relative error of the analytic gradient against central differences at
/// the chosen coordinates: `max |a - n| / max(floor, |n|)`.
///
/// `eval` returns the loss and its analytic gradient at the given point.
pub fn finite_diff_check_coords<F>(
    mut eval: F,
    params: &[f64],
    step: f64,
    coords: &[usize],
    floor: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let (loss, analytic) = eval(params);
    if !loss.is_finite() {
        return Err(Error::invalid("loss is not finite"));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid("gradient length differs from parameter length"));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = eval(&probe).0;
        probe[i] = orig - step;
        let minus = eval(&probe).0;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::invalid("loss is not finite"));
        }
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(floor));
    }
    Ok(worst)
}

pub fn finite_diff_check<F>(eval: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(eval, params, step, &coords, 1e-8)
}
