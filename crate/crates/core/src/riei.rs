//! Receiver-independent emitter identification model.
//!
//! A feature extractor (FED) maps a frame to `[z_emitter, z_receiver]`. The
//! emitter classifier (EC) reads `z_emitter`, the receiver classifier (RC)
//! reads `z_receiver`. Training alternates two steps per minibatch:
//!
//! 1. classifier step: one SGD step on the cross-entropy loss for EC, RC and
//!    an intermediate FED update, all gradients taken at the same point;
//! 2. feature step: one SGD step on `lambda1 * L_MI - lambda2 * L_IE` for the
//!    FED only, with EC and RC frozen.
//!
//! `L_IE` is the entropy of the cross-fed outputs (EC on `z_receiver`, RC on
//! `z_emitter`) and `L_MI` the absolute cosine between the two feature parts.

use crate::dsp;
use crate::error::{Error, Result};
use crate::numerics::{sgd_update, softmax_in_place, LayerSpec, Mode, Stack, Tensor};
use crate::rng::Stream;
use crate::synth::LabeledSample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum InputRepr {
    /// `[2, L]`: I row then Q row.
    Iq,
    /// Hann STFT magnitudes, `[bins, frames]`.
    Spectrogram { window_len: usize, hop: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input: InputRepr,
    pub frame_len: usize,
    pub conv: Vec<ConvSpec>,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Dense+ReLU widths between pooling and the feature projection.
    pub fed_hidden: Vec<usize>,
    pub feature_emitter: usize,
    pub feature_receiver: usize,
    pub head_hidden: Vec<usize>,
    pub emitters: usize,
    pub receivers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input: InputRepr::Iq,
            frame_len: 256,
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 7,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                },
            ],
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            fed_hidden: Vec::new(),
            feature_emitter: 32,
            feature_receiver: 32,
            head_hidden: vec![32, 32],
            emitters: 4,
            receivers: 3,
        }
    }
}

impl Architecture {
    pub fn feature_width(&self) -> usize {
        self.feature_emitter + self.feature_receiver
    }

    /// `(channels, length)` of one network input.
    pub fn input_shape(&self) -> (usize, usize) {
        match self.input {
            InputRepr::Iq => (2, self.frame_len),
            InputRepr::Spectrogram { window_len, hop } => {
                let frames = if hop == 0 || window_len > self.frame_len {
                    0
                } else {
                    (self.frame_len - window_len) / hop + 1
                };
                (window_len, frames)
            }
        }
    }

    pub fn fed_specs(&self) -> Vec<LayerSpec> {
        let (mut channels, _) = self.input_shape();
        let mut specs = Vec::new();
        for c in &self.conv {
            specs.push(LayerSpec::Conv1d {
                in_channels: channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
            });
            if self.batch_norm {
                specs.push(LayerSpec::BatchNorm1d {
                    channels: c.out_channels,
                    momentum: self.bn_momentum,
                    eps: self.bn_eps,
                });
            }
            specs.push(LayerSpec::Relu);
            channels = c.out_channels;
        }
        let mut width = if self.conv.is_empty() {
            let (c, l) = self.input_shape();
            c * l
        } else {
            specs.push(LayerSpec::GlobalAvgPool);
            channels
        };
        for &h in &self.fed_hidden {
            specs.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs: self.feature_width(),
        });
        specs
    }

    pub fn head_specs(&self, inputs: usize, outputs: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = inputs;
        for &h in &self.head_hidden {
            specs.push(LayerSpec::Dense { inputs: width, outputs: h });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense { inputs: width, outputs });
        specs
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_emitter == 0 || self.feature_receiver == 0 {
            return Err(Error::config("feature split widths must be >= 1"));
        }
        if self.emitters < 2 || self.receivers < 2 {
            return Err(Error::config("need at least 2 emitters and 2 receivers"));
        }
        if let InputRepr::Spectrogram { window_len, hop } = self.input {
            if hop == 0 || window_len == 0 || window_len > self.frame_len {
                return Err(Error::config("spectrogram window must fit the frame and hop >= 1"));
            }
        }
        let (c, l) = self.input_shape();
        let input = if self.conv.is_empty() { vec![1, c * l] } else { vec![1, c, l] };
        self.fed_specs()
            .iter()
            .try_fold(input, |shape, s| {
                s.validate()?;
                s.output_shape(&shape)
            })
            .map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Classifier step then feature step.
    Alternating,
    /// One simultaneous SGD step on `L_CE + lambda1 L_MI - lambda2 L_IE`.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta_f: f64,
    pub eta_e: f64,
    pub eta_r: f64,
    pub batch: usize,
    pub epochs: usize,
    pub epsilon_log: f64,
    pub epsilon_norm: f64,
    pub reduction: Reduction,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.2,
            lambda2: 1.2,
            eta_f: 1e-4,
            eta_e: 1e-4,
            eta_r: 1e-4,
            batch: 64,
            epochs: 30,
            epsilon_log: 1e-12,
            epsilon_norm: 1e-12,
            reduction: Reduction::Mean,
            scheme: Scheme::Alternating,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta_f", self.eta_f), ("eta_e", self.eta_e), ("eta_r", self.eta_r)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be nonnegative"));
        }
        if self.batch < 2 {
            return Err(Error::config("batch must be >= 2"));
        }
        if !(self.epsilon_log > 0.0) || !(self.epsilon_norm > 0.0) {
            return Err(Error::config("epsilons must be positive"));
        }
        Ok(())
    }

    fn scale(&self, n: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// A minibatch: inputs `[n, channels, len]` (or `[n, width]` for dense-only
/// extractors) with 0-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub emitters: Vec<usize>,
    pub receivers: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, emitters: Vec<usize>, receivers: Vec<usize>) -> Result<Self> {
        if inputs.rows() != emitters.len() || emitters.len() != receivers.len() {
            return Err(Error::invalid("batch inputs and labels differ in length"));
        }
        Ok(Batch {
            inputs,
            emitters,
            receivers,
        })
    }

    pub fn from_samples(samples: &[&LabeledSample], arch: &Architecture) -> Result<Self> {
        let inputs = encode_inputs(samples.iter().map(|s| &s.frame), arch)?;
        Batch::new(
            inputs,
            samples.iter().map(|s| s.emitter).collect(),
            samples.iter().map(|s| s.receiver).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.emitters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitters.is_empty()
    }

    fn check_labels(&self, arch: &Architecture) -> Result<()> {
        if self.emitters.iter().any(|&m| m >= arch.emitters) || self.receivers.iter().any(|&k| k >= arch.receivers) {
            return Err(Error::invalid("label out of range"));
        }
        Ok(())
    }
}

/// Converts frames to the network input layout of `arch`.
pub fn encode_inputs<'a>(
    frames: impl IntoIterator<Item = &'a crate::synth::IqFrame>,
    arch: &Architecture,
) -> Result<Tensor> {
    let (c, l) = arch.input_shape();
    let mut data = Vec::new();
    let mut n = 0;
    for f in frames {
        if f.len() != arch.frame_len {
            return Err(Error::config(format!(
                "frame length {} does not match architecture {}",
                f.len(),
                arch.frame_len
            )));
        }
        match arch.input {
            InputRepr::Iq => data.extend(f.to_rows()),
            InputRepr::Spectrogram { window_len, hop } => {
                let s = dsp::stft(f, window_len, hop, dsp::Window::Hann)?;
                // channels = frequency bins, length = time
                for b in 0..s.bins {
                    data.extend((0..s.frames).map(|t| s.magnitudes[t * s.bins + b]));
                }
            }
        }
        n += 1;
    }
    let shape = if arch.conv.is_empty() { vec![n, c * l] } else { vec![n, c, l] };
    Tensor::new(shape, data)
}

/// Disentangled representation of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub z_emitter: Vec<f64>,
    pub z_receiver: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ce: f64,
    pub ie: f64,
    pub mi: f64,
}

/// Per-epoch training record. Losses are per-sample means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub ie: Option<f64>,
    pub mi: Option<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Receivers whose samples reached a parameter update.
    pub trained_receivers: BTreeSet<usize>,
}

fn split_features(z: &Tensor, fe: usize) -> Result<(Tensor, Tensor)> {
    let n = z.rows();
    let w = z.row_len();
    let fr = w - fe;
    let mut e = Vec::with_capacity(n * fe);
    let mut r = Vec::with_capacity(n * fr);
    for row in z.data().chunks(w) {
        e.extend_from_slice(&row[..fe]);
        r.extend_from_slice(&row[fe..]);
    }
    Ok((Tensor::new(vec![n, fe], e)?, Tensor::new(vec![n, fr], r)?))
}

fn join_features(de: &Tensor, dr: &Tensor) -> Result<Tensor> {
    let n = de.rows();
    let (fe, fr) = (de.row_len(), dr.row_len());
    let mut out = Vec::with_capacity(n * (fe + fr));
    for i in 0..n {
        out.extend_from_slice(de.row(i));
        out.extend_from_slice(dr.row(i));
    }
    Tensor::new(vec![n, fe + fr], out)
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Sum over rows of `-ln(softmax(l)[y] + eps)` and its gradient (times `scale`).
/// Also returns the number of rows whose argmax equals the label.
fn cross_entropy(logits: &Tensor, labels: &[usize], eps: f64, scale: f64) -> Result<(f64, Tensor, usize)> {
    let cols = logits.row_len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut correct = 0;
    for (i, (row, g)) in logits.data().chunks(cols).zip(grad.chunks_mut(cols)).enumerate() {
        let y = labels[i];
        if argmax(row) == y {
            correct += 1;
        }
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        total -= (p[y] + eps).ln();
        let w = p[y] / (p[y] + eps);
        for (j, gj) in g.iter_mut().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            *gj = -scale * w * (delta - p[j]);
        }
    }
    Ok((total, Tensor::new(logits.shape().to_vec(), grad)?, correct))
}

/// Sum over rows of `-sum_j p_j ln(p_j + eps)` with `p = softmax(l)`, and its
/// gradient with respect to the logits (times `scale`).
fn entropy(logits: &Tensor, eps: f64, scale: f64) -> Result<(f64, Tensor)> {
    let cols = logits.row_len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (row, g) in logits.data().chunks(cols).zip(grad.chunks_mut(cols)) {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        let dp: Vec<f64> = p.iter().map(|&pj| -(pj + eps).ln() - pj / (pj + eps)).collect();
        total += p.iter().map(|&pj| -pj * (pj + eps).ln()).sum::<f64>();
        let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for ((gj, &pj), &dj) in g.iter_mut().zip(&p).zip(&dp) {
            *gj = scale * pj * (dj - inner);
        }
    }
    Ok((total, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Per-sample `|<e, r>| / max(eps, |e||r|)`.
pub fn abs_cosine(e: &[f64], r: &[f64], eps: f64) -> f64 {
    let s: f64 = e.iter().zip(r).map(|(a, b)| a * b).sum();
    let ne = e.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
    s.abs() / (ne * nr).max(eps)
}

/// Sum over rows of the absolute cosine between the two feature parts and
/// its gradient with respect to `[e, r]` (times `scale`).
fn mutual_independence(e: &Tensor, r: &Tensor, eps: f64, scale: f64) -> Result<(f64, Tensor, Tensor)> {
    let f = e.row_len();
    if r.row_len() != f {
        return Err(Error::config(
            "the independence loss needs equal emitter and receiver feature widths",
        ));
    }
    let mut ge = vec![0.0; e.len()];
    let mut gr = vec![0.0; r.len()];
    let mut total = 0.0;
    for i in 0..e.rows() {
        let (ev, rv) = (e.row(i), r.row(i));
        let s: f64 = ev.iter().zip(rv).map(|(a, b)| a * b).sum();
        let ne2 = ev.iter().map(|a| a * a).sum::<f64>();
        let nr2 = rv.iter().map(|a| a * a).sum::<f64>();
        let d = (ne2 * nr2).sqrt();
        let (gev, grv) = (&mut ge[i * f..(i + 1) * f], &mut gr[i * f..(i + 1) * f]);
        if d > eps {
            let c = s / d;
            total += c.abs();
            let sign = if c > 0.0 {
                1.0
            } else if c < 0.0 {
                -1.0
            } else {
                0.0
            };
            for j in 0..f {
                gev[j] = scale * sign * (rv[j] / d - c * ev[j] / ne2);
                grv[j] = scale * sign * (ev[j] / d - c * rv[j] / nr2);
            }
        } else {
            total += s.abs() / eps;
            let sign = s.signum() * if s == 0.0 { 0.0 } else { 1.0 };
            for j in 0..f {
                gev[j] = scale * sign * rv[j] / eps;
                grv[j] = scale * sign * ev[j] / eps;
            }
        }
    }
    Ok((
        total,
        Tensor::new(e.shape().to_vec(), ge)?,
        Tensor::new(r.shape().to_vec(), gr)?,
    ))
}

/// Index of the largest entry, ties toward the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn diverged(epoch: usize, what: &str) -> Error {
    Error::Diverged {
        epoch,
        message: format!("{what} is not finite"),
    }
}

/// Which parameter group a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Fed,
    Emitter,
    Receiver,
}

/// FED, EC and RC parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RieiModel {
    pub arch: Architecture,
    pub fed: Stack,
    pub ec: Stack,
    pub rc: Stack,
}

impl RieiModel {
    pub fn new(arch: Architecture, rng: &mut Stream) -> Result<Self> {
        arch.validate()?;
        let fed = Stack::init(&arch.fed_specs(), rng)?;
        let ec = Stack::init(&arch.head_specs(arch.feature_emitter, arch.emitters), rng)?;
        let rc = Stack::init(&arch.head_specs(arch.feature_receiver, arch.receivers), rng)?;
        Ok(RieiModel { arch, fed, ec, rc })
    }

    pub fn parts(&self) -> [(Part, &Stack); 3] {
        [(Part::Fed, &self.fed), (Part::Emitter, &self.ec), (Part::Receiver, &self.rc)]
    }

    pub fn parts_mut(&mut self) -> [(Part, &mut Stack); 3] {
        [
            (Part::Fed, &mut self.fed),
            (Part::Emitter, &mut self.ec),
            (Part::Receiver, &mut self.rc),
        ]
    }

    pub fn zero_grad(&mut self) {
        self.fed.zero_grad();
        self.ec.zero_grad();
        self.rc.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.fed.param_count() + self.ec.param_count() + self.rc.param_count()
    }

    /// FED output split into emitter and receiver parts.
    pub fn fed_forward(&mut self, batch: &Batch, mode: Mode) -> Result<Vec<FeaturePair>> {
        let (z, _) = self.fed.forward(&batch.inputs, mode)?;
        let (e, r) = split_features(&z, self.arch.feature_emitter)?;
        Ok((0..z.rows())
            .map(|i| FeaturePair {
                z_emitter: e.row(i).to_vec(),
                z_receiver: r.row(i).to_vec(),
            })
            .collect())
    }

    fn features_infer(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut fed = self.fed.clone();
        Ok(fed.forward(inputs, Mode::Infer)?.0)
    }

    /// Feature pairs in inference mode.
    pub fn feature_pairs(&self, inputs: &Tensor) -> Result<Vec<FeaturePair>> {
        let z = self.features_infer(inputs)?;
        let (e, r) = split_features(&z, self.arch.feature_emitter)?;
        Ok((0..z.rows())
            .map(|i| FeaturePair {
                z_emitter: e.row(i).to_vec(),
                z_receiver: r.row(i).to_vec(),
            })
            .collect())
    }

    /// Full FED output `[n, F_E + F_R]` in inference mode.
    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        self.features_infer(inputs)
    }

    fn head_probs(head: &Stack, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let width = z.first().map_or(0, Vec::len);
        let input = Tensor::new(vec![z.len(), width], z.concat())?;
        let mut head = head.clone();
        let (logits, _) = head.forward(&input, Mode::Infer)?;
        Ok(logits
            .data()
            .chunks(logits.row_len())
            .map(|r| {
                let mut p = r.to_vec();
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    /// EC probabilities for emitter features.
    pub fn ec_forward(&self, z_emitter: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Self::head_probs(&self.ec, z_emitter)
    }

    /// RC probabilities for receiver features.
    pub fn rc_forward(&self, z_receiver: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Self::head_probs(&self.rc, z_receiver)
    }

    /// All three losses (summed over the batch) without touching any state.
    pub fn losses(&self, batch: &Batch, cfg: &TrainConfig, mode: Mode) -> Result<LossValues> {
        let mode = if mode == Mode::Train { Mode::TrainFrozen } else { mode };
        let mut m = self.clone();
        let (z, _) = m.fed.forward(&batch.inputs, mode)?;
        let (e, r) = split_features(&z, m.arch.feature_emitter)?;
        let (le, _) = m.ec.forward(&e, mode)?;
        let (lr, _) = m.rc.forward(&r, mode)?;
        let (ce_e, _, _) = cross_entropy(&le, &batch.emitters, cfg.epsilon_log, 1.0)?;
        let (ce_r, _, _) = cross_entropy(&lr, &batch.receivers, cfg.epsilon_log, 1.0)?;
        let (ie, mi) = if e.row_len() == r.row_len() {
            let (lre, _) = m.ec.forward(&r, mode)?;
            let (ler, _) = m.rc.forward(&e, mode)?;
            (
                entropy(&lre, cfg.epsilon_log, 1.0)?.0 + entropy(&ler, cfg.epsilon_log, 1.0)?.0,
                mutual_independence(&e, &r, cfg.epsilon_norm, 1.0)?.0,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(LossValues {
            ce: ce_e + ce_r,
            ie,
            mi,
        })
    }

    pub fn loss_ce(&self, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
        Ok(self.losses(batch, cfg, Mode::Infer)?.ce)
    }

    pub fn loss_ie(&self, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
        self.loss_mi(batch, cfg)?;
        Ok(self.losses(batch, cfg, Mode::Infer)?.ie)
    }

    pub fn loss_mi(&self, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
        if self.arch.feature_emitter != self.arch.feature_receiver {
            return Err(Error::config(
                "the independence loss needs equal emitter and receiver feature widths",
            ));
        }
        Ok(self.losses(batch, cfg, Mode::Infer)?.mi)
    }

    /// Accumulates `d L_CE / d(theta_F, theta_E, theta_R)` into the gradient
    /// buffers. Returns the loss and the number of correct emitter predictions.
    pub fn ce_gradients(&mut self, batch: &Batch, cfg: &TrainConfig, mode: Mode) -> Result<(f64, usize)> {
        batch.check_labels(&self.arch)?;
        let scale = cfg.scale(batch.len());
        let (z, fed_caches) = self.fed.forward(&batch.inputs, mode)?;
        let (e, r) = split_features(&z, self.arch.feature_emitter)?;
        let (le, ec_caches) = self.ec.forward(&e, mode)?;
        let (lr, rc_caches) = self.rc.forward(&r, mode)?;
        let (ce_e, dle, correct) = cross_entropy(&le, &batch.emitters, cfg.epsilon_log, scale)?;
        let (ce_r, dlr, _) = cross_entropy(&lr, &batch.receivers, cfg.epsilon_log, scale)?;
        let loss = ce_e + ce_r;
        if !loss.is_finite() {
            return Ok((loss, correct));
        }
        let de = self.ec.backward(&ec_caches, &dle, true)?;
        let dr = self.rc.backward(&rc_caches, &dlr, true)?;
        self.fed.backward(&fed_caches, &join_features(&de, &dr)?, true)?;
        Ok((loss, correct))
    }

    /// Accumulates `d(lambda1 L_MI - lambda2 L_IE) / d theta_F` into the FED
    /// gradient buffers (EC and RC gradients untouched unless
    /// `heads_too`). Returns `(objective, L_IE, L_MI)`.
    pub fn feature_gradients(
        &mut self,
        batch: &Batch,
        cfg: &TrainConfig,
        mode: Mode,
        heads_too: bool,
    ) -> Result<(f64, f64, f64)> {
        let scale = cfg.scale(batch.len());
        let (z, fed_caches) = self.fed.forward(&batch.inputs, mode)?;
        let (e, r) = split_features(&z, self.arch.feature_emitter)?;
        let (lre, ec_caches) = self.ec.forward(&r, mode)?;
        let (ler, rc_caches) = self.rc.forward(&e, mode)?;
        let (h_re, dlre) = entropy(&lre, cfg.epsilon_log, -cfg.lambda2 * scale)?;
        let (h_er, dler) = entropy(&ler, cfg.epsilon_log, -cfg.lambda2 * scale)?;
        let ie = h_re + h_er;
        let mut dr = self.ec.backward(&ec_caches, &dlre, heads_too)?;
        let mut de = self.rc.backward(&rc_caches, &dler, heads_too)?;
        let (mi, dme, dmr) = mutual_independence(&e, &r, cfg.epsilon_norm, cfg.lambda1 * scale)?;
        add_into(&mut de, &dme);
        add_into(&mut dr, &dmr);
        let objective = cfg.lambda1 * mi - cfg.lambda2 * ie;
        if objective.is_finite() {
            self.fed.backward(&fed_caches, &join_features(&de, &dr)?, true)?;
        }
        Ok((objective, ie, mi))
    }

    /// One SGD step on `L_CE` for EC, RC and FED, gradients taken at the
    /// pre-step parameters.
    pub fn classifier_step(&mut self, batch: &Batch, cfg: &TrainConfig) -> Result<(f64, usize)> {
        self.classifier_step_at(batch, cfg, 0)
    }

    fn classifier_step_at(&mut self, batch: &Batch, cfg: &TrainConfig, epoch: usize) -> Result<(f64, usize)> {
        cfg.validate()?;
        self.zero_grad();
        let (loss, correct) = self.ce_gradients(batch, cfg, Mode::Train)?;
        if !loss.is_finite() {
            self.zero_grad();
            return Err(diverged(epoch, "cross-entropy loss"));
        }
        sgd_update(self.ec.params_mut(), cfg.eta_e)?;
        sgd_update(self.rc.params_mut(), cfg.eta_r)?;
        sgd_update(self.fed.params_mut(), cfg.eta_f)?;
        Ok((loss, correct))
    }

    /// One SGD step on `lambda1 L_MI - lambda2 L_IE` for the FED only.
    pub fn feature_step(&mut self, batch: &Batch, cfg: &TrainConfig) -> Result<(f64, f64)> {
        self.feature_step_at(batch, cfg, 0)
    }

    fn feature_step_at(&mut self, batch: &Batch, cfg: &TrainConfig, epoch: usize) -> Result<(f64, f64)> {
        cfg.validate()?;
        if cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0 {
            return Ok((f64::NAN, f64::NAN));
        }
        if self.arch.feature_emitter != self.arch.feature_receiver {
            return Err(Error::config(
                "the feature step needs equal emitter and receiver feature widths",
            ));
        }
        self.fed.zero_grad();
        let (objective, ie, mi) = self.feature_gradients(batch, cfg, Mode::TrainFrozen, false)?;
        if !objective.is_finite() {
            self.fed.zero_grad();
            return Err(diverged(epoch, "disentanglement objective"));
        }
        sgd_update(self.fed.params_mut(), cfg.eta_f)?;
        Ok((ie, mi))
    }

    fn joint_step(&mut self, batch: &Batch, cfg: &TrainConfig, epoch: usize) -> Result<(f64, usize, f64, f64)> {
        cfg.validate()?;
        self.zero_grad();
        let (ce, correct) = self.ce_gradients(batch, cfg, Mode::Train)?;
        let (objective, ie, mi) = self.feature_gradients(batch, cfg, Mode::TrainFrozen, true)?;
        if !ce.is_finite() || !objective.is_finite() {
            self.zero_grad();
            return Err(diverged(epoch, "joint objective"));
        }
        sgd_update(self.ec.params_mut(), cfg.eta_e)?;
        sgd_update(self.rc.params_mut(), cfg.eta_r)?;
        sgd_update(self.fed.params_mut(), cfg.eta_f)?;
        Ok((ce, correct, ie, mi))
    }

    /// One full training iteration on a minibatch per the configured scheme.
    /// Returns `(L_CE, correct, L_IE, L_MI)` as sums over the batch.
    pub fn train_step(&mut self, batch: &Batch, cfg: &TrainConfig, epoch: usize) -> Result<(f64, usize, f64, f64)> {
        match cfg.scheme {
            Scheme::Alternating => {
                let (ce, correct) = self.classifier_step_at(batch, cfg, epoch)?;
                let (ie, mi) = self.feature_step_at(batch, cfg, epoch)?;
                Ok((ce, correct, ie, mi))
            }
            Scheme::Joint => self.joint_step(batch, cfg, epoch),
        }
    }

    /// Trains on the pooled samples; `on_epoch` sees the model after each epoch.
    pub fn fit<F>(
        &mut self,
        train: &[&LabeledSample],
        cfg: &TrainConfig,
        rng: &mut Stream,
        mut on_epoch: F,
    ) -> Result<History>
    where
        F: FnMut(&EpochStats, &Self) -> Result<()>,
    {
        cfg.validate()?;
        let receivers: BTreeSet<usize> = train.iter().map(|s| s.receiver).collect();
        if receivers.len() < 2 {
            return Err(Error::config("training data must span at least 2 receivers"));
        }
        let mut history = History {
            epochs: Vec::new(),
            trained_receivers: BTreeSet::new(),
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let (mut ce, mut ie, mut mi, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
            for chunk in order.chunks(cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| train[i]).collect();
                let batch = Batch::from_samples(&samples, &self.arch)?;
                let (c, k, e, m) = self.train_step(&batch, cfg, epoch)?;
                history.trained_receivers.extend(batch.receivers.iter().copied());
                ce += c;
                ie += e;
                mi += m;
                correct += k;
                seen += batch.len();
            }
            let denom = seen.max(1) as f64;
            let stats = EpochStats {
                epoch,
                ce: ce / denom,
                ie: Some(ie / denom),
                mi: Some(mi / denom),
                train_accuracy: correct as f64 / denom,
            };
            on_epoch(&stats, self)?;
            history.epochs.push(stats);
        }
        Ok(history)
    }

    /// Emitter labels via FED and EC in inference mode (RC unused).
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let z = self.features_infer(inputs)?;
        let (e, _) = split_features(&z, self.arch.feature_emitter)?;
        let mut ec = self.ec.clone();
        let (logits, _) = ec.forward(&e, Mode::Infer)?;
        Ok(logits.data().chunks(logits.row_len()).map(argmax).collect())
    }
}

/// Cross-entropy-only model: FED and an EC reading the full feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub arch: Architecture,
    pub fed: Stack,
    pub ec: Stack,
}

impl BaselineModel {
    pub fn new(arch: Architecture, rng: &mut Stream) -> Result<Self> {
        arch.validate()?;
        let fed = Stack::init(&arch.fed_specs(), rng)?;
        let ec = Stack::init(&arch.head_specs(arch.feature_width(), arch.emitters), rng)?;
        Ok(BaselineModel { arch, fed, ec })
    }

    pub fn param_count(&self) -> usize {
        self.fed.param_count() + self.ec.param_count()
    }

    pub fn loss(&self, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
        let mut m = self.clone();
        let (z, _) = m.fed.forward(&batch.inputs, Mode::Infer)?;
        let (l, _) = m.ec.forward(&z, Mode::Infer)?;
        Ok(cross_entropy(&l, &batch.emitters, cfg.epsilon_log, 1.0)?.0)
    }

    pub fn ce_gradients(&mut self, batch: &Batch, cfg: &TrainConfig, mode: Mode) -> Result<(f64, usize)> {
        batch.check_labels(&self.arch)?;
        let (z, fed_caches) = self.fed.forward(&batch.inputs, mode)?;
        let (l, ec_caches) = self.ec.forward(&z, mode)?;
        let (loss, dl, correct) = cross_entropy(&l, &batch.emitters, cfg.epsilon_log, cfg.scale(batch.len()))?;
        if loss.is_finite() {
            let dz = self.ec.backward(&ec_caches, &dl, true)?;
            self.fed.backward(&fed_caches, &dz, true)?;
        }
        Ok((loss, correct))
    }

    pub fn step(&mut self, batch: &Batch, cfg: &TrainConfig, epoch: usize) -> Result<(f64, usize)> {
        self.fed.zero_grad();
        self.ec.zero_grad();
        let (loss, correct) = self.ce_gradients(batch, cfg, Mode::Train)?;
        if !loss.is_finite() {
            return Err(diverged(epoch, "cross-entropy loss"));
        }
        sgd_update(self.ec.params_mut(), cfg.eta_e)?;
        sgd_update(self.fed.params_mut(), cfg.eta_f)?;
        Ok((loss, correct))
    }

    pub fn fit<F>(
        &mut self,
        train: &[&LabeledSample],
        cfg: &TrainConfig,
        rng: &mut Stream,
        mut on_epoch: F,
    ) -> Result<History>
    where
        F: FnMut(&EpochStats, &Self) -> Result<()>,
    {
        cfg.validate()?;
        let mut history = History::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let (mut ce, mut correct, mut seen) = (0.0, 0usize, 0usize);
            for chunk in order.chunks(cfg.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| train[i]).collect();
                let batch = Batch::from_samples(&samples, &self.arch)?;
                let (c, k) = self.step(&batch, cfg, epoch)?;
                history.trained_receivers.extend(batch.receivers.iter().copied());
                ce += c;
                correct += k;
                seen += batch.len();
            }
            let denom = seen.max(1) as f64;
            let stats = EpochStats {
                epoch,
                ce: ce / denom,
                ie: None,
                mi: None,
                train_accuracy: correct as f64 / denom,
            };
            on_epoch(&stats, self)?;
            history.epochs.push(stats);
        }
        Ok(history)
    }

    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut fed = self.fed.clone();
        Ok(fed.forward(inputs, Mode::Infer)?.0)
    }

    /// FED output split at `F_E` like the disentangled model's.
    pub fn feature_pairs(&self, inputs: &Tensor) -> Result<Vec<FeaturePair>> {
        let z = self.features(inputs)?;
        let (e, r) = split_features(&z, self.arch.feature_emitter)?;
        Ok((0..z.rows())
            .map(|i| FeaturePair {
                z_emitter: e.row(i).to_vec(),
                z_receiver: r.row(i).to_vec(),
            })
            .collect())
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let z = self.features(inputs)?;
        let mut ec = self.ec.clone();
        let (logits, _) = ec.forward(&z, Mode::Infer)?;
        Ok(logits.data().chunks(logits.row_len()).map(argmax).collect())
    }
}

/// Either trained model, for code that only needs inference.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Riei(RieiModel),
    Baseline(BaselineModel),
}

impl Model {
    pub fn arch(&self) -> &Architecture {
        match self {
            Model::Riei(m) => &m.arch,
            Model::Baseline(m) => &m.arch,
        }
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        match self {
            Model::Riei(m) => m.predict(inputs),
            Model::Baseline(m) => m.predict(inputs),
        }
    }

    pub fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        match self {
            Model::Riei(m) => m.features(inputs),
            Model::Baseline(m) => m.features(inputs),
        }
    }

    pub fn feature_pairs(&self, inputs: &Tensor) -> Result<Vec<FeaturePair>> {
        match self {
            Model::Riei(m) => m.feature_pairs(inputs),
            Model::Baseline(m) => m.feature_pairs(inputs),
        }
    }

    fn stacks(&self) -> Vec<(&'static str, &Stack)> {
        match self {
            Model::Riei(m) => vec![("fed", &m.fed), ("ec", &m.ec), ("rc", &m.rc)],
            Model::Baseline(m) => vec![("fed", &m.fed), ("ec", &m.ec)],
        }
    }

    fn stacks_mut(&mut self) -> Vec<(&'static str, &mut Stack)> {
        match self {
            Model::Riei(m) => vec![("fed", &mut m.fed), ("ec", &mut m.ec), ("rc", &mut m.rc)],
            Model::Baseline(m) => vec![("fed", &mut m.fed), ("ec", &mut m.ec)],
        }
    }
}

/// Named trainable blocks and running statistics of a stack.
pub(crate) fn stack_tensors(stack: &Stack) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (li, layer) in stack.layers.iter().enumerate() {
        for p in &layer.params {
            out.push((
                format!("{li}.{}", p.name),
                p.values.shape().to_vec(),
                p.values.data().to_vec(),
            ));
        }
        if let Some(rs) = &layer.running {
            out.push((format!("{li}.running_mean"), vec![rs.mean.len()], rs.mean.clone()));
            out.push((format!("{li}.running_var"), vec![rs.var.len()], rs.var.clone()));
        }
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RIEI";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic, version, kind, architecture (length-prefixed JSON), block
/// count, blocks (name, shape, little-endian f64 values)`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let kind: u8 = match model {
        Model::Riei(_) => 0,
        Model::Baseline(_) => 1,
    };
    w.write_all(&[kind])?;
    let arch = serde_json::to_vec(model.arch()).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_all(&(arch.len() as u32).to_le_bytes())?;
    w.write_all(&arch)?;
    let blocks: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .stacks()
        .into_iter()
        .flat_map(|(prefix, s)| {
            stack_tensors(s)
                .into_iter()
                .map(move |(name, shape, data)| (format!("{prefix}.{name}"), shape, data))
        })
        .collect();
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, shape, data) in blocks {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let kind_at = c.pos as u64;
    let kind = c.take(1, "kind")?[0];
    let arch_len = c.u32("architecture length")? as usize;
    let arch_at = c.pos as u64;
    let arch: Architecture = serde_json::from_slice(c.take(arch_len, "architecture")?)
        .map_err(|e| Error::format(arch_at, format!("architecture record: {e}")))?;
    let mut rng = crate::rng::stream(0, "checkpoint", &[]);
    let mut model = match kind {
        0 => Model::Riei(RieiModel::new(arch, &mut rng).map_err(|e| Error::format(arch_at, e.to_string()))?),
        1 => Model::Baseline(BaselineModel::new(arch, &mut rng).map_err(|e| Error::format(arch_at, e.to_string()))?),
        k => return Err(Error::format(kind_at, format!("unknown model kind {k}"))),
    };
    let count = c.u32("block count")? as usize;
    let mut blocks = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u16("block name length")? as usize;
        let name_at = c.pos as u64;
        let name = String::from_utf8(c.take(name_len, "block name")?.to_vec())
            .map_err(|_| Error::format(name_at, "block name is not UTF-8"))?;
        let ndim = c.u32("block rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64("block dimension")? as usize);
        }
        let size: usize = shape.iter().product();
        let raw = c.take(size * 8, "block values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        blocks.insert(name, (shape, values, name_at));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after checkpoint"));
    }
    for (prefix, stack) in model.stacks_mut() {
        for (li, layer) in stack.layers.iter_mut().enumerate() {
            let mut fill = |name: String, shape: &[usize], dst: &mut [f64]| -> Result<()> {
                let (s, v, at) = blocks
                    .remove(&name)
                    .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing block {name}")))?;
                if s != shape {
                    return Err(Error::format(at, format!("block {name} has shape {s:?}, expected {shape:?}")));
                }
                dst.copy_from_slice(&v);
                Ok(())
            };
            for p in layer.params.iter_mut() {
                let shape = p.values.shape().to_vec();
                fill(format!("{prefix}.{li}.{}", p.name), &shape, p.values.data_mut())?;
            }
            if let Some(rs) = layer.running.as_mut() {
                let n = rs.mean.len();
                fill(format!("{prefix}.{li}.running_mean"), &[n], &mut rs.mean)?;
                fill(format!("{prefix}.{li}.running_var"), &[n], &mut rs.var)?;
            }
        }
    }
    if let Some((name, (_, _, at))) = blocks.into_iter().next() {
        return Err(Error::format(at, format!("unexpected block {name}")));
    }
    Ok(model)
}
