//! Federated training with one client per receiver.
//!
//! Each round every client copies the global model, runs local alternating
//! epochs, and uploads its normalized parameter change
//! `(theta_global - theta_local) / eta`, optionally reduced to one sign bit
//! per coordinate. The server applies the sample-count weighted sum of the
//! uploads. BatchNorm running statistics are averaged with the same weights.

use crate::error::{Error, Result};
use crate::riei::{Batch, Part, RieiModel, TrainConfig};
use crate::rng::{self, Stream};
use crate::synth::LabeledSample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One participant: a receiver index and the samples it captured.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub samples: Vec<LabeledSample>,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compressor {
    None,
    Sign,
    NoisySignGaussian,
    NoisySignUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub compressor: Compressor,
    pub sigma: f64,
    /// Single server stepsize for every block; `None` reuses each block's
    /// client stepsize.
    pub server_eta: Option<f64>,
    /// Local minibatch size; 0 means the whole local dataset.
    pub client_batch: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 30,
            local_epochs: 1,
            compressor: Compressor::None,
            sigma: 0.01,
            server_eta: None,
            client_batch: 16,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be >= 1"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("sigma must be finite and >= 0"));
        }
        if let Some(eta) = self.server_eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::config("server_eta must be positive"));
            }
        }
        if self.client_batch == 1 {
            return Err(Error::config("client_batch must be 0 (full) or >= 2"));
        }
        Ok(())
    }
}

/// Trainable blocks of a model in upload order, with the part they belong to.
pub fn trainable_blocks(model: &RieiModel) -> Vec<(Part, Vec<f64>)> {
    model
        .parts()
        .into_iter()
        .flat_map(|(part, stack)| stack.params().map(move |p| (part, p.values.data().to_vec())))
        .collect()
}

pub fn set_trainable_blocks(model: &mut RieiModel, blocks: &[Vec<f64>]) -> Result<()> {
    let mut it = blocks.iter();
    for (_, stack) in model.parts_mut() {
        for p in stack.params_mut() {
            let src = it.next().ok_or_else(|| Error::Protocol("too few parameter blocks".into()))?;
            if src.len() != p.values.len() {
                return Err(Error::Protocol("parameter block size mismatch".into()));
            }
            p.values.data_mut().copy_from_slice(src);
        }
    }
    if it.next().is_some() {
        return Err(Error::Protocol("too many parameter blocks".into()));
    }
    Ok(())
}

/// BatchNorm running means and variances, flattened in layer order.
pub fn running_stats(model: &RieiModel) -> Vec<f64> {
    model
        .fed
        .layers
        .iter()
        .filter_map(|l| l.running.as_ref())
        .flat_map(|rs| rs.mean.iter().chain(&rs.var).copied())
        .collect()
}

pub fn set_running_stats(model: &mut RieiModel, values: &[f64]) -> Result<()> {
    let mut pos = 0;
    for rs in model.fed.layers.iter_mut().filter_map(|l| l.running.as_mut()) {
        let n = rs.mean.len();
        if pos + 2 * n > values.len() {
            return Err(Error::Protocol("running statistics too short".into()));
        }
        rs.mean.copy_from_slice(&values[pos..pos + n]);
        rs.var.copy_from_slice(&values[pos + n..pos + 2 * n]);
        pos += 2 * n;
    }
    if pos != values.len() {
        return Err(Error::Protocol("running statistics too long".into()));
    }
    Ok(())
}

fn part_eta(part: Part, cfg: &TrainConfig) -> f64 {
    match part {
        Part::Fed => cfg.eta_f,
        Part::Emitter => cfg.eta_e,
        Part::Receiver => cfg.eta_r,
    }
}

/// Per-block client stepsizes in upload order.
pub fn block_etas(model: &RieiModel, cfg: &TrainConfig) -> Vec<f64> {
    model
        .parts()
        .into_iter()
        .flat_map(|(part, stack)| stack.params().map(move |_| part_eta(part, cfg)))
        .collect()
}

/// What a client sends back before compression.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// Normalized change per trainable block.
    pub delta: Vec<Vec<f64>>,
    /// Locally updated BatchNorm running statistics.
    pub running: Vec<f64>,
    /// Mean per-sample losses over the local run.
    pub ce: f64,
    pub ie: f64,
    pub mi: f64,
}

/// Runs `local_epochs` of alternating training from the global model and
/// returns the normalized change.
pub fn client_update(
    state: &ClientState,
    global: &RieiModel,
    cfg: &FedConfig,
    train: &TrainConfig,
    rng: &mut Stream,
) -> Result<ClientUpdate> {
    if state.samples.is_empty() {
        return Err(Error::config(format!("client {} holds no samples", state.id)));
    }
    let batch_size = if cfg.client_batch == 0 {
        state.samples.len()
    } else {
        cfg.client_batch
    };
    let mut local = global.clone();
    let mut order: Vec<usize> = (0..state.samples.len()).collect();
    let (mut ce, mut ie, mut mi, mut seen) = (0.0, 0.0, 0.0, 0usize);
    for epoch in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| &state.samples[i]).collect();
            let batch = Batch::from_samples(&samples, &local.arch)?;
            let (c, _, e, m) = local.train_step(&batch, train, epoch)?;
            ce += c;
            ie += e;
            mi += m;
            seen += batch.len();
        }
    }
    let etas = block_etas(global, train);
    let delta = trainable_blocks(global)
        .into_iter()
        .zip(trainable_blocks(&local))
        .zip(&etas)
        .map(|(((_, g), (_, l)), &eta)| g.iter().zip(&l).map(|(a, b)| (a - b) / eta).collect())
        .collect();
    let denom = seen.max(1) as f64;
    Ok(ClientUpdate {
        client: state.id,
        delta,
        running: running_stats(&local),
        ce: ce / denom,
        ie: ie / denom,
        mi: mi / denom,
    })
}

/// Sign bits packed 64 per word; bit set means `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSigns {
    pub len: usize,
    pub words: Vec<u64>,
}

impl PackedSigns {
    pub fn from_signs(signs: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for positive in signs {
            if len % 64 == 0 {
                words.push(0);
            }
            if positive {
                *words.last_mut().unwrap() |= 1 << (len % 64);
            }
            len += 1;
        }
        PackedSigns { len, words }
    }

    pub fn get(&self, i: usize) -> f64 {
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn to_values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressedDelta {
    Raw(Vec<Vec<f64>>),
    Signs(Vec<PackedSigns>),
}

impl CompressedDelta {
    pub fn coordinates(&self) -> usize {
        match self {
            CompressedDelta::Raw(b) => b.iter().map(Vec::len).sum(),
            CompressedDelta::Signs(b) => b.iter().map(|s| s.len).sum(),
        }
    }

    /// Uplink payload in bits.
    pub fn payload_bits(&self) -> u64 {
        let per = match self {
            CompressedDelta::Raw(_) => 64,
            CompressedDelta::Signs(_) => 1,
        };
        per * self.coordinates() as u64
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        match self {
            CompressedDelta::Raw(b) => b.iter().map(Vec::len).collect(),
            CompressedDelta::Signs(b) => b.iter().map(|s| s.len).collect(),
        }
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        match self {
            CompressedDelta::Raw(b) => b.clone(),
            CompressedDelta::Signs(b) => b.iter().map(PackedSigns::to_values).collect(),
        }
    }
}

/// `+1` for `x >= 0`, `-1` otherwise.
pub fn sign(x: f64) -> bool {
    x >= 0.0
}

pub fn compress(delta: &[Vec<f64>], scheme: Compressor, sigma: f64, rng: &mut Stream) -> Result<CompressedDelta> {
    if delta.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("cannot compress a non-finite delta"));
    }
    let blocks = match scheme {
        Compressor::None => return Ok(CompressedDelta::Raw(delta.to_vec())),
        Compressor::Sign => delta
            .iter()
            .map(|b| PackedSigns::from_signs(b.iter().map(|&x| sign(x))))
            .collect(),
        Compressor::NoisySignGaussian => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            delta
                .iter()
                .map(|b| PackedSigns::from_signs(b.iter().map(|&x| sign(x + normal.sample(rng)))))
                .collect()
        }
        Compressor::NoisySignUniform => {
            let a = sigma * 3f64.sqrt();
            delta
                .iter()
                .map(|b| {
                    PackedSigns::from_signs(b.iter().map(|&x| {
                        let xi = if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
                        sign(x + xi)
                    }))
                })
                .collect()
        }
    };
    Ok(CompressedDelta::Signs(blocks))
}

/// `theta - eta_b * sum_k w_k Q_k`, summed in slice order.
pub fn server_round(
    global: &[Vec<f64>],
    compressed: &[CompressedDelta],
    weights: &[f64],
    etas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if compressed.len() != weights.len() || compressed.is_empty() {
        return Err(Error::Protocol("one weight per client upload required".into()));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::Protocol("client weights must sum to 1".into()));
    }
    if etas.len() != global.len() {
        return Err(Error::Protocol("one server stepsize per block required".into()));
    }
    let sizes: Vec<usize> = global.iter().map(Vec::len).collect();
    let decoded: Vec<Vec<Vec<f64>>> = compressed
        .iter()
        .map(|c| {
            if c.block_sizes() == sizes {
                Ok(c.values())
            } else {
                Err(Error::Protocol("client upload shape differs from the global model".into()))
            }
        })
        .collect::<Result<_>>()?;
    Ok(global
        .iter()
        .enumerate()
        .map(|(b, theta)| {
            theta
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let mut acc = 0.0;
                    for (w, d) in weights.iter().zip(&decoded) {
                        acc += w * d[b][i];
                    }
                    t - etas[b] * acc
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub client_ce: Vec<f64>,
    pub client_ie: Vec<f64>,
    pub client_mi: Vec<f64>,
    /// Bits sent this round by all clients.
    pub round_bits: u64,
    pub cumulative_bits: u64,
    /// Bits the same uploads would take as 32-bit reals.
    pub cumulative_bits_32: u64,
    pub eval_accuracy: Option<f64>,
}

/// Trains the global model for `cfg.rounds` rounds. `on_round` sees the new
/// global model and may return an evaluation accuracy for the log.
pub fn fed_fit<F>(
    init: &RieiModel,
    clients: &[ClientState],
    cfg: &FedConfig,
    train: &TrainConfig,
    mut on_round: F,
) -> Result<(RieiModel, Vec<RoundLog>)>
where
    F: FnMut(usize, &RieiModel) -> Result<Option<f64>>,
{
    cfg.validate()?;
    train.validate()?;
    if clients.len() < 2 {
        return Err(Error::config("federated training needs at least 2 clients"));
    }
    if let Some(c) = clients.iter().find(|c| c.samples.is_empty()) {
        return Err(Error::config(format!("client {} holds no samples", c.id)));
    }
    let total: usize = clients.iter().map(ClientState::sample_count).sum();
    let weights: Vec<f64> = clients.iter().map(|c| c.sample_count() as f64 / total as f64).collect();
    let etas: Vec<f64> = match cfg.server_eta {
        Some(eta) => vec![eta; block_etas(init, train).len()],
        None => block_etas(init, train),
    };
    let mut global = init.clone();
    let mut logs = Vec::with_capacity(cfg.rounds);
    let (mut cumulative, mut cumulative_32) = (0u64, 0u64);
    for t in 0..cfg.rounds {
        let uploads: Vec<(ClientUpdate, CompressedDelta)> = clients
            .par_iter()
            .enumerate()
            .map(|(slot, c)| {
                let stage = || format!("round {t}, client {}", c.id);
                let mut local_rng = rng::stream(cfg.seed, "client", &[slot as u64, t as u64]);
                let update = client_update(c, &global, cfg, train, &mut local_rng).map_err(|e| e.in_stage(stage()))?;
                let mut q_rng = rng::stream(cfg.seed, "compress", &[slot as u64, t as u64]);
                let q = compress(&update.delta, cfg.compressor, cfg.sigma, &mut q_rng).map_err(|e| e.in_stage(stage()))?;
                Ok((update, q))
            })
            .collect::<Result<_>>()?;
        let theta: Vec<Vec<f64>> = trainable_blocks(&global).into_iter().map(|(_, v)| v).collect();
        let q: Vec<CompressedDelta> = uploads.iter().map(|(_, q)| q.clone()).collect();
        let next = server_round(&theta, &q, &weights, &etas).map_err(|e| e.in_stage(format!("round {t}")))?;
        set_trainable_blocks(&mut global, &next)?;
        let running_len = running_stats(&global).len();
        if running_len > 0 {
            let mut avg = vec![0.0; running_len];
            for ((u, _), w) in uploads.iter().zip(&weights) {
                for (a, r) in avg.iter_mut().zip(&u.running) {
                    *a += w * r;
                }
            }
            set_running_stats(&mut global, &avg)?;
        }
        if next.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                epoch: t,
                message: "global parameters are not finite".into(),
            });
        }
        let round_bits: u64 = q.iter().map(CompressedDelta::payload_bits).sum();
        cumulative += round_bits;
        cumulative_32 += 32 * q.iter().map(|c| c.coordinates() as u64).sum::<u64>();
        let eval_accuracy = on_round(t, &global)?;
        logs.push(RoundLog {
            round: t,
            client_ce: uploads.iter().map(|(u, _)| u.ce).collect(),
            client_ie: uploads.iter().map(|(u, _)| u.ie).collect(),
            client_mi: uploads.iter().map(|(u, _)| u.mi).collect(),
            round_bits,
            cumulative_bits: cumulative,
            cumulative_bits_32: cumulative_32,
            eval_accuracy,
        });
    }
    Ok((global, logs))
}

/// Cumulative uplink bits after each round.
pub fn bits_accounting(logs: &[RoundLog]) -> Vec<u64> {
    logs.iter().map(|l| l.cumulative_bits).collect()
}

/// Bits a 32-bit-real upload would need divided by the bits actually sent.
pub fn compression_ratio(logs: &[RoundLog]) -> Option<f64> {
    let last = logs.last()?;
    if last.cumulative_bits == 0 {
        return None;
    }
    Some(last.cumulative_bits_32 as f64 / last.cumulative_bits as f64)
}

/// Round log as CSV text.
pub fn round_log_csv(logs: &[RoundLog]) -> String {
    let clients = logs.first().map_or(0, |l| l.client_ce.len());
    let mut out = String::from("round");
    for k in 0..clients {
        let _ = write!(out, ",ce_client{k},ie_client{k},mi_client{k}");
    }
    out.push_str(",round_bits,cumulative_bits,cumulative_bits_32,compression_ratio,eval_accuracy\n");
    for l in logs {
        let _ = write!(out, "{}", l.round);
        for k in 0..clients {
            let _ = write!(out, ",{},{},{}", l.client_ce[k], l.client_ie[k], l.client_mi[k]);
        }
        let ratio = if l.cumulative_bits == 0 {
            String::new()
        } else {
            (l.cumulative_bits_32 as f64 / l.cumulative_bits as f64).to_string()
        };
        let acc = l.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            ",{},{},{},{},{}",
            l.round_bits, l.cumulative_bits, l.cumulative_bits_32, ratio, acc
        );
    }
    out
}
