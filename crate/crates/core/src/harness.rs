//! Experiment orchestration: dataset files, leave-one-receiver-out runs,
//! ablations, sweeps, metrics and feature diagnostics.

use crate::dsp::{self, InterferenceConfig, InterferenceKind};
use crate::error::{Error, Result};
use crate::fed::{self, ClientState, Compressor, FedConfig, RoundLog};
use crate::numerics::{sgd_update, softmax_in_place, LayerSpec, Mode, Stack, Tensor};
use crate::riei::{
    abs_cosine, encode_inputs, Architecture, BaselineModel, EpochStats, FeaturePair, Model, RieiModel, TrainConfig,
};
use crate::rng::{self, Stream};
use crate::synth::{self, Dataset, IqFrame, LabeledSample, SynthConfig};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Centralized,
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    BaselineCE,
    IEOnly,
    MIOnly,
}

impl Ablation {
    /// Training config with the ablation's loss weights.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::BaselineCE => {
                out.lambda1 = 0.0;
                out.lambda2 = 0.0;
            }
            Ablation::IEOnly => out.lambda1 = 0.0,
            Ablation::MIOnly => out.lambda2 = 0.0,
        }
        out
    }
}

/// One raw capture for `preprocess`: little-endian f32 interleaved I/Q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capture {
    pub path: PathBuf,
    pub emitter: usize,
    pub receiver: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub captures: Vec<Capture>,
    pub emitters: usize,
    pub receivers: usize,
    pub window: usize,
    pub threshold_factor: f64,
    pub lowpass_cutoff: Option<f64>,
    pub lowpass_taps: usize,
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            captures: Vec::new(),
            emitters: 4,
            receivers: 3,
            window: 64,
            threshold_factor: 4.0,
            lowpass_cutoff: None,
            lowpass_taps: 63,
            frame_len: 256,
            hop: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    Isr,
    SamplingRate,
    Compression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPoint {
    pub compressor: Compressor,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// ISR grid in dB; `-inf` disables injection.
    pub isr_db: Vec<f64>,
    pub interference_kinds: Vec<InterferenceKind>,
    /// One per-receiver ratio vector per grid point.
    pub ratios: Vec<Vec<f64>>,
    pub compressors: Vec<CompressionPoint>,
    /// Seeds to repeat every point with.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SweepKind::Isr,
            isr_db: vec![-10.0, 0.0, 10.0, 20.0],
            interference_kinds: vec![InterferenceKind::NarrowbandHopping, InterferenceKind::BroadbandGaussian],
            ratios: vec![vec![1.0; 3]],
            compressors: vec![CompressionPoint {
                compressor: Compressor::Sign,
                sigma: 0.0,
            }],
            seeds: vec![0],
        }
    }
}

/// Everything one run needs. Unknown keys are rejected when parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub ablation: Ablation,
    pub held_out_receiver: usize,
    /// Load samples from a dataset file instead of synthesizing.
    pub dataset: Option<PathBuf>,
    /// Frames per (emitter, training receiver) used for training.
    pub train_per_pair: Option<usize>,
    /// Frames per emitter taken from the held-out receiver.
    pub test_per_pair: Option<usize>,
    /// Compute the independence score and divergence proxy.
    pub diagnostics: bool,
    /// Test-set interference.
    pub interference: Option<InterferenceConfig>,
    /// Resampling ratio per receiver index.
    pub resample_ratios: Option<Vec<f64>>,
    pub synth: SynthConfig,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub fed: FedConfig,
    pub preprocess: PreprocessConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Centralized,
            ablation: Ablation::Full,
            held_out_receiver: 2,
            dataset: None,
            train_per_pair: None,
            test_per_pair: None,
            diagnostics: false,
            interference: None,
            resample_ratios: None,
            synth: SynthConfig::default(),
            arch: Architecture::default(),
            train: TrainConfig::default(),
            fed: FedConfig::default(),
            preprocess: PreprocessConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Uses one seed for data, initialization, shuffling and client streams.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.fed.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        format!("{:016x}", rng::derive_seed(0, &json, &[]))
    }
}

/// Dataset file: magic `RFFD`, u32 version, u32 M, u32 K, u32 L, u32 count,
/// then per record u16 emitter, u16 receiver, 2L f32 interleaved I/Q.
pub const DATASET_MAGIC: &[u8; 4] = b"RFFD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER: usize = 24;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let count = ds.len();
    if count > u32::MAX as usize || ds.emitters > u16::MAX as usize + 1 || ds.receivers > u16::MAX as usize + 1 {
        return Err(Error::invalid("dataset too large for the file format"));
    }
    let mut out = Vec::with_capacity(DATASET_HEADER + count * (4 + 8 * ds.frame_len));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.emitters as u32, ds.receivers as u32, ds.frame_len as u32, count as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in ds.samples() {
        if s.frame.len() != ds.frame_len {
            return Err(Error::invalid("frame length differs from the dataset header"));
        }
        out.extend_from_slice(&(s.emitter as u16).to_le_bytes());
        out.extend_from_slice(&(s.receiver as u16).to_le_bytes());
        for c in &s.frame.samples {
            out.extend_from_slice(&(c.re as f32).to_le_bytes());
            out.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < DATASET_HEADER {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected RFFD"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let (m, k, l, count) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if l == 0 {
        return Err(Error::format(16, "frame length is zero"));
    }
    let record = 4 + 8 * l;
    let expected = DATASET_HEADER + count * record;
    if bytes.len() < expected {
        let complete = (bytes.len() - DATASET_HEADER) / record;
        let offset = DATASET_HEADER + complete * record;
        return Err(Error::format(offset as u64, format!("truncated record {complete} of {count}")));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after the last record"));
    }
    let mut by_receiver: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
    for r in 0..count {
        let at = DATASET_HEADER + r * record;
        let rec = &bytes[at..at + record];
        let emitter = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        let receiver = u16::from_le_bytes([rec[2], rec[3]]) as usize;
        if emitter >= m || receiver >= k {
            return Err(Error::format(at as u64, format!("label ({emitter}, {receiver}) out of range")));
        }
        let samples = rec[4..]
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        by_receiver.entry(receiver).or_default().push(LabeledSample {
            frame: IqFrame::new(samples),
            emitter,
            receiver,
        });
    }
    Ok(Dataset {
        emitters: m,
        receivers: k,
        frame_len: l,
        by_receiver,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

fn read_capture(path: &Path) -> Result<dsp::Stream> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            (bytes.len() - bytes.len() % 8) as u64,
            format!("{}: capture length is not a whole number of I/Q pairs", path.display()),
        ));
    }
    Ok(dsp::Stream::new(
        bytes
            .chunks_exact(8)
            .map(|c| {
                Complex64::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect(),
    ))
}

/// Captures to labelled frames: optional low-pass, energy detection,
/// framing and RMS normalization.
pub fn preprocess(cfg: &PreprocessConfig) -> Result<Dataset> {
    if cfg.captures.is_empty() {
        return Err(Error::config("preprocess needs at least one capture"));
    }
    let mut by_receiver: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
    for cap in &cfg.captures {
        if cap.emitter >= cfg.emitters || cap.receiver >= cfg.receivers {
            return Err(Error::config(format!("{}: label out of range", cap.path.display())));
        }
        let mut stream = read_capture(&cap.path)?;
        if let Some(cutoff) = cfg.lowpass_cutoff {
            stream = dsp::lowpass_filter(&stream, cutoff, cfg.lowpass_taps)?;
        }
        for (start, end) in dsp::energy_detect(&stream, cfg.window, cfg.threshold_factor)? {
            let segment = dsp::Stream::new(stream.samples[start..end].to_vec());
            if segment.samples.len() < cfg.frame_len {
                continue;
            }
            for frame in dsp::frame_stream(&segment, cfg.frame_len, cfg.hop)? {
                if frame.power() == 0.0 {
                    continue;
                }
                by_receiver.entry(cap.receiver).or_default().push(LabeledSample {
                    frame: dsp::normalize_rms(&frame)?,
                    emitter: cap.emitter,
                    receiver: cap.receiver,
                });
            }
        }
    }
    Ok(Dataset {
        emitters: cfg.emitters,
        receivers: cfg.receivers,
        frame_len: cfg.frame_len,
        by_receiver,
    })
}

/// Training and held-out samples after the configured transforms.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub arch: Architecture,
}

fn take_per_emitter(samples: &[LabeledSample], limit: Option<usize>) -> Vec<LabeledSample> {
    let mut counts = BTreeMap::new();
    samples
        .iter()
        .filter(|s| {
            let c = counts.entry(s.emitter).or_insert(0usize);
            *c += 1;
            limit.is_none_or(|n| *c <= n)
        })
        .cloned()
        .collect()
}

/// Loads or synthesizes data and applies the split, resampling and
/// test-time interference.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => synth::synthesize_dataset(&cfg.synth)?,
    };
    prepare_from(cfg, &ds)
}

pub fn prepare_from(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Prepared> {
    if cfg.held_out_receiver >= ds.receivers {
        return Err(Error::config(format!(
            "held_out_receiver {} is not one of the {} receivers",
            cfg.held_out_receiver, ds.receivers
        )));
    }
    if let Some(r) = &cfg.resample_ratios {
        if r.len() != ds.receivers {
            return Err(Error::config("resample_ratios needs one ratio per receiver"));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&k, samples) in &ds.by_receiver {
        if k == cfg.held_out_receiver {
            test = take_per_emitter(samples, cfg.test_per_pair);
        } else {
            train.extend(take_per_emitter(samples, cfg.train_per_pair));
        }
    }
    if let Some(ratios) = &cfg.resample_ratios {
        let resample = |s: &mut LabeledSample| -> Result<()> {
            let r = ratios[s.receiver];
            if r != 1.0 {
                s.frame = dsp::normalize_rms(&dsp::resample_cubic(&s.frame, r)?)?;
            }
            Ok(())
        };
        train.par_iter_mut().try_for_each(resample)?;
        test.par_iter_mut().try_for_each(resample)?;
    }
    if let Some(icfg) = &cfg.interference {
        test = interfere(&test, icfg, cfg.seed())?;
    }
    if test.is_empty() {
        return Err(Error::config("held-out receiver has no samples"));
    }
    let arch = Architecture {
        emitters: ds.emitters,
        receivers: ds.receivers,
        frame_len: ds.frame_len,
        ..cfg.arch.clone()
    };
    Ok(Prepared { train, test, arch })
}

/// Adds interference to every frame (stream per frame index) and
/// renormalizes to unit RMS.
pub fn interfere(samples: &[LabeledSample], icfg: &InterferenceConfig, seed: u64) -> Result<Vec<LabeledSample>> {
    let kind = match icfg.kind {
        InterferenceKind::NarrowbandHopping => 0,
        InterferenceKind::BroadbandGaussian => 1,
    };
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(seed, "interference", &[kind, i as u64]);
            let frame = dsp::inject(&s.frame, icfg, &mut r)?;
            Ok(LabeledSample {
                frame: dsp::normalize_rms(&frame)?,
                ..s.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndependenceScore {
    /// Mean per-sample absolute cosine between the feature parts.
    pub mean_abs_cosine: f64,
    /// Spectral norm of the cross-covariance between the feature parts.
    pub cross_cov_spectral_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub ablation: Ablation,
    pub seed: u64,
    pub held_out_receiver: usize,
    pub config_fingerprint: String,
    /// Held-out accuracy after each epoch (or round).
    pub accuracy: Vec<f64>,
    pub last5_mean: f64,
    pub last5_std: f64,
    pub final_accuracy: f64,
    pub independence: Option<IndependenceScore>,
    pub proxy_divergence: Option<f64>,
    pub uplink_bits: Option<u64>,
    pub compression_ratio: Option<f64>,
}

/// A finished run with everything needed to write artifacts or reuse the model.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub epochs: Vec<EpochStats>,
    pub rounds: Vec<RoundLog>,
    pub data: Prepared,
}

/// Mean and population standard deviation of the last five entries.
pub fn last5_metric(history: &[f64]) -> Result<(f64, f64)> {
    if history.len() < 5 {
        return Err(Error::invalid(format!("need at least 5 entries, got {}", history.len())));
    }
    let tail = &history[history.len() - 5..];
    let mean = tail.iter().sum::<f64>() / 5.0;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    Ok((mean, var.sqrt()))
}

pub fn inputs_of(samples: &[LabeledSample], arch: &Architecture) -> Result<Tensor> {
    encode_inputs(samples.iter().map(|s| &s.frame), arch)
}

pub fn accuracy(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = model.predict(inputs)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    Ok(execute(cfg)?.report)
}

/// Runs one experiment and keeps the trained model and data.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
    execute_on(cfg, data)
}

pub fn execute_on(cfg: &ExperimentConfig, data: Prepared) -> Result<RunOutcome> {
    let train_cfg = cfg.ablation.apply(&cfg.train);
    train_cfg.validate()?;
    let steps = match cfg.scenario {
        Scenario::Centralized => train_cfg.epochs,
        Scenario::Federated => cfg.fed.rounds,
    };
    if steps < 5 {
        return Err(Error::config("at least 5 epochs (or rounds) are needed for the last-5 metric"));
    }
    let test_inputs = inputs_of(&data.test, &data.arch)?;
    let test_labels: Vec<usize> = data.test.iter().map(|s| s.emitter).collect();
    let seed = cfg.seed();
    let mut init_rng = rng::stream(seed, "init", &[]);
    let mut shuffle = rng::stream(seed, "shuffle", &[]);
    let train_refs: Vec<&LabeledSample> = data.train.iter().collect();
    let mut acc_history = Vec::new();
    let mut rounds = Vec::new();
    let (model, epochs) = match (cfg.scenario, cfg.ablation) {
        (Scenario::Centralized, Ablation::BaselineCE) => {
            let mut m = BaselineModel::new(data.arch.clone(), &mut init_rng)?;
            let h = m
                .fit(&train_refs, &train_cfg, &mut shuffle, |_, m| {
                    acc_history.push(accuracy(&Model::Baseline(m.clone()), &test_inputs, &test_labels)?);
                    Ok(())
                })
                .map_err(|e| e.in_stage("train"))?;
            debug_assert!(!h.trained_receivers.contains(&cfg.held_out_receiver));
            (Model::Baseline(m), h.epochs)
        }
        (Scenario::Centralized, _) => {
            let mut m = RieiModel::new(data.arch.clone(), &mut init_rng)?;
            let h = m
                .fit(&train_refs, &train_cfg, &mut shuffle, |_, m| {
                    acc_history.push(accuracy(&Model::Riei(m.clone()), &test_inputs, &test_labels)?);
                    Ok(())
                })
                .map_err(|e| e.in_stage("train"))?;
            debug_assert!(!h.trained_receivers.contains(&cfg.held_out_receiver));
            (Model::Riei(m), h.epochs)
        }
        (Scenario::Federated, Ablation::BaselineCE) => {
            return Err(Error::config("the cross-entropy baseline is centralized only"));
        }
        (Scenario::Federated, _) => {
            let mut by_receiver: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
            for s in &data.train {
                by_receiver.entry(s.receiver).or_default().push(s.clone());
            }
            let clients: Vec<ClientState> = by_receiver
                .into_iter()
                .map(|(id, samples)| ClientState { id, samples })
                .collect();
            let init = RieiModel::new(data.arch.clone(), &mut init_rng)?;
            let (m, logs) = fed::fed_fit(&init, &clients, &cfg.fed, &train_cfg, |_, m| {
                let a = accuracy(&Model::Riei(m.clone()), &test_inputs, &test_labels)?;
                acc_history.push(a);
                Ok(Some(a))
            })
            .map_err(|e| e.in_stage("federated training"))?;
            rounds = logs;
            (Model::Riei(m), Vec::new())
        }
    };
    let (last5_mean, last5_std) = last5_metric(&acc_history)?;
    let (independence, proxy) = if cfg.diagnostics {
        let (ind, div) = diagnostics(&model, &data, seed)?;
        (Some(ind), Some(div))
    } else {
        (None, None)
    };
    let report = MetricsReport {
        scenario: cfg.scenario,
        ablation: cfg.ablation,
        seed,
        held_out_receiver: cfg.held_out_receiver,
        config_fingerprint: cfg.fingerprint(),
        final_accuracy: *acc_history.last().unwrap(),
        accuracy: acc_history,
        last5_mean,
        last5_std,
        independence,
        proxy_divergence: proxy,
        uplink_bits: rounds.last().map(|l| l.cumulative_bits),
        compression_ratio: fed::compression_ratio(&rounds),
    };
    Ok(RunOutcome {
        report,
        model,
        epochs,
        rounds,
        data,
    })
}

/// Features the emitter classifier reads: `z_emitter` for the disentangled
/// model, the whole extractor output for the baseline.
pub fn classifier_features(model: &Model, inputs: &Tensor) -> Result<Vec<Vec<f64>>> {
    match model {
        Model::Riei(m) => Ok(m.feature_pairs(inputs)?.into_iter().map(|p| p.z_emitter).collect()),
        Model::Baseline(m) => {
            let z = m.features(inputs)?;
            Ok((0..z.rows()).map(|i| z.row(i).to_vec()).collect())
        }
    }
}

const DIAGNOSTIC_SAMPLES: usize = 256;

fn spread(samples: &[LabeledSample], n: usize) -> Vec<LabeledSample> {
    let step = samples.len().div_ceil(n.max(1)).max(1);
    samples.iter().step_by(step).cloned().collect()
}

/// Independence score on held-out features and the divergence proxy
/// between training and held-out classifier features.
pub fn diagnostics(model: &Model, data: &Prepared, seed: u64) -> Result<(IndependenceScore, f64)> {
    let test_inputs = inputs_of(&data.test, &data.arch)?;
    let ind = independence_score(&model.feature_pairs(&test_inputs)?)?;
    let src = inputs_of(&spread(&data.train, DIAGNOSTIC_SAMPLES), &data.arch)?;
    let dst = inputs_of(&spread(&data.test, DIAGNOSTIC_SAMPLES), &data.arch)?;
    let div = proxy_divergence(
        &classifier_features(model, &src)?,
        &classifier_features(model, &dst)?,
        &mut rng::stream(seed, "proxy", &[]),
    )?;
    Ok((ind, div))
}

pub fn independence_score(pairs: &[FeaturePair]) -> Result<IndependenceScore> {
    if pairs.is_empty() {
        return Err(Error::invalid("independence score needs at least one feature pair"));
    }
    let (fe, fr) = (pairs[0].z_emitter.len(), pairs[0].z_receiver.len());
    if fe != fr || pairs.iter().any(|p| p.z_emitter.len() != fe || p.z_receiver.len() != fr) {
        return Err(Error::invalid("feature parts must have equal widths"));
    }
    let n = pairs.len() as f64;
    let mean_abs_cosine = pairs.iter().map(|p| abs_cosine(&p.z_emitter, &p.z_receiver, 1e-12)).sum::<f64>() / n;
    let mut me = vec![0.0; fe];
    let mut mr = vec![0.0; fr];
    for p in pairs {
        for (a, v) in me.iter_mut().zip(&p.z_emitter) {
            *a += v / n;
        }
        for (a, v) in mr.iter_mut().zip(&p.z_receiver) {
            *a += v / n;
        }
    }
    let mut cov = vec![0.0; fe * fr];
    for p in pairs {
        for i in 0..fe {
            let de = p.z_emitter[i] - me[i];
            for j in 0..fr {
                cov[i * fr + j] += de * (p.z_receiver[j] - mr[j]) / n;
            }
        }
    }
    Ok(IndependenceScore {
        mean_abs_cosine,
        cross_cov_spectral_norm: spectral_norm(&cov, fe, fr),
    })
}

/// Largest singular value of a row-major `rows x cols` matrix by power
/// iteration on `A^T A`.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = (0..rows).map(|i| (0..cols).map(|j| a[i * cols + j] * v[j]).sum()).collect();
        let mut w: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| a[i * cols + j] * av[i]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let next = norm.sqrt();
        v = w;
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

const PROXY_HIDDEN: usize = 16;
const PROXY_EPOCHS: usize = 20;
const PROXY_BATCH: usize = 32;
const PROXY_STEP: f64 = 0.1;

/// `2 (1 - 2 err)` clipped to `[0, 2]`, where `err` is the balanced held-out
/// error of a small dense discriminator separating `a` from `b`.
pub fn proxy_divergence(a: &[Vec<f64>], b: &[Vec<f64>], rng: &mut Stream) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("divergence proxy needs at least 2 samples per set"));
    }
    let width = a[0].len();
    if width == 0 || a.iter().chain(b).any(|v| v.len() != width) {
        return Err(Error::invalid("feature widths differ"));
    }
    let split = |set: &[Vec<f64>], rng: &mut Stream| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let half = set.len() / 2;
        (idx[..half].to_vec(), idx[half..].to_vec())
    };
    let (a_fit, a_eval) = split(a, rng);
    let (b_fit, b_eval) = split(b, rng);
    let mut fit: Vec<(&[f64], usize)> = a_fit.iter().map(|&i| (a[i].as_slice(), 0)).collect();
    fit.extend(b_fit.iter().map(|&i| (b[i].as_slice(), 1)));

    let mut mean = vec![0.0; width];
    let mut scale = vec![0.0; width];
    for (x, _) in &fit {
        for (m, v) in mean.iter_mut().zip(*x) {
            *m += v / fit.len() as f64;
        }
    }
    for (x, _) in &fit {
        for ((s, m), v) in scale.iter_mut().zip(&mean).zip(*x) {
            *s += (v - m).powi(2) / fit.len() as f64;
        }
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 });
    let standardize = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect() };

    let specs = [
        LayerSpec::Dense {
            inputs: width,
            outputs: PROXY_HIDDEN,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: PROXY_HIDDEN,
            outputs: 2,
        },
    ];
    let mut net = Stack::init(&specs, rng)?;
    // Class weights balance unequal set sizes.
    let weight = [0.5 / a_fit.len().max(1) as f64, 0.5 / b_fit.len().max(1) as f64];
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for _ in 0..PROXY_EPOCHS {
        order.shuffle(rng);
        for chunk in order.chunks(PROXY_BATCH) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| standardize(fit[i].0)).collect();
            let x = Tensor::new(vec![chunk.len(), width], x)?;
            let (logits, caches) = net.forward(&x, Mode::Train)?;
            let mut grad = vec![0.0; logits.len()];
            let batch_weight: f64 = chunk.iter().map(|&i| weight[fit[i].1]).sum();
            for (r, &i) in chunk.iter().enumerate() {
                let mut p = logits.row(r).to_vec();
                softmax_in_place(&mut p);
                let y = fit[i].1;
                let w = weight[y] / batch_weight;
                for (j, pj) in p.iter().enumerate() {
                    grad[r * 2 + j] = w * (pj - if j == y { 1.0 } else { 0.0 });
                }
            }
            net.zero_grad();
            net.backward(&caches, &Tensor::new(vec![chunk.len(), 2], grad)?, true)?;
            sgd_update(net.params_mut(), PROXY_STEP)?;
        }
    }
    let error_rate = |set: &[Vec<f64>], idx: &[usize], label: usize| -> Result<f64> {
        let x: Vec<f64> = idx.iter().flat_map(|&i| standardize(&set[i])).collect();
        let (logits, _) = net.clone().forward(&Tensor::new(vec![idx.len(), width], x)?, Mode::Infer)?;
        let wrong = (0..idx.len())
            .filter(|&r| crate::riei::argmax(logits.row(r)) != label)
            .count();
        Ok(wrong as f64 / idx.len() as f64)
    };
    let err = 0.5 * (error_rate(a, &a_eval, 0)? + error_rate(b, &b_eval, 1)?);
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

/// CSV `emitter,receiver,f1..fF` of the full extractor output.
pub fn export_features(model: &Model, samples: &[LabeledSample], path: &Path) -> Result<()> {
    std::fs::write(path, features_csv(model, samples)?)?;
    Ok(())
}

pub fn features_csv(model: &Model, samples: &[LabeledSample]) -> Result<String> {
    let z = model.features(&inputs_of(samples, model.arch())?)?;
    let width = z.row_len();
    let mut out = String::from("emitter,receiver");
    for f in 1..=width {
        let _ = write!(out, ",f{f}");
    }
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(out, "{},{}", s.emitter, s.receiver);
        for v in z.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch (or per-round) training and held-out metrics as CSV.
pub fn metrics_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from("step,train_ce,train_ie,train_mi,train_accuracy,test_accuracy\n");
    if outcome.rounds.is_empty() {
        for (e, acc) in outcome.epochs.iter().zip(&outcome.report.accuracy) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                e.ce,
                opt(e.ie),
                opt(e.mi),
                e.train_accuracy,
                acc
            );
        }
    } else {
        for (r, acc) in outcome.rounds.iter().zip(&outcome.report.accuracy) {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            let _ = writeln!(
                out,
                "{},{},{},{},,{}",
                r.round,
                mean(&r.client_ce),
                mean(&r.client_ie),
                mean(&r.client_mi),
                acc
            );
        }
    }
    out
}

/// Writes `metrics.csv`, `summary.json`, `model.ckpt`, `rounds.csv` for
/// federated runs and a `meta.json` sidecar holding the only timestamp.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(outcome))?;
    let summary = serde_json::to_string_pretty(&outcome.report).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    crate::riei::save_checkpoint(&outcome.model, &dir.join("model.ckpt"))?;
    if !outcome.rounds.is_empty() {
        std::fs::write(dir.join("rounds.csv"), fed::round_log_csv(&outcome.rounds))?;
    }
    write_meta(dir)
}

pub fn write_meta(dir: &Path) -> Result<()> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "created_unix": secs,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(dir.join("meta.json"), format!("{meta:#}\n"))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub seed: u64,
    /// Point description, e.g. `NarrowbandHopping@10` or `Sign/0`.
    pub point: String,
    pub final_accuracy: Option<f64>,
    pub last5_mean: Option<f64>,
    pub last5_std: Option<f64>,
    pub uplink_bits: Option<u64>,
    pub error: Option<String>,
}

fn row(kind: SweepKind, seed: u64, point: String, r: Result<MetricsReport>) -> SweepRow {
    match r {
        Ok(m) => SweepRow {
            kind,
            seed,
            point,
            final_accuracy: Some(m.final_accuracy),
            last5_mean: Some(m.last5_mean),
            last5_std: Some(m.last5_std),
            uplink_bits: m.uplink_bits,
            error: None,
        },
        Err(e) => SweepRow {
            kind,
            seed,
            point,
            final_accuracy: None,
            last5_mean: None,
            last5_std: None,
            uplink_bits: None,
            error: Some(e.to_string()),
        },
    }
}

/// Accuracy of a trained model on interfered copies of its held-out set.
pub fn isr_accuracy(outcome: &RunOutcome, icfg: &InterferenceConfig, seed: u64) -> Result<f64> {
    let test = interfere(&outcome.data.test, icfg, seed)?;
    let labels: Vec<usize> = test.iter().map(|s| s.emitter).collect();
    accuracy(&outcome.model, &inputs_of(&test, &outcome.data.arch)?, &labels)
}

/// Runs the configured sweep. ISR points reuse one trained model per seed;
/// sampling-rate and compression points retrain. Failed points are kept
/// with their error.
pub fn run_sweep(base: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let sweep = &base.sweep;
    if sweep.seeds.is_empty() {
        return Err(Error::config("sweep needs at least one seed"));
    }
    let with_seed = |seed: u64| {
        let mut c = base.clone();
        c.set_seed(seed);
        c
    };
    let rows: Vec<Vec<SweepRow>> = match sweep.kind {
        SweepKind::Isr => {
            if sweep.isr_db.is_empty() || sweep.interference_kinds.is_empty() {
                return Err(Error::config("ISR sweep needs isr_db values and interference kinds"));
            }
            sweep
                .seeds
                .par_iter()
                .map(|&seed| {
                    let mut cfg = with_seed(seed);
                    cfg.interference = None;
                    let outcome = match execute(&cfg) {
                        Ok(o) => o,
                        Err(e) => {
                            let msg = e.to_string();
                            return sweep
                                .interference_kinds
                                .iter()
                                .flat_map(|k| sweep.isr_db.iter().map(move |isr| format!("{k:?}@{isr}")))
                                .map(|p| row(SweepKind::Isr, seed, p, Err(Error::invalid(msg.clone()))))
                                .collect();
                        }
                    };
                    let mut out = Vec::new();
                    for &kind in &sweep.interference_kinds {
                        for &isr in &sweep.isr_db {
                            let icfg = InterferenceConfig {
                                kind,
                                isr_db: isr,
                                ..base.interference.unwrap_or(InterferenceConfig::new(kind, isr))
                            };
                            let r = isr_accuracy(&outcome, &icfg, seed).map(|a| MetricsReport {
                                final_accuracy: a,
                                ..outcome.report.clone()
                            });
                            out.push(row(SweepKind::Isr, seed, format!("{kind:?}@{isr}"), r));
                        }
                    }
                    out
                })
                .collect()
        }
        SweepKind::SamplingRate => {
            if sweep.ratios.is_empty() {
                return Err(Error::config("sampling-rate sweep needs ratio vectors"));
            }
            sweep
                .seeds
                .par_iter()
                .flat_map(|&seed| sweep.ratios.par_iter().map(move |r| (seed, r)))
                .map(|(seed, ratios)| {
                    let mut cfg = with_seed(seed);
                    cfg.resample_ratios = Some(ratios.clone());
                    let label = ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("/");
                    vec![row(SweepKind::SamplingRate, seed, label, run_experiment(&cfg))]
                })
                .collect()
        }
        SweepKind::Compression => {
            if sweep.compressors.is_empty() {
                return Err(Error::config("compression sweep needs compressors"));
            }
            sweep
                .seeds
                .par_iter()
                .flat_map(|&seed| sweep.compressors.par_iter().map(move |c| (seed, c)))
                .map(|(seed, point)| {
                    let mut cfg = with_seed(seed);
                    cfg.scenario = Scenario::Federated;
                    cfg.fed.compressor = point.compressor;
                    cfg.fed.sigma = point.sigma;
                    let label = format!("{:?}/{}", point.compressor, point.sigma);
                    vec![row(SweepKind::Compression, seed, label, run_experiment(&cfg))]
                })
                .collect()
        }
    };
    Ok(rows.into_iter().flatten().collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,seed,point,final_accuracy,last5_mean,last5_std,uplink_bits,error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:?},{},{},{},{},{},{},{}",
            r.kind,
            r.seed,
            r.point,
            opt(r.final_accuracy),
            opt(r.last5_mean),
            opt(r.last5_std),
            r.uplink_bits.map(|b| b.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}
