//! Multi-receiver impaired IQ data synthesis.
//!
//! Each frame is produced as
//! `modulate -> apply_emitter(fingerprint) -> apply_channel -> apply_receiver(signature)`,
//! at complex baseband, then normalized to unit RMS. Emitter fingerprints and
//! receiver signatures share the same memoryless impairment chain (IQ
//! imbalance, odd-order polynomial, frequency offset and phase); receivers add
//! an FIR front end, a DC offset and thermal noise.

use crate::dsp;
use crate::error::{Error, Result};
use crate::rng;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

/// Fixed-length complex baseband frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    pub samples: Vec<Complex64>,
}

impl IqFrame {
    pub fn new(samples: Vec<Complex64>) -> Self {
        IqFrame { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// `[I_0..I_{L-1}, Q_0..Q_{L-1}]`, the 2 x L layout fed to the network.
    pub fn to_rows(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.re)
            .chain(self.samples.iter().map(|s| s.im))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite())
    }
}

/// Emitter-side hardware impairments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterFingerprint {
    pub a3: f64,
    pub a5: f64,
    pub iq_gain_mismatch: f64,
    /// radians
    pub iq_phase_mismatch: f64,
    /// cycles per sample
    pub cfo: f64,
    /// radians
    pub phase0: f64,
}

impl EmitterFingerprint {
    pub fn identity() -> Self {
        EmitterFingerprint {
            a3: 0.0,
            a5: 0.0,
            iq_gain_mismatch: 0.0,
            iq_phase_mismatch: 0.0,
            cfo: 0.0,
            phase0: 0.0,
        }
    }

    fn fields(&self) -> [f64; 6] {
        [
            self.a3,
            self.a5,
            self.iq_gain_mismatch,
            self.iq_phase_mismatch,
            self.cfo,
            self.phase0,
        ]
    }
}

/// Receiver-side hardware impairments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverSignature {
    pub impairments: EmitterFingerprint,
    pub dc_offset: Complex64,
    /// Unit-energy real FIR front end.
    pub fir_taps: Vec<f64>,
    pub noise_figure_db: f64,
}

impl ReceiverSignature {
    pub fn identity() -> Self {
        ReceiverSignature {
            impairments: EmitterFingerprint::identity(),
            dc_offset: Complex64::new(0.0, 0.0),
            fir_taps: vec![1.0],
            noise_figure_db: 0.0,
        }
    }
}

/// Complex FIR channel; `[1]` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// `[re, im]` pairs.
    pub taps: Vec<[f64; 2]>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            taps: vec![[1.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn width(&self) -> f64 {
        self.1 - self.0
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.width() <= 0.0 {
            self.0
        } else {
            self.0 + self.width() * rng.random::<f64>()
        }
    }

    fn within(&self, bound: f64) -> bool {
        self.0 <= self.1 && self.0.abs() <= bound && self.1.abs() <= bound
    }
}

/// Sampling ranges for the memoryless impairment chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpairmentRanges {
    pub a3: Range,
    pub a5: Range,
    pub iq_gain_mismatch: Range,
    pub iq_phase_mismatch: Range,
    pub cfo: Range,
    pub phase0: Range,
}

impl ImpairmentRanges {
    pub fn zero() -> Self {
        let z = Range(0.0, 0.0);
        ImpairmentRanges {
            a3: z,
            a5: z,
            iq_gain_mismatch: z,
            iq_phase_mismatch: z,
            cfo: z,
            phase0: z,
        }
    }

    fn widths(&self) -> [f64; 6] {
        [
            self.a3.width(),
            self.a5.width(),
            self.iq_gain_mismatch.width(),
            self.iq_phase_mismatch.width(),
            self.cfo.width(),
            self.phase0.width(),
        ]
    }

    fn validate(&self) -> Result<()> {
        if !self.a3.within(0.5) || !self.a5.within(0.5) || !self.iq_gain_mismatch.within(0.2) {
            return Err(Error::config(
                "impairment ranges must satisfy |a3|,|a5| <= 0.5 and |iq_gain_mismatch| <= 0.2",
            ));
        }
        for r in [self.iq_phase_mismatch, self.cfo, self.phase0] {
            if r.0 > r.1 || !r.0.is_finite() || !r.1.is_finite() {
                return Err(Error::config("impairment range bounds must be finite and ordered"));
            }
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EmitterFingerprint {
        EmitterFingerprint {
            a3: self.a3.sample(rng),
            a5: self.a5.sample(rng),
            iq_gain_mismatch: self.iq_gain_mismatch.sample(rng),
            iq_phase_mismatch: self.iq_phase_mismatch.sample(rng),
            cfo: self.cfo.sample(rng),
            phase0: self.phase0.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureRanges {
    pub impairments: ImpairmentRanges,
    /// DC offset magnitude; the angle is uniform.
    pub dc_offset: Range,
    pub fir_len: usize,
    /// Non-leading taps are uniform in `[-fir_spread, fir_spread]` before
    /// unit-energy normalization.
    pub fir_spread: f64,
    pub noise_figure_db: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Bfsk,
    Qpsk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Emitter count M.
    pub emitters: usize,
    /// Receiver count K.
    pub receivers: usize,
    pub frames_per_pair: usize,
    pub frame_len: usize,
    /// `inf` disables thermal noise.
    pub snr_db: f64,
    pub modulation: Modulation,
    pub samples_per_symbol: usize,
    /// BFSK tone offset in cycles per sample.
    pub fsk_deviation: f64,
    pub seed: u64,
    pub emitter_ranges: ImpairmentRanges,
    pub receiver_ranges: SignatureRanges,
    /// Minimum normalized Chebyshev distance between any two records.
    pub min_gap: f64,
    pub channel: ChannelModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            emitters: 4,
            receivers: 3,
            frames_per_pair: 100,
            frame_len: 256,
            snr_db: 15.0,
            modulation: Modulation::Bfsk,
            samples_per_symbol: 8,
            fsk_deviation: 1.0 / 16.0,
            seed: 0,
            emitter_ranges: ImpairmentRanges {
                a3: Range(-0.15, 0.15),
                a5: Range(-0.05, 0.05),
                iq_gain_mismatch: Range(-0.1, 0.1),
                iq_phase_mismatch: Range(-0.1, 0.1),
                cfo: Range(-0.004, 0.004),
                phase0: Range(-PI, PI),
            },
            receiver_ranges: SignatureRanges {
                impairments: ImpairmentRanges {
                    a3: Range(-0.1, 0.1),
                    a5: Range(-0.03, 0.03),
                    iq_gain_mismatch: Range(-0.1, 0.1),
                    iq_phase_mismatch: Range(-0.1, 0.1),
                    cfo: Range(-0.004, 0.004),
                    phase0: Range(-PI, PI),
                },
                dc_offset: Range(0.0, 0.1),
                fir_len: 5,
                fir_spread: 0.3,
                noise_figure_db: Range(0.0, 3.0),
            },
            min_gap: 0.15,
            channel: ChannelModel::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emitters < 2 || self.receivers < 2 {
            return Err(Error::config("need at least 2 emitters and 2 receivers"));
        }
        if self.frame_len < 32 {
            return Err(Error::config("frame_len must be >= 32"));
        }
        if self.samples_per_symbol == 0 {
            return Err(Error::config("samples_per_symbol must be >= 1"));
        }
        if self.emitters > u16::MAX as usize || self.receivers > u16::MAX as usize {
            return Err(Error::config("label counts must fit in 16 bits"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::config("snr_db is NaN"));
        }
        if self.channel.taps.is_empty() {
            return Err(Error::config("channel needs at least one tap"));
        }
        self.emitter_ranges.validate()?;
        self.receiver_ranges.impairments.validate()?;
        let rr = &self.receiver_ranges;
        if rr.fir_len == 0 || rr.fir_spread < 0.0 || rr.noise_figure_db.0 < 0.0 || rr.dc_offset.0 < 0.0 {
            return Err(Error::config(
                "receiver ranges need fir_len >= 1, fir_spread >= 0, noise figure >= 0, dc offset >= 0",
            ));
        }
        Ok(())
    }
}

/// A frame with its 0-based emitter and receiver labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub frame: IqFrame,
    pub emitter: usize,
    pub receiver: usize,
}

/// Per-receiver sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub emitters: usize,
    pub receivers: usize,
    pub frame_len: usize,
    pub by_receiver: BTreeMap<usize, Vec<LabeledSample>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.by_receiver.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &LabeledSample> {
        self.by_receiver.values().flatten()
    }
}

fn normalized_distance(a: &[f64], b: &[f64], widths: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(widths)
        .filter(|(_, &w)| w > 0.0)
        .map(|((x, y), w)| (x - y).abs() / w)
        .fold(0.0, f64::max)
}

const MAX_ATTEMPTS: usize = 1000;

fn sample_separated<T, R: Rng + ?Sized>(
    count: usize,
    gap: f64,
    widths: &[f64],
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> T,
    coords: impl Fn(&T) -> Vec<f64>,
    what: &str,
) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::with_capacity(count);
    while out.len() < count {
        let mut accepted = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = draw(rng);
            let c = coords(&cand);
            if out
                .iter()
                .all(|o| normalized_distance(&coords(o), &c, widths) >= gap)
            {
                out.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::config(format!(
                "cannot draw {count} {what} separated by gap {gap} within {MAX_ATTEMPTS} attempts"
            )));
        }
    }
    Ok(out)
}

pub fn sample_fingerprints<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<EmitterFingerprint>> {
    cfg.validate()?;
    let ranges = cfg.emitter_ranges;
    sample_separated(
        cfg.emitters,
        cfg.min_gap,
        &ranges.widths(),
        rng,
        |r| ranges.sample(r),
        |f| f.fields().to_vec(),
        "emitter fingerprints",
    )
}

fn signature_coords(s: &ReceiverSignature) -> Vec<f64> {
    let mut c = s.impairments.fields().to_vec();
    c.push(s.dc_offset.norm());
    c.push(s.noise_figure_db);
    c.extend(s.fir_taps.iter().skip(1));
    c
}

pub fn sample_signatures<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<ReceiverSignature>> {
    cfg.validate()?;
    let rr = cfg.receiver_ranges;
    let mut widths = rr.impairments.widths().to_vec();
    widths.push(rr.dc_offset.width());
    widths.push(rr.noise_figure_db.width());
    widths.extend(std::iter::repeat_n(2.0 * rr.fir_spread, rr.fir_len - 1));
    let draw = |r: &mut R| {
        let impairments = rr.impairments.sample(r);
        let dc_mag = rr.dc_offset.sample(r);
        let dc_angle = 2.0 * PI * r.random::<f64>();
        let mut taps = vec![1.0];
        for _ in 1..rr.fir_len {
            taps.push(if rr.fir_spread > 0.0 {
                r.random_range(-rr.fir_spread..=rr.fir_spread)
            } else {
                0.0
            });
        }
        let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
        taps.iter_mut().for_each(|t| *t /= energy);
        ReceiverSignature {
            impairments,
            dc_offset: Complex64::from_polar(dc_mag, dc_angle),
            fir_taps: taps,
            noise_figure_db: rr.noise_figure_db.sample(r),
        }
    };
    sample_separated(
        cfg.receivers,
        cfg.min_gap,
        &widths,
        rng,
        draw,
        signature_coords,
        "receiver signatures",
    )
}

/// Clean unit-RMS baseband for the given bits.
///
/// BFSK maps bit 0 to `-deviation` and bit 1 to `+deviation` with continuous
/// phase. QPSK uses Gray mapping with rectangular pulses.
pub fn modulate(
    bits: &[bool],
    scheme: Modulation,
    len: usize,
    samples_per_symbol: usize,
    deviation: f64,
) -> Result<IqFrame> {
    if samples_per_symbol == 0 || len == 0 {
        return Err(Error::invalid("frame length and samples per symbol must be >= 1"));
    }
    let symbols = len.div_ceil(samples_per_symbol);
    let needed = match scheme {
        Modulation::Bfsk => symbols,
        Modulation::Qpsk => 2 * symbols,
    };
    if bits.len() < needed {
        return Err(Error::invalid(format!(
            "{scheme:?} needs {needed} bits for {len} samples, got {}",
            bits.len()
        )));
    }
    let samples: Vec<Complex64> = match scheme {
        Modulation::Bfsk => {
            let mut phase = 0.0f64;
            (0..len)
                .map(|n| {
                    let f = if bits[n / samples_per_symbol] { deviation } else { -deviation };
                    let s = Complex64::from_polar(1.0, phase);
                    phase = (phase + 2.0 * PI * f).rem_euclid(2.0 * PI);
                    s
                })
                .collect()
        }
        Modulation::Qpsk => (0..len)
            .map(|n| {
                let sym = n / samples_per_symbol;
                let (b0, b1) = (bits[2 * sym], bits[2 * sym + 1]);
                // 00 -> (1+j), 01 -> (-1+j), 11 -> (-1-j), 10 -> (1-j)
                let re = if b1 { -1.0 } else { 1.0 };
                let im = if b0 { -1.0 } else { 1.0 };
                Complex64::new(re, im) / SQRT_2
            })
            .collect(),
    };
    dsp::normalize_rms(&IqFrame::new(samples))
}

fn impair(imp: &EmitterFingerprint, x: &[Complex64]) -> Vec<Complex64> {
    let g = 1.0 + imp.iq_gain_mismatch;
    let (sin_e, cos_e) = imp.iq_phase_mismatch.sin_cos();
    x.iter()
        .enumerate()
        .map(|(n, s)| {
            let v = Complex64::new(g * s.re, s.im * cos_e + s.re * sin_e);
            let p = v.norm_sqr();
            let w = v * (1.0 + imp.a3 * p + imp.a5 * p * p);
            w * Complex64::from_polar(1.0, 2.0 * PI * imp.cfo * n as f64 + imp.phase0)
        })
        .collect()
}

/// Emitter nonlinearity chain: IQ imbalance, odd-order polynomial, then
/// rotation by `2*pi*cfo*n + phase0`.
pub fn apply_emitter(fp: &EmitterFingerprint, s: &IqFrame) -> IqFrame {
    IqFrame::new(impair(fp, &s.samples))
}

/// Same-length causal convolution (zero-padded head).
pub fn apply_channel(ch: &ChannelModel, u: &IqFrame) -> Result<IqFrame> {
    if ch.taps.is_empty() {
        return Err(Error::config("channel needs at least one tap"));
    }
    let taps: Vec<Complex64> = ch.taps.iter().map(|t| Complex64::new(t[0], t[1])).collect();
    Ok(IqFrame::new(convolve_same(&taps, &u.samples)))
}

fn convolve_same<T>(taps: &[T], x: &[Complex64]) -> Vec<Complex64>
where
    T: Copy + std::ops::Mul<Complex64, Output = Complex64>,
{
    (0..x.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .take(n + 1)
                .map(|(j, &t)| t * x[n - j])
                .sum()
        })
        .collect()
}

/// Complex white Gaussian noise of total power `power`.
pub fn complex_noise<R: Rng + ?Sized>(len: usize, power: f64, rng: &mut R) -> Vec<Complex64> {
    let sd = (power / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// Receiver chain: FIR front end, memoryless impairments, DC offset, then
/// noise of power `10^((nf - snr)/10)` relative to a unit reference.
/// `snr_db = inf` disables the noise.
pub fn apply_receiver<R: Rng + ?Sized>(
    sig: &ReceiverSignature,
    u: &IqFrame,
    snr_db: f64,
    rng: &mut R,
) -> IqFrame {
    let filtered = convolve_same(&sig.fir_taps, &u.samples);
    let mut out = impair(&sig.impairments, &filtered);
    for s in &mut out {
        *s += sig.dc_offset;
    }
    if snr_db.is_finite() {
        let power = 10f64.powf((sig.noise_figure_db - snr_db) / 10.0);
        for (s, n) in out.iter_mut().zip(complex_noise(u.len(), power, rng)) {
            *s += n;
        }
    }
    IqFrame::new(out)
}

/// Emitted frame before the receiver (modulation, fingerprint, channel).
fn emitted_frame(cfg: &SynthConfig, fp: &EmitterFingerprint, rng: &mut rng::Stream) -> Result<IqFrame> {
    let symbols = cfg.frame_len.div_ceil(cfg.samples_per_symbol);
    let nbits = match cfg.modulation {
        Modulation::Bfsk => symbols,
        Modulation::Qpsk => 2 * symbols,
    };
    let bits: Vec<bool> = (0..nbits).map(|_| rng.random()).collect();
    let s = modulate(
        &bits,
        cfg.modulation,
        cfg.frame_len,
        cfg.samples_per_symbol,
        cfg.fsk_deviation,
    )?;
    apply_channel(&cfg.channel, &apply_emitter(fp, &s))
}

/// Fingerprints and signatures drawn for a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub fingerprints: Vec<EmitterFingerprint>,
    pub signatures: Vec<ReceiverSignature>,
}

pub fn sample_population(cfg: &SynthConfig) -> Result<Population> {
    let fingerprints = sample_fingerprints(cfg, &mut rng::stream(cfg.seed, "fingerprints", &[]))?;
    let signatures = sample_signatures(cfg, &mut rng::stream(cfg.seed, "signatures", &[]))?;
    Ok(Population {
        fingerprints,
        signatures,
    })
}

/// One normalized frame for emitter `m` through receiver `k`, index `i`.
pub fn synthesize_frame(cfg: &SynthConfig, pop: &Population, m: usize, k: usize, i: usize) -> Result<IqFrame> {
    let mut r = rng::stream(cfg.seed, "frame", &[m as u64, k as u64, i as u64]);
    let emitted = emitted_frame(cfg, &pop.fingerprints[m], &mut r)?;
    let received = apply_receiver(&pop.signatures[k], &emitted, cfg.snr_db, &mut r);
    dsp::normalize_rms(&received)
}

pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let pop = sample_population(cfg)?;
    synthesize_with(cfg, &pop)
}

pub fn synthesize_with(cfg: &SynthConfig, pop: &Population) -> Result<Dataset> {
    cfg.validate()?;
    let mut by_receiver = BTreeMap::new();
    for k in 0..cfg.receivers {
        let samples = (0..cfg.emitters * cfg.frames_per_pair)
            .into_par_iter()
            .map(|j| {
                let (m, i) = (j / cfg.frames_per_pair, j % cfg.frames_per_pair);
                synthesize_frame(cfg, pop, m, k, i).map(|frame| LabeledSample {
                    frame,
                    emitter: m,
                    receiver: k,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        by_receiver.insert(k, samples);
    }
    Ok(Dataset {
        emitters: cfg.emitters,
        receivers: cfg.receivers,
        frame_len: cfg.frame_len,
        by_receiver,
    })
}

/// Pre-noise frame from emitter `m` (for energy sanity checks).
pub fn emitted_for(cfg: &SynthConfig, pop: &Population, m: usize, i: usize) -> Result<IqFrame> {
    let mut r = rng::stream(cfg.seed, "frame", &[m as u64, 0, i as u64]);
    emitted_frame(cfg, &pop.fingerprints[m], &mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn zero_width_ranges_cannot_satisfy_gap() {
        let mut cfg = SynthConfig::default();
        cfg.emitter_ranges = ImpairmentRanges::zero();
        let err = sample_fingerprints(&cfg, &mut rng::stream(1, "fp", &[])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        cfg.receiver_ranges.impairments = ImpairmentRanges::zero();
        cfg.receiver_ranges.dc_offset = Range(0.0, 0.0);
        cfg.receiver_ranges.fir_spread = 0.0;
        cfg.receiver_ranges.noise_figure_db = Range(1.0, 1.0);
        let err = sample_signatures(&cfg, &mut rng::stream(1, "sig", &[])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sampling_is_deterministic_and_separated() {
        let cfg = SynthConfig::default();
        let a = sample_fingerprints(&cfg, &mut rng::stream(9, "fp", &[])).unwrap();
        let b = sample_fingerprints(&cfg, &mut rng::stream(9, "fp", &[])).unwrap();
        assert_eq!(a, b);
        let widths = cfg.emitter_ranges.widths();
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let d = normalized_distance(&a[i].fields(), &a[j].fields(), &widths);
                assert!(d >= cfg.min_gap);
            }
        }
        let s1 = sample_signatures(&cfg, &mut rng::stream(9, "sig", &[])).unwrap();
        let s2 = sample_signatures(&cfg, &mut rng::stream(9, "sig", &[])).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(s1[i], s1[j]);
            }
            let energy: f64 = s1[i].fir_taps.iter().map(|t| t * t).sum();
            assert!((energy - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bfsk_zero_bits_is_a_single_tone() {
        let frame = modulate(&[false; 32], Modulation::Bfsk, 256, 8, 1.0 / 16.0).unwrap();
        let spectrum = dsp::dft(&frame.samples);
        let peak = spectrum
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap()
            .0;
        // -1/16 cycles/sample on a 256-point grid
        assert_eq!(peak, 256 - 16);
        assert!((frame.rms() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn qpsk_mapping_and_rms() {
        let frame = modulate(&[false, false, true, true], Modulation::Qpsk, 16, 8, 0.0).unwrap();
        let expected = c(1.0, 1.0) / SQRT_2;
        for s in &frame.samples[..8] {
            assert!((s - expected).norm() < 1e-12);
        }
        for s in &frame.samples[8..] {
            assert!((s - c(-1.0, -1.0) / SQRT_2).norm() < 1e-12);
        }
        assert!((frame.rms() - 1.0).abs() < 1e-9);
        assert!(matches!(
            modulate(&[true], Modulation::Qpsk, 16, 8, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn emitter_examples() {
        let input = IqFrame::new((0..16).map(|n| c((n as f64).cos(), 0.3)).collect());
        assert_eq!(apply_emitter(&EmitterFingerprint::identity(), &input), input);

        let mut fp = EmitterFingerprint::identity();
        fp.a3 = 0.1;
        let unit = IqFrame::new(vec![c(0.6, 0.8); 8]);
        for s in apply_emitter(&fp, &unit).samples {
            assert!((s.norm() - 1.1).abs() < 1e-15);
        }

        let mut fp = EmitterFingerprint::identity();
        fp.cfo = 0.25;
        let dc = IqFrame::new(vec![c(1.0, 0.0); 64]);
        let spectrum = dsp::dft(&apply_emitter(&fp, &dc).samples);
        let total: f64 = spectrum.iter().map(|s| s.norm_sqr()).sum();
        assert!((spectrum[16].norm_sqr() / total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_examples() {
        let x = IqFrame::new((0..10).map(|n| c(n as f64, -(n as f64) * 0.5)).collect());
        let id = ChannelModel::default();
        assert_eq!(apply_channel(&id, &x).unwrap(), x);
        let delay = ChannelModel {
            taps: vec![[0.0, 0.0], [1.0, 0.0]],
        };
        let y = apply_channel(&delay, &x).unwrap();
        assert_eq!(y.samples[0], c(0.0, 0.0));
        assert_eq!(&y.samples[1..], &x.samples[..9]);
        assert!(apply_channel(&ChannelModel { taps: vec![] }, &x).is_err());
    }

    #[test]
    fn receiver_identity_and_noise_power() {
        let x = IqFrame::new((0..32).map(|n| c((n as f64 * 0.3).sin(), 0.1)).collect());
        let mut r = rng::stream(0, "t", &[]);
        let y = apply_receiver(&ReceiverSignature::identity(), &x, f64::INFINITY, &mut r);
        assert_eq!(y, x);

        let zeros = IqFrame::new(vec![c(0.0, 0.0); 4096]);
        let a = apply_receiver(&ReceiverSignature::identity(), &zeros, 0.0, &mut rng::stream(3, "n", &[]));
        let b = apply_receiver(&ReceiverSignature::identity(), &zeros, 0.0, &mut rng::stream(3, "n", &[]));
        assert_eq!(a, b);
        assert!((a.power() - 1.0).abs() < 0.05, "noise power {}", a.power());
    }

    #[test]
    fn dataset_counts_and_labels() {
        let cfg = SynthConfig {
            emitters: 2,
            receivers: 2,
            frames_per_pair: 10,
            ..SynthConfig::default()
        };
        let ds = synthesize_dataset(&cfg).unwrap();
        for (k, samples) in &ds.by_receiver {
            assert_eq!(samples.len(), 20);
            assert_eq!(samples.iter().filter(|s| s.emitter == 0).count(), 10);
            assert!(samples.iter().all(|s| s.receiver == *k));
            assert!(samples.iter().all(|s| (s.frame.rms() - 1.0).abs() < 1e-9));
        }
        assert_eq!(ds, synthesize_dataset(&cfg).unwrap());
    }

    #[test]
    fn same_emitter_differs_across_receivers() {
        let cfg = SynthConfig {
            snr_db: f64::INFINITY,
            ..SynthConfig::default()
        };
        let pop = sample_population(&cfg).unwrap();
        let mut r = rng::stream(5, "t", &[]);
        let emitted = emitted_for(&cfg, &pop, 0, 0).unwrap();
        let a = apply_receiver(&pop.signatures[0], &emitted, cfg.snr_db, &mut r);
        let b = apply_receiver(&pop.signatures[1], &emitted, cfg.snr_db, &mut r);
        let max_diff = a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);
    }
}
