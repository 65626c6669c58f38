//! Preprocessing (energy detection, filtering, framing, normalization),
//! spectrograms, interference injection and cubic-spline resampling.

use crate::error::{Error, Result};
use crate::synth::{complex_noise, IqFrame};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Variable-length complex capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub samples: Vec<Complex64>,
    /// Relative to the nominal rate.
    pub sample_rate: f64,
}

impl Stream {
    pub fn new(samples: Vec<Complex64>) -> Self {
        Stream {
            samples,
            sample_rate: 1.0,
        }
    }
}

/// Maximal regions `[start, end)` whose sliding-window mean power exceeds
/// `threshold_factor` times the median window power of the whole stream.
pub fn energy_detect(stream: &Stream, window: usize, threshold_factor: f64) -> Result<Vec<(usize, usize)>> {
    let x = &stream.samples;
    if x.is_empty() {
        return Err(Error::invalid("empty stream"));
    }
    if window == 0 || window > x.len() {
        return Err(Error::invalid(format!(
            "window {window} must be in 1..={}",
            x.len()
        )));
    }
    let mut powers = Vec::with_capacity(x.len() - window + 1);
    let mut acc: f64 = x[..window].iter().map(|s| s.norm_sqr()).sum();
    powers.push(acc / window as f64);
    for i in window..x.len() {
        acc += x[i].norm_sqr() - x[i - window].norm_sqr();
        powers.push(acc.max(0.0) / window as f64);
    }
    let mut sorted = powers.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let threshold = threshold_factor * median;
    // Running sums can leave ~1e-17 residue where the window is all zeros.
    let floor = f64::EPSILON * sorted.last().copied().unwrap_or(0.0);
    let mut segments = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &p) in powers.iter().enumerate() {
        let hot = p > threshold && p > floor;
        match (hot, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                segments.push((s, i - 1 + window));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        segments.push((s, powers.len() - 1 + window));
    }
    Ok(segments)
}

/// Hamming-windowed sinc lowpass with unit DC gain.
pub fn lowpass_taps(cutoff: f64, taps: usize) -> Result<Vec<f64>> {
    if taps.is_multiple_of(2) || taps == 0 {
        return Err(Error::config(format!("lowpass needs an odd tap count, got {taps}")));
    }
    if !(cutoff > 0.0 && cutoff < 0.5) {
        return Err(Error::config(format!("cutoff {cutoff} outside (0, 0.5)")));
    }
    let mid = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let w = if taps == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos()
            };
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    Ok(h)
}

/// Linear-phase lowpass with the group delay removed (same-length output).
pub fn lowpass_filter(stream: &Stream, cutoff: f64, taps: usize) -> Result<Stream> {
    let h = lowpass_taps(cutoff, taps)?;
    let delay = taps / 2;
    let x = &stream.samples;
    let n = x.len() as isize;
    let samples = (0..x.len() as isize)
        .map(|i| {
            h.iter()
                .enumerate()
                .filter_map(|(j, &hj)| {
                    let idx = i + delay as isize - j as isize;
                    (0..n).contains(&idx).then(|| hj * x[idx as usize])
                })
                .sum()
        })
        .collect();
    Ok(Stream {
        samples,
        sample_rate: stream.sample_rate,
    })
}

/// Frames at offsets `0, hop, 2*hop, ...`; a trailing partial frame is dropped.
pub fn frame_stream(stream: &Stream, len: usize, hop: usize) -> Result<Vec<IqFrame>> {
    if hop == 0 || len == 0 {
        return Err(Error::config("frame length and hop must be >= 1"));
    }
    let x = &stream.samples;
    if len > x.len() {
        return Ok(Vec::new());
    }
    Ok((0..=(x.len() - len) / hop)
        .map(|f| IqFrame::new(x[f * hop..f * hop + len].to_vec()))
        .collect())
}

pub fn normalize_rms(frame: &IqFrame) -> Result<IqFrame> {
    let rms = frame.rms();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite frame"));
    }
    Ok(IqFrame::new(frame.samples.iter().map(|s| s / rms).collect()))
}

pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_inverse(x.len()).process(&mut buf);
    let n = x.len() as f64;
    buf.iter_mut().for_each(|v| *v /= n);
    buf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
    Rect,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rect => vec![1.0; len],
            // periodic Hann
            Window::Hann => (0..len)
                .map(|i| (PI * i as f64 / len as f64).sin().powi(2))
                .collect(),
        }
    }
}

/// Magnitude spectrogram, `frames x bins`, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub window_len: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.magnitudes[t * self.bins..(t + 1) * self.bins]
    }
}

pub fn stft(frame: &IqFrame, window_len: usize, hop: usize, window: Window) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(Error::config("stft hop must be >= 1"));
    }
    if window_len == 0 || window_len > frame.len() {
        return Err(Error::config(format!(
            "window length {window_len} must be in 1..={}",
            frame.len()
        )));
    }
    let w = window.coefficients(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let frames = (frame.len() - window_len) / hop + 1;
    let mut magnitudes = Vec::with_capacity(frames * window_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = frame.samples[t * hop + i] * w[i];
        }
        fft.process(&mut buf);
        magnitudes.extend(buf.iter().map(|v| v.norm()));
    }
    Ok(Spectrogram {
        magnitudes,
        frames,
        bins: window_len,
        window_len,
        hop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterferenceKind {
    NarrowbandHopping,
    BroadbandGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceConfig {
    pub kind: InterferenceKind,
    /// Interference-to-signal power ratio; `-inf` disables injection.
    pub isr_db: f64,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_select")]
    pub n_select: usize,
}

fn default_bins() -> usize {
    256
}

fn default_select() -> usize {
    2
}

impl InterferenceConfig {
    pub fn new(kind: InterferenceKind, isr_db: f64) -> Self {
        InterferenceConfig {
            kind,
            isr_db,
            n_bins: default_bins(),
            n_select: default_select(),
        }
    }
}

fn scaled_add(frame: &IqFrame, interference: &[Complex64], isr_db: f64) -> IqFrame {
    let target = frame.power() * 10f64.powf(isr_db / 10.0);
    let actual = interference.iter().map(|v| v.norm_sqr()).sum::<f64>() / interference.len() as f64;
    let scale = if actual > 0.0 { (target / actual).sqrt() } else { 0.0 };
    IqFrame::new(
        frame
            .samples
            .iter()
            .zip(interference)
            .map(|(s, i)| s + i * scale)
            .collect(),
    )
}

/// Adds complex Gaussian interference in `n_select` of `n_bins` frequency
/// bins chosen afresh for each call, scaled so that the interference power
/// over the frame is exactly `isr_db` relative to the frame power.
pub fn inject_narrowband<R: Rng + ?Sized>(frame: &IqFrame, cfg: &InterferenceConfig, rng: &mut R) -> Result<IqFrame> {
    if cfg.kind != InterferenceKind::NarrowbandHopping {
        return Err(Error::config("inject_narrowband needs NarrowbandHopping"));
    }
    if cfg.n_select == 0 || cfg.n_select >= cfg.n_bins {
        return Err(Error::config(format!(
            "n_select {} must be in 1..{}",
            cfg.n_select, cfg.n_bins
        )));
    }
    if cfg.n_bins > frame.len() {
        return Err(Error::config("n_bins exceeds frame length"));
    }
    if cfg.isr_db == f64::NEG_INFINITY {
        return Ok(frame.clone());
    }
    let bins = selected_bins(cfg, rng);
    let coeffs: Vec<Complex64> = bins
        .iter()
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im)
        })
        .collect();
    let interference: Vec<Complex64> = (0..frame.len())
        .map(|n| {
            bins.iter()
                .zip(&coeffs)
                .map(|(&b, g)| g * Complex64::from_polar(1.0, 2.0 * PI * (b * n) as f64 / cfg.n_bins as f64))
                .sum()
        })
        .collect();
    Ok(scaled_add(frame, &interference, cfg.isr_db))
}

/// The bins a narrowband injection picks for this stream state.
pub fn selected_bins<R: Rng + ?Sized>(cfg: &InterferenceConfig, rng: &mut R) -> Vec<usize> {
    let mut bins = sample(rng, cfg.n_bins, cfg.n_select).into_vec();
    bins.sort_unstable();
    bins
}

/// Adds complex white Gaussian noise at exactly `isr_db` relative to the
/// frame power.
pub fn inject_broadband<R: Rng + ?Sized>(frame: &IqFrame, cfg: &InterferenceConfig, rng: &mut R) -> Result<IqFrame> {
    if cfg.kind != InterferenceKind::BroadbandGaussian {
        return Err(Error::config("inject_broadband needs BroadbandGaussian"));
    }
    if cfg.isr_db == f64::NEG_INFINITY {
        return Ok(frame.clone());
    }
    let noise = complex_noise(frame.len(), 1.0, rng);
    Ok(scaled_add(frame, &noise, cfg.isr_db))
}

pub fn inject<R: Rng + ?Sized>(frame: &IqFrame, cfg: &InterferenceConfig, rng: &mut R) -> Result<IqFrame> {
    match cfg.kind {
        InterferenceKind::NarrowbandHopping => inject_narrowband(frame, cfg, rng),
        InterferenceKind::BroadbandGaussian => inject_broadband(frame, cfg, rng),
    }
}

/// Natural cubic spline through `(i * spacing, y[i])`.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    spacing: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(y: &[f64], spacing: f64) -> Result<Self> {
        let n = y.len();
        if n < 4 {
            return Err(Error::invalid("a cubic spline needs at least 4 knots"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("knot spacing must be positive"));
        }
        // Second derivatives with m[0] = m[n-1] = 0; Thomas algorithm on the
        // interior system 4 m_i + m_{i-1} + m_{i+1} = 6/h^2 (y_{i-1} - 2 y_i + y_{i+1}).
        let h2 = spacing * spacing;
        let interior = n - 2;
        let mut c = vec![0.0; interior];
        let mut d = vec![0.0; interior];
        for i in 0..interior {
            let rhs = 6.0 * (y[i] - 2.0 * y[i + 1] + y[i + 2]) / h2;
            if i == 0 {
                c[i] = 1.0 / 4.0;
                d[i] = rhs / 4.0;
            } else {
                let denom = 4.0 - c[i - 1];
                c[i] = 1.0 / denom;
                d[i] = (rhs - d[i - 1]) / denom;
            }
        }
        let mut m = vec![0.0; n];
        for i in (0..interior).rev() {
            m[i + 1] = d[i] - if i + 1 < interior { c[i] * m[i + 2] } else { 0.0 };
        }
        Ok(CubicSpline {
            spacing,
            y: y.to_vec(),
            m,
        })
    }

    /// Evaluates at `t`, extrapolating with the end segments outside the knots.
    pub fn eval(&self, t: f64) -> f64 {
        let h = self.spacing;
        let last = self.y.len() - 2;
        let i = ((t / h).floor().max(0.0) as usize).min(last);
        let a = (i + 1) as f64 * h - t;
        let b = t - i as f64 * h;
        self.m[i] * a.powi(3) / (6.0 * h)
            + self.m[i + 1] * b.powi(3) / (6.0 * h)
            + (self.y[i] / h - self.m[i] * h / 6.0) * a
            + (self.y[i + 1] / h - self.m[i + 1] * h / 6.0) * b
    }
}

fn spline_resample(samples: &[Complex64], spacing: f64, times: &[f64]) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = samples.iter().map(|s| s.re).collect();
    let im: Vec<f64> = samples.iter().map(|s| s.im).collect();
    let (sr, si) = (CubicSpline::new(&re, spacing)?, CubicSpline::new(&im, spacing)?);
    Ok(times.iter().map(|&t| Complex64::new(sr.eval(t), si.eval(t))).collect())
}

/// Simulates capturing the frame at `ratio` times the nominal rate and
/// interpolating back: the frame is sampled by a natural cubic spline at
/// spacing `1/ratio` over its time extent, and a second spline through those
/// samples is evaluated on the original `L` uniform points.
pub fn resample_cubic(frame: &IqFrame, ratio: f64) -> Result<IqFrame> {
    if !(0.1..=10.0).contains(&ratio) {
        return Err(Error::invalid(format!("resampling ratio {ratio} outside [0.1, 10]")));
    }
    let len = frame.len();
    if len < 4 {
        return Err(Error::invalid("resampling needs at least 4 samples"));
    }
    let extent = (len - 1) as f64;
    let spacing = 1.0 / ratio;
    let count = ((extent * ratio + 1e-9).floor() as usize + 1).max(4);
    let capture_times: Vec<f64> = (0..count).map(|i| i as f64 * spacing).collect();
    let captured = spline_resample(&frame.samples, 1.0, &capture_times)?;
    let nominal: Vec<f64> = (0..len).map(|i| i as f64).collect();
    Ok(IqFrame::new(spline_resample(&captured, spacing, &nominal)?))
}

/// Power-weighted mean normalized frequency of the frame's spectrum, in
/// cycles per sample over `[-0.5, 0.5)`.
pub fn spectral_centroid(frame: &IqFrame) -> f64 {
    let spec = dft(&frame.samples);
    let n = spec.len();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, v) in spec.iter().enumerate() {
        let f = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 } / n as f64;
        num += f * v.norm_sqr();
        den += v.norm_sqr();
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// `E|x|^4 / (E|x|^2)^2`.
pub fn amplitude_kurtosis(frame: &IqFrame) -> f64 {
    let p2 = frame.power();
    let p4 = frame.samples.iter().map(|s| s.norm_sqr().powi(2)).sum::<f64>() / frame.len() as f64;
    p4 / (p2 * p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn tone(freq: f64, len: usize) -> Vec<Complex64> {
        (0..len)
            .map(|n| Complex64::from_polar(1.0, 2.0 * PI * freq * n as f64))
            .collect()
    }

    /// Direct scan: every window whose mean power beats the threshold.
    fn brute_force_hot_windows(x: &[Complex64], window: usize, factor: f64) -> Vec<usize> {
        let powers: Vec<f64> = (0..=x.len() - window)
            .map(|i| x[i..i + window].iter().map(|s| s.norm_sqr()).sum::<f64>() / window as f64)
            .collect();
        let mut sorted = powers.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]);
        (0..powers.len())
            .filter(|&i| powers[i] > factor * median)
            .collect()
    }

    #[test]
    fn energy_detect_finds_the_burst() {
        let mut x = vec![c(0.0, 0.0); 1000];
        for (i, s) in x.iter_mut().enumerate().take(600).skip(400) {
            *s = Complex64::from_polar(1.0, i as f64 * 0.7);
        }
        let segs = energy_detect(&Stream::new(x.clone()), 32, 3.0).unwrap();
        assert_eq!(segs.len(), 1);
        let (s, e) = segs[0];
        assert!(s <= 400 && e >= 600);
        assert!(s >= 400 - 32 && e <= 600 + 32);
        let hot = brute_force_hot_windows(&x, 32, 3.0);
        assert_eq!((s, e), (hot[0], hot[hot.len() - 1] + 32));
    }

    #[test]
    fn energy_detect_degenerate_streams() {
        assert!(energy_detect(&Stream::new(vec![c(0.0, 0.0); 100]), 8, 3.0)
            .unwrap()
            .is_empty());
        assert!(energy_detect(&Stream::new(tone(0.1, 300)), 8, 3.0)
            .unwrap()
            .is_empty());
        assert!(matches!(
            energy_detect(&Stream::new(vec![]), 8, 3.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn lowpass_behaviour() {
        let dc = Stream::new(vec![c(1.0, -0.5); 200]);
        let y = lowpass_filter(&dc, 0.1, 63).unwrap();
        for s in &y.samples[40..160] {
            assert!((s - c(1.0, -0.5)).norm() < 1e-3);
        }

        let x = Stream::new(tone(0.45, 1024));
        let y = lowpass_filter(&x, 0.1, 63).unwrap();
        let p_in: f64 = x.samples[100..900].iter().map(|s| s.norm_sqr()).sum();
        let p_out: f64 = y.samples[100..900].iter().map(|s| s.norm_sqr()).sum();
        assert!(10.0 * (p_in / p_out).log10() > 30.0);

        let mut imp = vec![c(0.0, 0.0); 101];
        imp[50] = c(1.0, 0.0);
        let y = lowpass_filter(&Stream::new(imp.clone()), 0.499, 31).unwrap();
        for (a, b) in y.samples.iter().zip(&imp) {
            assert!((a - b).norm() < 0.02);
        }
        assert!(matches!(lowpass_filter(&dc, 0.1, 64), Err(Error::Config(_))));
    }

    #[test]
    fn framing_counts() {
        let s = Stream::new(vec![c(1.0, 0.0); 1024]);
        assert_eq!(frame_stream(&s, 256, 256).unwrap().len(), 4);
        assert_eq!(frame_stream(&s, 256, 128).unwrap().len(), 7);
        let short = Stream::new(vec![c(1.0, 0.0); 255]);
        assert!(frame_stream(&short, 256, 256).unwrap().is_empty());
    }

    #[test]
    fn framing_exact_multiples_partitions() {
        let x: Vec<Complex64> = (0..768).map(|n| c(n as f64, 0.0)).collect();
        let frames = frame_stream(&Stream::new(x.clone()), 256, 256).unwrap();
        let joined: Vec<Complex64> = frames.into_iter().flat_map(|f| f.samples).collect();
        assert_eq!(joined, x);
    }

    #[test]
    fn normalize_examples() {
        let f = IqFrame::new(vec![c(4.0, 0.0), c(0.0, -4.0)]);
        let n = normalize_rms(&f).unwrap();
        assert_eq!(n.samples, vec![c(1.0, 0.0), c(0.0, -1.0)]);
        let again = normalize_rms(&n).unwrap();
        for (a, b) in again.samples.iter().zip(&n.samples) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(normalize_rms(&IqFrame::new(vec![c(0.0, 0.0); 4])).is_err());
    }

    #[test]
    fn stft_examples() {
        let f = IqFrame::new(tone(5.0 / 32.0, 32));
        let s = stft(&f, 32, 32, Window::Rect).unwrap();
        assert_eq!(s.frames, 1);
        for (k, &m) in s.row(0).iter().enumerate() {
            if k == 5 {
                assert!((m - 32.0).abs() < 1e-9);
            } else {
                assert!(m < 1e-9);
            }
        }
        let z = stft(&IqFrame::new(vec![c(0.0, 0.0); 64]), 16, 8, Window::Hann).unwrap();
        assert_eq!(z.frames, 7);
        assert!(z.magnitudes.iter().all(|&m| m == 0.0));
        assert!(matches!(stft(&f, 16, 0, Window::Hann), Err(Error::Config(_))));
    }

    #[test]
    fn injection_disabled_is_identity() {
        let f = IqFrame::new(tone(0.1, 256));
        let mut r = rng::stream(1, "t", &[]);
        for kind in [InterferenceKind::NarrowbandHopping, InterferenceKind::BroadbandGaussian] {
            let cfg = InterferenceConfig::new(kind, f64::NEG_INFINITY);
            assert_eq!(inject(&f, &cfg, &mut r).unwrap(), f);
        }
        let bad = InterferenceConfig {
            n_select: 256,
            ..InterferenceConfig::new(InterferenceKind::NarrowbandHopping, 0.0)
        };
        assert!(matches!(inject(&f, &bad, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn narrowband_bins_vary_between_frames() {
        let cfg = InterferenceConfig::new(InterferenceKind::NarrowbandHopping, 0.0);
        let mut r = rng::stream(4, "t", &[]);
        let draws: Vec<Vec<usize>> = (0..100).map(|_| selected_bins(&cfg, &mut r)).collect();
        let repeats = draws.windows(2).filter(|w| w[0] == w[1]).count();
        assert_eq!(repeats, 0);
        assert!(draws.iter().all(|b| b.len() == 2 && b[0] != b[1]));
    }

    #[test]
    fn resample_identity_and_rejects_bad_input() {
        let f = IqFrame::new((0..64).map(|n| c((n as f64 * 0.37).sin(), (n as f64 * 0.11).cos())).collect());
        let g = resample_cubic(&f, 1.0).unwrap();
        for (a, b) in f.samples.iter().zip(&g.samples) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(resample_cubic(&IqFrame::new(vec![c(1.0, 0.0); 3]), 0.8).is_err());
        assert!(resample_cubic(&f, 20.0).is_err());
    }

    #[test]
    fn spline_reproduces_cubics_in_the_interior() {
        let p = |t: f64| 0.5 + 0.02 * t - 3e-4 * t * t + 2e-6 * t * t * t;
        let f = IqFrame::new((0..256).map(|n| c(p(n as f64), -p(n as f64))).collect());
        for ratio in [0.6, 0.75, 1.3, 2.0] {
            let g = resample_cubic(&f, ratio).unwrap();
            for n in 64..192 {
                assert!((g.samples[n] - f.samples[n]).norm() < 1e-9, "ratio {ratio} n {n}");
            }
        }
    }
}
