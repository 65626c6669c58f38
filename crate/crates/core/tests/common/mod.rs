#![allow(dead_code)]

use rand::Rng;
use rffi_core::numerics::{finite_diff_check_coords, Cache, Layer, LayerSpec, Mode, Tensor};
use rffi_core::riei::{Architecture, Batch, ConvSpec, RieiModel, TrainConfig};
use rffi_core::rng;

/// Random layer spec of the given kind together with a compatible input shape.
pub fn random_layer_case(kind: usize, seed: u64) -> (LayerSpec, Vec<usize>) {
    let mut r = rng::stream(seed, "layer-case", &[kind as u64]);
    let n = r.random_range(3..6);
    match kind % 6 {
        0 => {
            let (i, o) = (r.random_range(1..6), r.random_range(1..6));
            (LayerSpec::Dense { inputs: i, outputs: o }, vec![n, i])
        }
        1 => {
            let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
            let k = r.random_range(1..5);
            let s = r.random_range(1..3);
            let len = k + r.random_range(0..8);
            let spec = LayerSpec::Conv1d { in_channels: ci, out_channels: co, kernel: k, stride: s };
            (spec, vec![n, ci, len])
        }
        2 => {
            let c = r.random_range(1..5);
            (LayerSpec::Relu, vec![n, c, r.random_range(1..6)])
        }
        3 => {
            let c = r.random_range(1..4);
            let spec = LayerSpec::BatchNorm1d { channels: c, momentum: 0.1, eps: 1e-5 };
            if r.random_bool(0.5) {
                (spec, vec![n, c])
            } else {
                (spec, vec![n, c, r.random_range(1..5)])
            }
        }
        4 => {
            let c = r.random_range(1..4);
            (LayerSpec::GlobalAvgPool, vec![n, c, r.random_range(1..6)])
        }
        _ => (LayerSpec::Softmax, vec![n, r.random_range(1..6)]),
    }
}

/// Worst relative error of input and parameter gradients against central
/// differences of the scalar `sum(w * layer(x))` with random weights `w`.
pub fn layer_gradient_error(spec: LayerSpec, shape: &[usize], seed: u64, mode: Mode, floor: f64) -> f64 {
    let mut r = rng::stream(seed, "layer-grad", &[]);
    let template = Layer::init(spec, &mut r).unwrap();
    let mut template = template;
    // Perturb BatchNorm parameters away from their identity init.
    for p in &mut template.params {
        for v in p.values.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    if let Some(stats) = template.running.as_mut() {
        stats.mean.iter_mut().for_each(|m| *m = r.random_range(-1.0..1.0));
        stats.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
    }
    let size: usize = shape.iter().product();
    // Keep ReLU inputs clear of the kink so central differences are exact.
    let input: Vec<f64> = (0..size)
        .map(|_| {
            let v: f64 = r.random_range(0.05..2.0);
            if r.random_bool(0.5) { v } else { -v }
        })
        .collect();
    let out_shape = spec.output_shape(shape).unwrap();
    let weights: Vec<f64> = (0..out_shape.iter().product::<usize>())
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let param_len: usize = template.params.iter().map(|p| p.values.len()).sum();
    let fwd_mode = if mode == Mode::Train { Mode::TrainFrozen } else { mode };

    let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
        let mut layer = template.clone();
        let mut off = size;
        for p in &mut layer.params {
            let n = p.values.len();
            p.values.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let x = Tensor::new(shape.to_vec(), flat[..size].to_vec()).unwrap();
        let (y, cache): (Tensor, Cache) = layer.forward(&x, fwd_mode).unwrap();
        let loss: f64 = y.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let g = Tensor::new(out_shape.clone(), weights.clone()).unwrap();
        let dx = layer.backward(&cache, &g, true).unwrap();
        let mut grad = dx.into_data();
        for p in &layer.params {
            grad.extend_from_slice(p.grad.data());
        }
        (loss, grad)
    };
    let mut flat = input;
    for p in &template.params {
        flat.extend_from_slice(p.values.data());
    }
    assert_eq!(flat.len(), size + param_len);
    let coords: Vec<usize> = (0..flat.len()).collect();
    finite_diff_check_coords(eval, &flat, 1e-5, &coords, floor).unwrap()
}

/// Small conv model: frame length 16, one conv layer, 2+2 features, 3x3 labels.
pub fn tiny_arch(batch_norm: bool) -> Architecture {
    Architecture {
        frame_len: 16,
        conv: vec![ConvSpec { out_channels: 3, kernel: 3, stride: 2 }],
        batch_norm,
        fed_hidden: vec![5],
        feature_emitter: 3,
        feature_receiver: 3,
        head_hidden: vec![4],
        emitters: 3,
        receivers: 3,
        ..Architecture::default()
    }
}

pub fn random_batch(arch: &Architecture, n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, "batch", &[]);
    let (c, l) = arch.input_shape();
    let data = (0..n * c * l).map(|_| r.random_range(-1.0..1.0)).collect();
    let emitters = (0..n).map(|_| r.random_range(0..arch.emitters)).collect();
    let receivers = (0..n).map(|_| r.random_range(0..arch.receivers)).collect();
    Batch::new(Tensor::new(vec![n, c, l], data).unwrap(), emitters, receivers).unwrap()
}

/// Random model with perturbed BatchNorm affine parameters and running stats.
pub fn random_model(arch: &Architecture, seed: u64) -> RieiModel {
    let mut r = rng::stream(seed, "model", &[]);
    let mut m = RieiModel::new(arch.clone(), &mut r).unwrap();
    for layer in &mut m.fed.layers {
        if let Some(stats) = layer.running.as_mut() {
            stats.mean.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            stats.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
            for p in &mut layer.params {
                p.values.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
            }
        }
    }
    m
}

pub fn model_values(m: &RieiModel) -> Vec<f64> {
    let mut v = m.fed.flat_values();
    v.extend(m.ec.flat_values());
    v.extend(m.rc.flat_values());
    v
}

pub fn set_model_values(m: &mut RieiModel, flat: &[f64]) {
    let (a, b) = (m.fed.param_count(), m.ec.param_count());
    m.fed.set_flat_values(&flat[..a]).unwrap();
    m.ec.set_flat_values(&flat[a..a + b]).unwrap();
    m.rc.set_flat_values(&flat[a + b..]).unwrap();
}

/// Worst relative errors (cross-entropy step over all parameters, feature
/// step objective over the extractor) against central differences, with
/// BatchNorm in inference mode.
pub fn composite_gradient_errors(seed: u64, floor: f64) -> (f64, f64) {
    let arch = tiny_arch(true);
    let model = random_model(&arch, seed);
    let batch = random_batch(&arch, 4, seed);
    let cfg = TrainConfig { reduction: rffi_core::riei::Reduction::Sum, ..TrainConfig::default() };
    let flat = model_values(&model);
    let coords: Vec<usize> = (0..flat.len()).collect();

    let ce = |v: &[f64]| {
        let mut m = model.clone();
        set_model_values(&mut m, v);
        m.zero_grad();
        let (loss, _) = m.ce_gradients(&batch, &cfg, Mode::Infer).unwrap();
        let mut g = m.fed.flat_grads();
        g.extend(m.ec.flat_grads());
        g.extend(m.rc.flat_grads());
        (loss, g)
    };
    let ce_err = finite_diff_check_coords(ce, &flat, 1e-5, &coords, floor).unwrap();

    let fed_len = model.fed.param_count();
    let feature = |v: &[f64]| {
        let mut m = model.clone();
        m.fed.set_flat_values(v).unwrap();
        m.zero_grad();
        let (objective, _, _) = m.feature_gradients(&batch, &cfg, Mode::Infer, false).unwrap();
        assert!(m.ec.flat_grads().iter().all(|&g| g == 0.0));
        (objective, m.fed.flat_grads())
    };
    let fed_coords: Vec<usize> = (0..fed_len).collect();
    let feat_err =
        finite_diff_check_coords(feature, &flat[..fed_len], 1e-5, &fed_coords, floor).unwrap();
    (ce_err, feat_err)
}

/// Small labelled samples for `tiny_arch`, grouped by receiver.
pub fn tiny_clients(arch: &Architecture, per_client: &[usize], seed: u64) -> Vec<rffi_core::fed::ClientState> {
    use num_complex::Complex64;
    use rffi_core::synth::{IqFrame, LabeledSample};
    let mut r = rng::stream(seed, "clients", &[]);
    per_client
        .iter()
        .enumerate()
        .map(|(k, &n)| rffi_core::fed::ClientState {
            id: k,
            samples: (0..n)
                .map(|i| LabeledSample {
                    frame: IqFrame {
                        samples: (0..arch.frame_len)
                            .map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                            .collect(),
                    },
                    emitter: i % arch.emitters,
                    receiver: k,
                })
                .collect(),
        })
        .collect()
}

/// Largest per-coordinate gap between one uncompressed federated round and
/// one centralized alternating step on the pooled samples (no BatchNorm,
/// one local epoch, full batches, matched stepsizes, mean reduction).
pub fn one_round_gap(seed: u64, eta: f64) -> f64 {
    use rffi_core::fed::{fed_fit, Compressor, FedConfig};
    use rffi_core::synth::LabeledSample;
    // No dense hidden layer: a sample whose hidden units are all dead maps to
    // a zero feature vector, where the cosine term is singular.
    let arch = Architecture { fed_hidden: vec![], ..tiny_arch(false) };
    let init = random_model(&arch, seed);
    let clients = tiny_clients(&arch, &[6, 9, 5], seed);
    let train = TrainConfig { eta_f: eta, eta_e: eta, eta_r: eta, ..TrainConfig::default() };
    let fed = FedConfig {
        rounds: 1,
        local_epochs: 1,
        compressor: Compressor::None,
        client_batch: 0,
        server_eta: None,
        seed,
        ..FedConfig::default()
    };
    let (global, _) = fed_fit(&init, &clients, &fed, &train, |_, _| Ok(None)).unwrap();

    let pooled: Vec<&LabeledSample> = clients.iter().flat_map(|c| c.samples.iter()).collect();
    let batch = Batch::from_samples(&pooled, &arch).unwrap();
    let mut central = init.clone();
    central.train_step(&batch, &train, 0).unwrap();

    model_values(&global)
        .iter()
        .zip(model_values(&central))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Direct O(N^2) transform used as the FFT oracle.
pub fn naive_dft(x: &[num_complex::Complex64]) -> Vec<num_complex::Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| {
                    let angle = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                    v * num_complex::Complex64::from_polar(1.0, angle)
                })
                .sum()
        })
        .collect()
}

pub fn random_frame(len: usize, seed: u64) -> rffi_core::synth::IqFrame {
    let mut r = rng::stream(seed, "frame", &[]);
    rffi_core::synth::IqFrame::new(
        (0..len)
            .map(|_| num_complex::Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
            .collect(),
    )
}

/// Largest |STFT - windowed naive DFT| over all frames and bins.
pub fn stft_oracle_error(seed: u64, len: usize, window_len: usize, hop: usize) -> f64 {
    use rffi_core::dsp::{stft, Window};
    let frame = random_frame(len, seed);
    let spec = stft(&frame, window_len, hop, Window::Hann).unwrap();
    let w: Vec<f64> = (0..window_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window_len as f64).cos())
        .collect();
    let mut worst: f64 = 0.0;
    for t in 0..spec.frames {
        let seg: Vec<_> = (0..window_len).map(|i| frame.samples[t * hop + i] * w[i]).collect();
        for (a, b) in spec.row(t).iter().zip(naive_dft(&seg)) {
            worst = worst.max((a - b.norm()).abs());
        }
    }
    worst
}

/// Measured ISR (dB) of an injection, from the added component.
pub fn measured_isr_db(kind: rffi_core::dsp::InterferenceKind, target_db: f64, seed: u64) -> f64 {
    use rffi_core::dsp::{inject, InterferenceConfig};
    let frame = random_frame(256, seed);
    let cfg = InterferenceConfig::new(kind, target_db);
    let out = inject(&frame, &cfg, &mut rng::stream(seed, "isr", &[])).unwrap();
    let added: f64 = out.samples.iter().zip(&frame.samples).map(|(o, s)| (o - s).norm_sqr()).sum();
    let signal: f64 = frame.samples.iter().map(|s| s.norm_sqr()).sum();
    10.0 * (added / signal).log10()
}

/// Largest deviation of ratio-1 spline resampling from the input.
pub fn spline_identity_error(seed: u64) -> f64 {
    let frame = random_frame(256, seed);
    let out = rffi_core::dsp::resample_cubic(&frame, 1.0).unwrap();
    out.samples.iter().zip(&frame.samples).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

/// Small but complete experiment config: 3 receivers, 4 emitters, 64-sample
/// frames, a few epochs.
pub fn tiny_experiment() -> rffi_core::harness::ExperimentConfig {
    use rffi_core::harness::ExperimentConfig;
    let mut cfg = ExperimentConfig::default();
    cfg.synth.frames_per_pair = 12;
    cfg.synth.frame_len = 64;
    cfg.arch = Architecture {
        conv: vec![ConvSpec { out_channels: 4, kernel: 5, stride: 2 }, ConvSpec { out_channels: 4, kernel: 3, stride: 2 }],
        fed_hidden: vec![],
        feature_emitter: 4,
        feature_receiver: 4,
        head_hidden: vec![8],
        ..Architecture::default()
    };
    cfg.train.epochs = 5;
    cfg.train.batch = 16;
    cfg.train.eta_f = 0.02;
    cfg.train.eta_e = 0.02;
    cfg.train.eta_r = 0.02;
    cfg.fed.rounds = 5;
    cfg
}

/// Mean of sign(x + xi) for xi uniform on (-a, a), against x / a.
pub fn noisy_sign_mean(x: f64, sigma: f64, draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "noisy-sign", &[]);
    let delta = vec![vec![x; draws]];
    let q = rffi_core::fed::compress(&delta, rffi_core::fed::Compressor::NoisySignUniform, sigma, &mut r).unwrap();
    q.values()[0].iter().sum::<f64>() / draws as f64
}
