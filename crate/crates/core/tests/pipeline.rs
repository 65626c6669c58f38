mod common;

use common::*;
use proptest::prelude::*;
use rffi_core::dsp::{InterferenceConfig, InterferenceKind};
use rffi_core::harness::{self, Ablation, Scenario, SweepKind};
use rffi_core::rng;
use rffi_core::synth::{self, SynthConfig};
use rffi_core::Error;

#[test]
fn stft_matches_direct_transform() {
    for (seed, (w, hop)) in [(16, 8), (32, 16), (64, 64), (30, 7)].into_iter().enumerate() {
        assert!(stft_oracle_error(seed as u64, 256, w, hop) < 1e-9);
    }
}

#[test]
fn injected_power_hits_the_target() {
    for kind in [InterferenceKind::NarrowbandHopping, InterferenceKind::BroadbandGaussian] {
        for (i, isr) in [-10.0, 0.0, 10.0, 20.0].into_iter().enumerate() {
            let got = measured_isr_db(kind, isr, i as u64);
            assert!((got - isr).abs() <= 0.2, "{kind:?} {isr}: {got}");
        }
    }
}

#[test]
fn unit_ratio_resampling_is_identity() {
    for seed in 0..5 {
        assert!(spline_identity_error(seed) < 1e-9);
    }
}

#[test]
fn dataset_file_round_trips() {
    let cfg = SynthConfig {
        frames_per_pair: 5,
        frame_len: 64,
        ..SynthConfig::default()
    };
    let ds = synth::synthesize_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rffd");
    harness::save_dataset(&path, &ds).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 24 + ds.len() * (4 + 8 * 64));
    let back = harness::load_dataset(&path).unwrap();
    assert_eq!(harness::encode_dataset(&back).unwrap(), bytes);
}

#[test]
fn divergence_proxy_calibration() {
    let mut r = rng::stream(7, "points", &[]);
    use rand::Rng;
    let cloud = |r: &mut rng::Stream, n: usize, centre: f64| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..4).map(|_| centre + r.random_range(-1.0..1.0)).collect()).collect()
    };
    for seed in 0..5 {
        let set = cloud(&mut r, 200, 0.0);
        let (a, b) = set.split_at(100);
        let same = harness::proxy_divergence(a, b, &mut rng::stream(seed, "proxy", &[])).unwrap();
        assert!(same <= 0.3, "self split {same}");
        let far = harness::proxy_divergence(&cloud(&mut r, 100, -10.0), &cloud(&mut r, 100, 10.0), &mut rng::stream(seed, "proxy", &[]))
            .unwrap();
        assert!(far >= 1.7, "clusters {far}");
        assert!(same < far);
    }
    let a = cloud(&mut r, 10, 0.0);
    assert!(matches!(
        harness::proxy_divergence(&a, &[], &mut rng::stream(0, "p", &[])),
        Err(Error::InvalidInput(_))
    ));
    let narrow: Vec<Vec<f64>> = a.iter().map(|v| v[..3].to_vec()).collect();
    assert!(matches!(
        harness::proxy_divergence(&a, &narrow, &mut rng::stream(0, "p", &[])),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn experiment_is_deterministic_and_excludes_the_held_out_receiver() {
    let cfg = tiny_experiment();
    let a = harness::execute(&cfg).unwrap();
    let b = harness::execute(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(harness::metrics_csv(&a), harness::metrics_csv(&b));
    assert_eq!(a.report.accuracy.len(), 5);
    assert!(a.data.train.iter().all(|s| s.receiver != cfg.held_out_receiver));
    assert!(a.data.test.iter().all(|s| s.receiver == cfg.held_out_receiver));
    assert!(a.report.accuracy.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bad_configs_map_to_exit_code_two() {
    let mut cfg = tiny_experiment();
    cfg.held_out_receiver = 3;
    assert_eq!(harness::run_experiment(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = tiny_experiment();
    cfg.scenario = Scenario::Federated;
    cfg.ablation = Ablation::BaselineCE;
    assert_eq!(harness::run_experiment(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = tiny_experiment();
    cfg.train.epochs = 4;
    assert_eq!(harness::run_experiment(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = tiny_experiment();
    cfg.resample_ratios = Some(vec![1.0, 0.9]);
    assert_eq!(harness::run_experiment(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn federated_run_reports_rounds_and_bits() {
    let mut cfg = tiny_experiment();
    cfg.scenario = Scenario::Federated;
    cfg.fed.compressor = rffi_core::fed::Compressor::Sign;
    let out = harness::execute(&cfg).unwrap();
    assert_eq!(out.rounds.len(), 5);
    assert_eq!(out.report.compression_ratio, Some(32.0));
    assert_eq!(out.report.accuracy.len(), 5);
}

#[test]
fn feature_export_shape_and_round_trip() {
    let out = harness::execute(&tiny_experiment()).unwrap();
    let samples = &out.data.test[..7];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    harness::export_features(&out.model, samples, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0], "emitter,receiver,f1,f2,f3,f4,f5,f6,f7,f8");
    let inputs = harness::inputs_of(samples, out.model.arch()).unwrap();
    let z = out.model.features(&inputs).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 10);
        assert_eq!(cols[0].parse::<usize>().unwrap(), samples[i].emitter);
        for (c, v) in cols[2..].iter().zip(z.row(i)) {
            assert!((c.parse::<f64>().unwrap() - v).abs() <= 1e-6);
        }
    }
}

#[test]
fn diagnostics_are_reported_in_range() {
    let mut cfg = tiny_experiment();
    cfg.diagnostics = true;
    let r = harness::run_experiment(&cfg).unwrap();
    let ind = r.independence.unwrap();
    assert!((0.0..=1.0).contains(&ind.mean_abs_cosine));
    assert!(ind.cross_cov_spectral_norm >= 0.0);
    assert!((0.0..=2.0).contains(&r.proxy_divergence.unwrap()));
}

#[test]
fn disabled_isr_point_equals_the_plain_run() {
    let mut cfg = tiny_experiment();
    cfg.sweep.kind = SweepKind::Isr;
    cfg.sweep.isr_db = vec![f64::NEG_INFINITY, 0.0];
    cfg.sweep.interference_kinds = vec![InterferenceKind::BroadbandGaussian];
    let rows = harness::run_sweep(&cfg).unwrap();
    let plain = harness::run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].final_accuracy, Some(plain.final_accuracy));
    let csv = harness::sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn sweep_keeps_going_past_failed_points() {
    let mut cfg = tiny_experiment();
    cfg.sweep.kind = SweepKind::SamplingRate;
    cfg.sweep.ratios = vec![vec![1.0, 1.0, 1.0], vec![1.0, 50.0, 1.0], vec![0.9, 0.8, 1.0]];
    let rows = harness::run_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].error.is_none() && rows[2].error.is_none());
    assert!(rows[1].error.is_some() && rows[1].final_accuracy.is_none());
    cfg.sweep.ratios.clear();
    assert!(harness::run_sweep(&cfg).is_err());
}

#[test]
fn interference_is_reproducible_and_renormalized() {
    let ds = synth::synthesize_dataset(&SynthConfig {
        frames_per_pair: 3,
        frame_len: 256,
        ..SynthConfig::default()
    })
    .unwrap();
    let samples: Vec<_> = ds.samples().cloned().collect();
    let icfg = InterferenceConfig::new(InterferenceKind::NarrowbandHopping, 10.0);
    let a = harness::interfere(&samples, &icfg, 3).unwrap();
    let b = harness::interfere(&samples, &icfg, 3).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert!((s.frame.power() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn last5_is_bounded_by_the_tail(history in prop::collection::vec(0.0f64..1.0, 5..30)) {
        let (mean, std) = harness::last5_metric(&history).unwrap();
        let tail = &history[history.len() - 5..];
        let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        prop_assert!(std >= 0.0 && std <= (hi - lo) / 2.0 + 1e-12);
    }

    #[test]
    fn dataset_decoding_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = harness::decode_dataset(&bytes);
    }
}
