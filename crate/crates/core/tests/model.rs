mod common;

use common::{composite_gradient_errors, random_batch, random_model, tiny_arch, tiny_clients};
use proptest::prelude::*;
use rffi_core::numerics::{Mode, Tensor};
use rffi_core::riei::{abs_cosine, Batch, BaselineModel, RieiModel, TrainConfig};
use rffi_core::rng;
use rffi_core::synth::LabeledSample;

#[test]
fn composite_objectives_match_central_differences() {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..25 {
        let (ce, feat) = composite_gradient_errors(seed, 1e-8);
        worst = (worst.0.max(ce), worst.1.max(feat));
    }
    eprintln!("worst composite errors {worst:?}");
    assert!(worst.0 < 1e-4 && worst.1 < 1e-4);
}

#[test]
fn classifier_step_descends_on_a_fixed_batch() {
    let arch = tiny_arch(false);
    for seed in 0..5 {
        let mut m = random_model(&arch, seed);
        let batch = random_batch(&arch, 8, seed);
        let cfg = TrainConfig::default();
        let before = m.loss_ce(&batch, &cfg).unwrap();
        m.classifier_step(&batch, &cfg).unwrap();
        assert!(m.loss_ce(&batch, &cfg).unwrap() <= before);
    }
}

#[test]
fn feature_step_descends_and_freezes_heads() {
    let arch = tiny_arch(false);
    let cfg = TrainConfig::default();
    let mut checked = 0;
    for seed in 0..12 {
        let mut m = random_model(&arch, seed);
        let batch = random_batch(&arch, 8, seed);
        // The cosine term's curvature grows like 1/|z|^2; keep clear of zero features.
        let smallest = m
            .feature_pairs(&batch.inputs)
            .unwrap()
            .iter()
            .flat_map(|p| [p.z_emitter.clone(), p.z_receiver.clone()])
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if smallest < 1e-2 {
            continue;
        }
        checked += 1;
        let objective = |m: &RieiModel| {
            let l = m.losses(&batch, &cfg, Mode::Infer).unwrap();
            cfg.lambda1 * l.mi - cfg.lambda2 * l.ie
        };
        let before = objective(&m);
        let (ec, rc) = (m.ec.clone(), m.rc.clone());
        m.feature_step(&batch, &cfg).unwrap();
        let after = objective(&m);
        assert!(after <= before, "{seed}: {before} -> {after}");
        assert_eq!(m.ec, ec);
        assert_eq!(m.rc, rc);
    }
    assert!(checked >= 5);
}

#[test]
fn fit_with_zero_epochs_changes_nothing_and_fit_is_deterministic() {
    let arch = tiny_arch(true);
    let clients = tiny_clients(&arch, &[12, 12], 3);
    let train: Vec<&LabeledSample> = clients.iter().flat_map(|c| c.samples.iter()).collect();
    let init = random_model(&arch, 1);
    let mut m = init.clone();
    let zero = TrainConfig { epochs: 0, batch: 8, ..TrainConfig::default() };
    let h = m.fit(&train, &zero, &mut rng::stream(0, "fit", &[]), |_, _| Ok(())).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(m, init);

    let cfg = TrainConfig { epochs: 3, batch: 8, eta_f: 1e-2, eta_e: 1e-2, eta_r: 1e-2, ..TrainConfig::default() };
    let run = || {
        let mut m = init.clone();
        let h = m.fit(&train, &cfg, &mut rng::stream(0, "fit", &[]), |_, _| Ok(())).unwrap();
        (m, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.epochs.len(), 3);
    assert_eq!(ha.trained_receivers.into_iter().collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn fit_needs_two_receivers() {
    let arch = tiny_arch(false);
    let clients = tiny_clients(&arch, &[10], 0);
    let train: Vec<&LabeledSample> = clients[0].samples.iter().collect();
    let mut m = random_model(&arch, 0);
    let err = m
        .fit(&train, &TrainConfig::default(), &mut rng::stream(0, "fit", &[]), |_, _| Ok(()))
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let arch = tiny_arch(false);
    let mut m = random_model(&arch, 0);
    let batch = random_batch(&arch, 4, 0);
    m.ec.layers[0].params[0].values.data_mut()[0] = f64::NAN;
    let err = m.classifier_step(&batch, &TrainConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn baseline_loss_decreases_over_early_epochs() {
    let arch = tiny_arch(true);
    let clients = tiny_clients(&arch, &[24, 24], 5);
    let train: Vec<&LabeledSample> = clients.iter().flat_map(|c| c.samples.iter()).collect();
    let mut m = BaselineModel::new(arch, &mut rng::stream(2, "m", &[])).unwrap();
    let cfg = TrainConfig { epochs: 5, batch: 8, eta_f: 1e-2, eta_e: 1e-2, ..TrainConfig::default() };
    let h = m.fit(&train, &cfg, &mut rng::stream(0, "fit", &[]), |_, _| Ok(())).unwrap();
    assert!(h.epochs[4].ce < h.epochs[0].ce);
    assert!(h.epochs.iter().all(|e| e.ie.is_none()));
}

fn permuted(batch: &Batch, perm: &[usize]) -> Batch {
    let w = batch.inputs.row_len();
    let data: Vec<f64> = perm.iter().flat_map(|&i| batch.inputs.row(i).to_vec()).collect();
    Batch::new(
        Tensor::new(batch.inputs.shape().to_vec(), data).unwrap().reshape(batch.inputs.shape().to_vec()).unwrap(),
        perm.iter().map(|&i| batch.emitters[i]).collect(),
        perm.iter().map(|&i| batch.receivers[i]).collect(),
    )
    .map(|b| {
        assert_eq!(b.inputs.row_len(), w);
        b
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_bounded_and_order_invariant(seed in 0u64..1000, n in 2usize..7, rot in 0usize..7) {
        let arch = tiny_arch(true);
        let m = random_model(&arch, seed);
        let batch = random_batch(&arch, n, seed);
        let cfg = TrainConfig::default();
        let bound = n as f64 * ((arch.emitters as f64).ln() + (arch.receivers as f64).ln());
        for mode in [Mode::Infer, Mode::TrainFrozen] {
            let l = m.losses(&batch, &cfg, mode).unwrap();
            prop_assert!(l.ie <= bound + 1e-9);
            prop_assert!(l.mi >= 0.0 && l.mi <= n as f64 + 1e-12);
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let p = m.losses(&permuted(&batch, &perm), &cfg, mode).unwrap();
            prop_assert!((p.ce - l.ce).abs() < 1e-9 * (1.0 + l.ce.abs()));
            prop_assert!((p.ie - l.ie).abs() < 1e-9 * (1.0 + l.ie.abs()));
            prop_assert!((p.mi - l.mi).abs() < 1e-9 * (1.0 + l.mi.abs()));
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        e in prop::collection::vec(-5.0f64..5.0, 4),
        r in prop::collection::vec(-5.0f64..5.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let c = abs_cosine(&e, &r, 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        let es: Vec<f64> = e.iter().map(|x| x * a).collect();
        let rs: Vec<f64> = r.iter().map(|x| x * b).collect();
        let norms = e.iter().map(|x| x * x).sum::<f64>().sqrt() * r.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norms > 1e-6);
        prop_assert!((abs_cosine(&es, &rs, 1e-12) - c).abs() < 1e-9);
    }

    #[test]
    fn argmax_survives_monotone_transforms(row in prop::collection::vec(-10.0f64..10.0, 1..8), s in 0.1f64..5.0, t in -3.0f64..3.0) {
        let base = rffi_core::riei::argmax(&row);
        let moved: Vec<f64> = row.iter().map(|&x| (s * x + t).exp()).collect();
        prop_assert_eq!(rffi_core::riei::argmax(&moved), base);
        let cubed: Vec<f64> = row.iter().map(|&x| x * x * x).collect();
        prop_assert_eq!(rffi_core::riei::argmax(&cubed), base);
    }
}
