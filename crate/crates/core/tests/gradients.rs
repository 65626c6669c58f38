mod common;

use common::{layer_gradient_error, random_layer_case};
use rffi_core::numerics::{LayerSpec, Mode};

#[test]
fn every_layer_kind_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for case in 0..60u64 {
        let kind = (case % 6) as usize;
        let (spec, shape) = random_layer_case(kind, case);
        let modes: &[Mode] = if matches!(spec, LayerSpec::BatchNorm1d { .. }) {
            &[Mode::Train, Mode::Infer]
        } else {
            &[Mode::Train]
        };
        for &mode in modes {
            // Gradients below 1e-4 are held to an absolute 1e-10: f64 central
            // differences at step 1e-5 carry roughly 1e-11 of roundoff.
            let err = layer_gradient_error(spec, &shape, case, mode, 1e-4);
            assert!(err < 1e-6, "{spec:?} {shape:?} {mode:?}: {err:e}");
            worst = worst.max(err);
        }
    }
    eprintln!("worst layer relative error {worst:e}");
}
