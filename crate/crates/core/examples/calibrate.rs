//! Calibration runner: trains each requested ablation over several seeds on
//! one config and prints per-seed and mean last-5 held-out accuracy.
//!
//! ```text
//! cargo run --release --example calibrate -- <config.toml> <seeds> [Full,BaselineCE,...]
//! ```

use rffi_core::harness::{self, Ablation, ExperimentConfig};
use std::time::Instant;

fn parse_ablation(s: &str) -> Ablation {
    match s {
        "Full" => Ablation::Full,
        "BaselineCE" => Ablation::BaselineCE,
        "IEOnly" => Ablation::IEOnly,
        "MIOnly" => Ablation::MIOnly,
        other => panic!("unknown ablation {other}"),
    }
}

/// Divergence proxy between the emitter-classifier features of the first
/// two training receivers: near 2 when receivers remain separable.
fn receiver_separability(out: &harness::RunOutcome, seed: u64) -> f64 {
    let mut receivers: Vec<usize> = out.data.train.iter().map(|s| s.receiver).collect();
    receivers.dedup();
    let pick = |k: usize| -> Vec<_> { out.data.train.iter().filter(|s| s.receiver == k).step_by(4).cloned().collect() };
    let feats = |k: usize| {
        let inputs = harness::inputs_of(&pick(k), &out.data.arch).unwrap();
        harness::classifier_features(&out.model, &inputs).unwrap()
    };
    harness::proxy_divergence(&feats(receivers[0]), &feats(receivers[1]), &mut rffi_core::rng::stream(seed, "separability", &[]))
        .unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: calibrate <config.toml> <seeds> [ablations]");
        std::process::exit(2);
    }
    let base = ExperimentConfig::load(args[1].as_ref()).expect("config");
    let seeds: u64 = args[2].parse().expect("seed count");
    let ablations: Vec<Ablation> = args
        .get(3)
        .map(|s| s.split(',').map(parse_ablation).collect())
        .unwrap_or_else(|| vec![Ablation::BaselineCE, Ablation::Full]);
    for ab in ablations {
        let start = Instant::now();
        let mut means = Vec::new();
        let mut cosines = Vec::new();
        for seed in 0..seeds {
            let mut cfg = base.clone();
            cfg.ablation = ab;
            cfg.set_seed(seed);
            let out = harness::execute(&cfg).expect("run");
            let r = &out.report;
            let cos = r.independence.map(|i| i.mean_abs_cosine).unwrap_or(f64::NAN);
            let div = r.proxy_divergence.unwrap_or(f64::NAN);
            let split = receiver_separability(&out, seed);
            println!(
                "{ab:?} seed {seed}: last5 {:.4} +/- {:.4}  cos {cos:.3}  train/test divergence {div:.3}  receiver separability {split:.3}",
                r.last5_mean, r.last5_std
            );
            means.push(r.last5_mean);
            cosines.push(cos);
        }
        let n = means.len() as f64;
        println!(
            "{ab:?} mean last5 {:.4}  mean cos {:.3}  ({:.0}s)",
            means.iter().sum::<f64>() / n,
            cosines.iter().sum::<f64>() / n,
            start.elapsed().as_secs_f64()
        );
    }
}
