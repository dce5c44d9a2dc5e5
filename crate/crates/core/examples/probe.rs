//! Scratch probe for hyperparameter and wall-time calibration.

use ddap_core::dataset::DatasetSpec;
use ddap_core::pipeline::train_base_from_spec;
use ddap_core::train::TrainConfig;
use std::time::Instant;

fn main() {
    let spec = DatasetSpec::default();
    let args: Vec<String> = std::env::args().collect();
    let ae_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let den_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig {
        ae_steps,
        den_steps,
        holdout_threshold: 10.0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (model, curve) = train_base_from_spec(&spec, &cfg, 1234).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "trained in {dt:.1}s  ae_steps={} den_steps={}  => {:.3}s/step",
        cfg.ae_steps,
        cfg.den_steps,
        dt / (cfg.ae_steps + cfg.den_steps) as f64
    );
    println!("recon psnr: {:.2} dB", curve.recon_psnr_db);
    println!("holdout cond loss: {:.4}", curve.holdout_cond_loss);
    let ae_tail: Vec<f64> = curve.ae.iter().rev().take(20).cloned().collect();
    println!(
        "ae loss first {:.5} last20 {:.5}",
        curve.ae.first().unwrap(),
        ae_tail.iter().sum::<f64>() / ae_tail.len() as f64
    );
    let den_tail: Vec<f64> = curve.denoiser.iter().rev().take(50).cloned().collect();
    println!(
        "den loss first {:.5} last50 {:.5}",
        curve.denoiser.first().unwrap(),
        den_tail.iter().sum::<f64>() / den_tail.len() as f64
    );
    let _ = model;
}
