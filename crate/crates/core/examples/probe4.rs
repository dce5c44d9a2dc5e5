//! Scratch probe: personalization strength sweep with sample dumps.

use ddap_core::checkpoint::{load_model, save_model, CheckpointKind};
use ddap_core::dataset::{render_subject_image, DatasetSpec};
use ddap_core::imageio;
use ddap_core::ldm::ImageTensor;
use ddap_core::metrics;
use ddap_core::personalization::{finetune, FinetuneConfig};
use ddap_core::pipeline::{classifier_for_spec, mean_image, train_base_from_spec};
use ddap_core::prompt::identifier_prompt;
use ddap_core::sampler::ddim_sample_batch;
use ddap_core::train::TrainConfig;
use rand::SeedableRng;
use std::path::Path;

fn main() {
    let spec = DatasetSpec::default();
    let cache = Path::new("/tmp/ddap_base_va.ckpt");
    let model = if cache.exists() {
        load_model(cache).unwrap().0
    } else {
        let (m, curve) = train_base_from_spec(
            &spec,
            &TrainConfig {
                ae_steps: 800,
                den_steps: 4000,
                holdout_threshold: 10.0,
                ..Default::default()
            },
            1234,
        )
        .unwrap();
        println!("trained: recon {:.2} holdout {:.4}", curve.recon_psnr_db, curve.holdout_cond_loss);
        save_model(cache, &m, CheckpointKind::BaseModel).unwrap();
        m
    };
    let clf = classifier_for_spec(&spec, 500, 1234).unwrap();

    let subject = 0usize;
    let train_imgs: Vec<ImageTensor> = (4..8)
        .map(|i| render_subject_image(&spec, 1234, subject, i).0)
        .collect();
    let refs: Vec<ImageTensor> = (0..4)
        .map(|i| render_subject_image(&spec, 1234, subject, i).0)
        .collect();
    let ref_mean = mean_image(&refs);

    std::fs::create_dir_all("/tmp/ddap_sheets").unwrap();
    // dump training images once
    for (i, img) in train_imgs.iter().enumerate() {
        imageio::save_png(img, Path::new(&format!("/tmp/ddap_sheets/train_{i}.png"))).unwrap();
    }

    // base-model subject-prompt samples for reference
    {
        let cond = ddap_core::prompt::subject_prompt(&model.vocab, subject).unwrap();
        let seeds: Vec<u64> = (0..8).map(|i| 500 + i).collect();
        let samples = ddim_sample_batch(&model, &cond, 50, &seeds).unwrap();
        for (i, s) in samples.iter().enumerate() {
            imageio::save_png(s, Path::new(&format!("/tmp/ddap_sheets/base_s{subject}_{i}.png")))
                .unwrap();
        }
    }

    for (lr, steps) in [(1e-4, 500usize), (5e-4, 500), (1e-3, 500), (5e-4, 1000)] {
        let mut m = model.clone();
        let cfg = FinetuneConfig {
            lr,
            steps,
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let curve = finetune(&mut m, &train_imgs, &cfg, steps, &mut rng).unwrap();
        let cond = identifier_prompt(&m.vocab, "sks").unwrap();
        let seeds: Vec<u64> = (0..16).map(|i| 300 + i).collect();
        let samples = ddim_sample_batch(&m, &cond, 50, &seeds).unwrap();
        let mut ism = 0.0;
        let mut dfr = 0.0;
        let mut qual = 0.0;
        let mut psnr_gen = 0.0;
        for s in &samples {
            ism += clf.ism_toy(s, &refs).unwrap();
            dfr += clf.dfr_toy(s).unwrap() as f64;
            qual += clf.max_subject_prob(s).unwrap();
            psnr_gen += metrics::psnr(s, &ref_mean).unwrap();
        }
        println!(
            "lr {lr:.0e} steps {steps}: ft_loss {:.4}->{:.4} ism {:.3} dfr {:.2} qual {:.3} psnr_gen {:.2}",
            curve.first().unwrap(),
            curve.last().unwrap(),
            ism / 16.0,
            dfr / 16.0,
            qual / 16.0,
            psnr_gen / 16.0
        );
        for (i, s) in samples.iter().take(8).enumerate() {
            imageio::save_png(
                s,
                Path::new(&format!("/tmp/ddap_sheets/ft_lr{lr:.0e}_st{steps}_{i}.png")),
            )
            .unwrap();
        }
    }
}
