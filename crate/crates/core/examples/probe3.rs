//! Scratch probe: protect-run timing and end-to-end efficacy.

use ddap_core::classifier::ClassifierParams;
use ddap_core::dataset::{render_subject_image, DatasetSpec};
use ddap_core::ddpl::{run_aspl, AttackMode, ProtectOptions, RunHooks};
use ddap_core::ldm::ImageTensor;
use ddap_core::pipeline::{classifier_for_spec, evaluate_run, train_base_from_spec, EvalSettings};
use ddap_core::prompt::identifier_prompt;
use ddap_core::train::TrainConfig;
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let subject: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let attack = args
        .get(3)
        .map(|s| AttackMode::parse(s).unwrap())
        .unwrap_or(AttackMode::Ddap);
    let use_mask = args.get(4).map(|s| s == "mask").unwrap_or(true);

    let spec = DatasetSpec::default();
    let t0 = Instant::now();
    let (model, curve) = train_base_from_spec(
        &spec,
        &TrainConfig {
            ae_steps: 600,
            den_steps: 3000,
            holdout_threshold: 10.0,
            ..Default::default()
        },
        1234,
    )
    .unwrap();
    println!(
        "train {:.0}s recon {:.2}dB holdout {:.4}",
        t0.elapsed().as_secs_f64(),
        curve.recon_psnr_db,
        curve.holdout_cond_loss
    );
    let clf: ClassifierParams = classifier_for_spec(&spec, 500, 1234).unwrap();

    let clean_protect: Vec<ImageTensor> = (4..8)
        .map(|i| render_subject_image(&spec, 1234, subject, i).0)
        .collect();
    let refs: Vec<ImageTensor> = (0..4)
        .map(|i| render_subject_image(&spec, 1234, subject, i).0)
        .collect();

    let opts = ProtectOptions {
        attack,
        use_mask,
        ddpl: ddap_core::ddpl::DDPLConfig {
            epochs,
            ..Default::default()
        },
        ..Default::default()
    };
    let cond = identifier_prompt(&model.vocab, "sks").unwrap();
    let t0 = Instant::now();
    let protected = run_aspl(
        &clean_protect,
        &model,
        &cond,
        &opts,
        777,
        &mut RunHooks::default(),
    )
    .unwrap();
    println!(
        "protect {} epochs ({:?}, mask={}): {:.0}s",
        epochs,
        attack,
        use_mask,
        t0.elapsed().as_secs_f64()
    );

    // attack diagnostics: latent displacement and cond-loss ratio
    {
        let mut disp = 0.0;
        let mut loss_clean = 0.0;
        let mut loss_adv = 0.0;
        for (c, a) in clean_protect.iter().zip(protected.iter()) {
            let zc = model.encode(c).unwrap();
            let za = model.encode(a).unwrap();
            let num = (&za.data - &zc.data).mapv(|v| v * v).sum().sqrt();
            let den = zc.data.mapv(|v| v * v).sum().sqrt();
            disp += num / den;
            let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            loss_clean += model.cond_loss(&[zc], &cond, &mut r1).unwrap();
            let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            loss_adv += model.cond_loss(&[za], &cond, &mut r2).unwrap();
        }
        println!(
            "latent displacement {:.4}, cond loss clean {:.4} adv {:.4}",
            disp / 4.0,
            loss_clean / 4.0,
            loss_adv / 4.0
        );
    }

    let ft_steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(500);
    let ddim_steps: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(50);
    let settings = EvalSettings {
        finetune: ddap_core::personalization::FinetuneConfig {
            steps: ft_steps,
            ..Default::default()
        },
        eval_identifier: "sks".into(),
        samples: 16,
        ddim_steps,
        seed: 42,
        run_label: "probe".into(),
        config_hash: "h".into(),
    };
    let t0 = Instant::now();
    let clean_rep = evaluate_run(
        &model, &model, &clf, &clean_protect, &clean_protect, &refs, &settings,
    )
    .unwrap();
    let prot_rep = evaluate_run(
        &model, &model, &clf, &protected, &clean_protect, &refs, &settings,
    )
    .unwrap();
    println!("evals {:.0}s", t0.elapsed().as_secs_f64());
    println!(
        "clean: psnr_gen {:.2} ism {:.3} dfr {:.2} qual {:.3}",
        clean_rep.psnr_gen, clean_rep.ism_toy, clean_rep.dfr_toy, clean_rep.quality_toy
    );
    println!(
        "prot : psnr_in {:.2} perc {:.5} | psnr_gen {:.2} ism {:.3} dfr {:.2} qual {:.3}",
        prot_rep.psnr_in,
        prot_rep.perceptual_in,
        prot_rep.psnr_gen,
        prot_rep.ism_toy,
        prot_rep.dfr_toy,
        prot_rep.quality_toy
    );
    println!(
        "delta: psnr_gen {:.2} dB, ism {:.3}, dfr {:.2}",
        clean_rep.psnr_gen - prot_rep.psnr_gen,
        clean_rep.ism_toy - prot_rep.ism_toy,
        prot_rep.dfr_toy - clean_rep.dfr_toy
    );
}
