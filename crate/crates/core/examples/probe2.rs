//! Scratch probe: sample quality, inversion consistency, attack ascent.

use ddap_core::classifier;
use ddap_core::dataset::{render_subject_image, DatasetSpec};
use ddap_core::ldm::ImageTensor;
use ddap_core::metrics;
use ddap_core::pipeline::{classifier_for_spec, train_base_from_spec};
use ddap_core::prompt::subject_prompt;
use ddap_core::sampler::{ddim_invert, ddim_sample_batch, sample_from_latents};
use ddap_core::train::TrainConfig;
use std::time::Instant;

fn main() {
    let spec = DatasetSpec::default();
    let args: Vec<String> = std::env::args().collect();
    let ae_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let den_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let cfg = TrainConfig {
        ae_steps,
        den_steps,
        holdout_threshold: 10.0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (model, curve) = train_base_from_spec(&spec, &cfg, 1234).unwrap();
    println!(
        "train {:.0}s recon {:.2}dB holdout {:.4}",
        t0.elapsed().as_secs_f64(),
        curve.recon_psnr_db,
        curve.holdout_cond_loss
    );

    let t0 = Instant::now();
    let clf = classifier_for_spec(&spec, 500, 1234).unwrap();
    println!("classifier {:.0}s", t0.elapsed().as_secs_f64());
    // classifier sanity on real data
    let mut correct = 0;
    let mut total = 0;
    for s in 0..spec.n_subjects {
        for i in 0..spec.images_per_subject {
            let (img, _) = render_subject_image(&spec, 1234, s, i);
            if clf.predict_subject(&img).unwrap() == s {
                correct += 1;
            }
            total += 1;
        }
    }
    println!("classifier train-set acc {correct}/{total}");
    // ism self-similarity
    let refs: Vec<ImageTensor> = (0..4)
        .map(|i| render_subject_image(&spec, 1234, 0, i).0)
        .collect();
    println!(
        "ism(ref0, refs) = {:.4}",
        clf.ism_toy(&refs[0], &refs).unwrap()
    );
    let noise = ddap_core::dataset::render_noise_image(&spec, 99, 0);
    println!(
        "noise: dfr={} maxprob={:.3}",
        clf.dfr_toy(&noise).unwrap(),
        clf.max_subject_prob(&noise).unwrap()
    );

    // sampling quality: majority vote per subject prompt
    let t0 = Instant::now();
    for subject in [0usize, 3] {
        let cond = subject_prompt(&model.vocab, subject).unwrap();
        let seeds: Vec<u64> = (0..16).map(|i| 1000 + i).collect();
        let samples = ddim_sample_batch(&model, &cond, 20, &seeds).unwrap();
        let mut votes = vec![0usize; spec.n_subjects + 1];
        let mut subject_wins = 0usize;
        let mut isms = 0.0;
        let refs: Vec<ImageTensor> = (0..4)
            .map(|i| render_subject_image(&spec, 1234, subject, i).0)
            .collect();
        for s in &samples {
            votes[clf.predict_subject(s).unwrap()] += 1;
            isms += clf.ism_toy(s, &refs).unwrap();
            let probs = clf.probabilities(std::slice::from_ref(s));
            let own = probs[[0, subject]];
            let best_other = (0..spec.n_subjects)
                .filter(|&c| c != subject)
                .map(|c| probs[[0, c]])
                .fold(0.0_f64, f64::max);
            if own > best_other {
                subject_wins += 1;
            }
        }
        println!(
            "subject {subject}: votes {:?} own={} wins_among_subjects={}/16 ism_mean={:.3}",
            votes, votes[subject], subject_wins, isms / 16.0
        );
    }
    println!("sampling {:.0}s", t0.elapsed().as_secs_f64());

    // conditioning contrast: loss with correct vs wrong prompt at high t
    {
        use ndarray::IxDyn;
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut right = 0.0;
        let mut wrong = 0.0;
        for s in 0..4usize {
            let (img, _) = render_subject_image(&spec, 1234, s, 9);
            let z = model.encode(&img).unwrap();
            let ts: Vec<usize> = (0..8).map(|_| rng.random_range(80..=100)).collect();
            for (k, &t) in ts.iter().enumerate() {
                let eps = ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 4, 16, 16]), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let tape = ddap_core::tensor::Tape::new();
                let binder = ddap_core::nn::Binder::frozen(&tape, &model.tensors);
                let z0 = tape.constant(z.data.clone().insert_axis(ndarray::Axis(0)).into_dyn());
                let cond_r = subject_prompt(&model.vocab, s).unwrap();
                let cond_w = subject_prompt(&model.vocab, (s + 4) % 8).unwrap();
                let lr_ = ddap_core::ldm::cond_loss_frozen_var(
                    &binder, &model.arch, &model.schedule, z0, &cond_r, &[t], &eps,
                )
                .scalar_value();
                let tape2 = ddap_core::tensor::Tape::new();
                let binder2 = ddap_core::nn::Binder::frozen(&tape2, &model.tensors);
                let z02 = tape2.constant(z.data.clone().insert_axis(ndarray::Axis(0)).into_dyn());
                let lw_ = ddap_core::ldm::cond_loss_frozen_var(
                    &binder2, &model.arch, &model.schedule, z02, &cond_w, &[t], &eps,
                )
                .scalar_value();
                right += lr_;
                wrong += lw_;
                let _ = k;
            }
        }
        println!("high-t cond loss: right {:.4} wrong {:.4}", right / 32.0, wrong / 32.0);
    }

    // DDIM inversion round-trip
    let (x, _) = render_subject_image(&spec, 1234, 0, 0);
    let cond = subject_prompt(&model.vocab, 0).unwrap();
    for steps in [20usize, 50] {
        let t0 = Instant::now();
        let traj = ddim_invert(&model, &x, &cond, steps).unwrap();
        let recon = sample_from_latents(&model, &[traj.last().unwrap().clone()], &cond, steps)
            .unwrap()
            .remove(0);
        println!(
            "invert->sample steps={steps}: psnr {:.2} dB ({:.0}s)",
            metrics::psnr(&x, &recon).unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }

    // sampler-inversion latent consistency
    let z_start = {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        ddap_core::ldm::LatentCode::new(ndarray::Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap()
    };
    let gen = sample_from_latents(&model, &[z_start.clone()], &cond, 50)
        .unwrap()
        .remove(0);
    let traj = ddim_invert(&model, &gen, &cond, 50).unwrap();
    let z_end = traj.last().unwrap();
    let num = (&z_end.data - &z_start.data).mapv(|v| v * v).sum().sqrt();
    let den = z_start.data.mapv(|v| v * v).sum().sqrt();
    println!("inversion endpoint rel l2: {:.4}", num / den);
    // how much of that is the latent cycle gap at the bottom?
    let z_back = model.encode(&gen).unwrap();
    let z0_direct = {
        // run the sampler trajectory to recover its final z0 estimate
        // (decode of it is `gen`), approximated by encode(gen)
        z_back.clone()
    };
    let _ = z0_direct;
    let y2 = model.decode(&z_back).unwrap();
    let cyc = ddap_core::metrics::psnr(&gen, &y2).unwrap();
    println!("latent-cycle psnr of generated image: {:.2} dB", cyc);

    let _ = classifier::cosine;
}
