//! Base-model training: an autoencoder phase followed by a conditional
//! denoiser phase over the procedural subject dataset.

use crate::error::{Error, Result};
use crate::ldm::{
    cond_loss_var, decode_var, encode_var, stack_images, ImageTensor, ModelParams, ModelVersion,
};
use crate::metrics;
use crate::nn::{Adam, Binder};
use crate::prompt::{subject_prompt, Vocabulary};
use crate::tensor::{backward, Real, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Base-training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub version: ModelVersion,
    pub ae_steps: usize,
    pub den_steps: usize,
    pub ae_batch: usize,
    pub den_batch: usize,
    pub ae_lr: Real,
    pub den_lr: Real,
    /// Required final conditional loss on the held-out batch.
    pub holdout_threshold: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: ModelVersion::VA,
            ae_steps: 1600,
            den_steps: 2400,
            ae_batch: 4,
            den_batch: 4,
            ae_lr: 2e-3,
            den_lr: 2e-3,
            holdout_threshold: 1.0,
        }
    }
}

/// Loss curves persisted after training.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainCurve {
    pub ae: Vec<Real>,
    pub denoiser: Vec<Real>,
    pub holdout_cond_loss: Real,
    pub recon_psnr_db: Real,
}

/// Labeled training image.
pub struct TrainItem {
    pub image: ImageTensor,
    pub subject: usize,
}

/// Train the tiny LDM from scratch.
///
/// Phase 1 fits the autoencoder (reconstruction MSE); phase 2 freezes the
/// encoder/decoder and fits the conditional denoiser plus token embeddings.
/// Aborts with a numeric error if the loss goes non-finite; `on_diverge`
/// then receives the last finite parameter state.
pub fn train_base(
    items: &[TrainItem],
    holdout: &[TrainItem],
    config: &TrainConfig,
    seed: u64,
    mut on_diverge: Option<&mut dyn FnMut(&ModelParams)>,
) -> Result<(ModelParams, TrainCurve)> {
    if items.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let n_subjects = items.iter().map(|i| i.subject).max().unwrap_or(0) + 1;
    let vocab = Vocabulary::default_toy(n_subjects);
    let mut params = ModelParams::init(config.version, vocab, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "train-base"));
    let mut curve = TrainCurve::default();

    // --- phase 1: autoencoder ---
    let mut opt = Adam::new(config.ae_lr);
    let mut last_good = params.clone();
    for step in 0..config.ae_steps {
        let batch: Vec<&ImageTensor> = (0..config.ae_batch)
            .map(|_| &items[rng.random_range(0..items.len())].image)
            .collect();
        let batch_owned: Vec<ImageTensor> = batch.into_iter().cloned().collect();
        let (loss_val, named) = {
            let tape = Tape::new();
            let binder = Binder::with_filter(&tape, &params.tensors, |n| {
                n.starts_with("enc.") || n.starts_with("dec.")
            });
            let x = tape.constant(stack_images(&batch_owned));
            let z = encode_var(&binder, &params.arch, x);
            let y = decode_var(&binder, &params.arch, z);
            // reconstruction plus a small latent-cycle term so that
            // encode(decode(z)) stays consistent, which DDIM inversion of
            // generated images depends on
            let z_cycle = encode_var(&binder, &params.arch, y);
            let loss = y.mse(x).add(z_cycle.mse(z).scale(0.05));
            let l = loss.scalar_value();
            let grads = backward(loss);
            (l, binder.grads(&grads))
        };
        if !loss_val.is_finite() {
            if let Some(cb) = on_diverge.as_mut() {
                cb(&last_good);
            }
            return Err(Error::Numeric(format!(
                "autoencoder loss diverged at step {step}"
            )));
        }
        opt.step(&mut params.tensors, &named);
        if step % 50 == 0 {
            last_good = params.clone();
        }
        curve.ae.push(loss_val);
    }

    // calibrate the latent normalization constant so diffusion operates on
    // roughly unit-variance latents
    {
        let mut acc = 0.0;
        let mut count = 0usize;
        for item in items {
            let raw = params.encode(&item.image)?.data;
            for &v in raw.iter() {
                acc += v * v;
                count += 1;
            }
        }
        let std = (acc / count as Real).sqrt().max(1e-6);
        let old = params.tensors.expect("latent_scale")[[0]];
        params
            .tensors
            .get_mut("latent_scale")
            .expect("latent_scale exists")
            .fill(old * std);
    }

    // --- phase 2: conditional denoiser on frozen latents ---
    let mut latents_by_subject: Vec<Vec<ndarray::Array3<Real>>> = vec![Vec::new(); n_subjects];
    for item in items {
        latents_by_subject[item.subject].push(params.encode(&item.image)?.data);
    }
    let conds: Vec<_> = (0..n_subjects)
        .map(|s| subject_prompt(&params.vocab, s))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Adam::new(config.den_lr);
    for step in 0..config.den_steps {
        // cosine decay to a tenth of the initial rate
        let progress = step as Real / config.den_steps.max(1) as Real;
        opt.lr = config.den_lr
            * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let subject = rng.random_range(0..n_subjects);
        let pool = &latents_by_subject[subject];
        if pool.is_empty() {
            continue;
        }
        let picks: Vec<usize> = (0..config.den_batch)
            .map(|_| rng.random_range(0..pool.len()))
            .collect();
        let (loss_val, named) = {
            let tape = Tape::new();
            let binder = Binder::with_filter(&tape, &params.tensors, |n| {
                n.starts_with("den.") || n == "tok.emb"
            });
            let views: Vec<_> = picks.iter().map(|&i| pool[i].view()).collect();
            let z0 = tape.constant(
                ndarray::stack(ndarray::Axis(0), &views)
                    .expect("latent batch")
                    .into_dyn(),
            );
            let t_max = params.schedule.t_max();
            let ts: Vec<usize> = (0..picks.len())
                .map(|_| rng.random_range(1..=t_max))
                .collect();
            let eps_shape: Vec<usize> = z0.shape();
            let eps = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&eps_shape), |_| {
                use rand_distr::StandardNormal;
                rng.sample::<Real, _>(StandardNormal)
            });
            let loss = crate::ldm::weighted_cond_loss_var(
                &binder,
                &params.arch,
                &params.schedule,
                z0,
                &conds[subject],
                &ts,
                &eps,
                50.0,
            );
            let l = loss.scalar_value();
            let grads = backward(loss);
            (l, binder.grads(&grads))
        };
        if !loss_val.is_finite() {
            if let Some(cb) = on_diverge.as_mut() {
                cb(&last_good);
            }
            return Err(Error::Numeric(format!(
                "denoiser loss diverged at step {step}"
            )));
        }
        opt.step(&mut params.tensors, &named);
        if step % 50 == 0 {
            last_good = params.clone();
        }
        curve.denoiser.push(loss_val);
    }

    // --- final checks ---
    let mut psnrs = Vec::new();
    for item in items.iter().take(16) {
        let recon = params.decode(&params.encode(&item.image)?)?;
        psnrs.push(metrics::psnr(&item.image, &recon)?);
    }
    curve.recon_psnr_db = metrics::stable_mean(&psnrs);

    if !holdout.is_empty() {
        let mut hrng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "holdout"));
        let mut losses = Vec::new();
        for item in holdout {
            let z = params.encode(&item.image)?;
            let cond = &conds[item.subject.min(n_subjects - 1)];
            losses.push(params.cond_loss(&[z], cond, &mut hrng)?);
        }
        curve.holdout_cond_loss = metrics::stable_mean(&losses);
        if curve.holdout_cond_loss > config.holdout_threshold {
            return Err(Error::Numeric(format!(
                "held-out conditional loss {:.4} above threshold {:.4}",
                curve.holdout_cond_loss, config.holdout_threshold
            )));
        }
    }
    Ok((params, curve))
}
