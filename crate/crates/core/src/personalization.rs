//! DreamBooth-style fine-tuning: bind a rare identifier prompt to a small
//! subject image set by tuning the denoiser and token embeddings. The
//! encoder and decoder stay frozen.

use crate::error::{Error, Result};
use crate::ldm::{cond_loss_var, encode_var, stack_images, ImageTensor, ModelParams};
use crate::nn::{Adam, Binder};
use crate::prompt::PromptCondition;
use crate::tensor::{backward, Real, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fine-tuning settings.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub prompt: String,
    /// Toy-scale learning rate.
    pub lr: Real,
    /// Full-scale preset recorded for reference; unused at this scale.
    pub paper_scale_lr: Real,
    pub batch_size: usize,
    pub steps: usize,
    /// Optional prior-preservation term (off by default).
    pub prior_preservation: bool,
    pub prior_weight: Real,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            prompt: "a photo of sks subject".to_string(),
            lr: 1e-4,
            paper_scale_lr: 5e-7,
            batch_size: 2,
            steps: 200,
            prior_preservation: false,
            prior_weight: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<PromptCondition> {
        if self.lr <= 0.0 {
            return Err(Error::Config("finetune lr must be > 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("finetune steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("finetune batch size must be >= 1".into()));
        }
        let cond = PromptCondition::new(&params.vocab, &self.prompt)?;
        let n_ident = cond
            .token_ids
            .iter()
            .filter(|&&id| {
                let w = &params.vocab.words()[id];
                w == crate::prompt::DEFAULT_IDENTIFIER || w == crate::prompt::ALT_IDENTIFIER
            })
            .count();
        if n_ident != 1 {
            return Err(Error::Config(format!(
                "prompt must contain exactly one identifier token, found {n_ident}"
            )));
        }
        Ok(cond)
    }
}

/// A deep clone of the model used as the attack surrogate.
#[derive(Clone, Debug)]
pub struct SurrogateState {
    pub params: ModelParams,
    pub steps_applied: usize,
}

/// Deep copy; mutating the clone leaves the source untouched.
pub fn clone_model(params: &ModelParams) -> SurrogateState {
    SurrogateState {
        params: params.clone(),
        steps_applied: 0,
    }
}

/// Which parameters fine-tuning may update: the denoiser and the token
/// embedding table. Encoder and decoder are frozen.
pub fn finetune_trainable(name: &str) -> bool {
    name.starts_with("den.") || name == "tok.emb"
}

/// Apply `n_steps` of personalization fine-tuning in place.
///
/// Each step minimizes the conditional denoising loss on a batch drawn from
/// `images` under the configured identifier prompt. Deterministic for a
/// fixed rng state.
pub fn finetune(
    params: &mut ModelParams,
    images: &[ImageTensor],
    config: &FinetuneConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Real>> {
    finetune_with_prior(params, images, &[], config, n_steps, rng)
}

/// [`finetune`] with an optional prior-preservation set.
pub fn finetune_with_prior(
    params: &mut ModelParams,
    images: &[ImageTensor],
    prior: &[(ImageTensor, PromptCondition)],
    config: &FinetuneConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Real>> {
    if images.is_empty() {
        return Err(Error::Argument("finetune needs at least one image".into()));
    }
    let cond = config.validate(params)?;
    if n_steps == 0 {
        return Ok(Vec::new());
    }

    // The encoder is frozen, so latents are fixed for the whole run.
    let latents: Vec<_> = images
        .iter()
        .map(|x| params.encode(x).map(|z| z.data))
        .collect::<Result<Vec<_>>>()?;
    let prior_latents: Vec<_> = prior
        .iter()
        .map(|(x, c)| params.encode(x).map(|z| (z.data, c.clone())))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = Adam::new(config.lr);
    let mut curve = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..latents.len()))
            .collect();
        let (loss_val, named) = {
            let tape = Tape::new();
            let binder = Binder::with_filter(&tape, &params.tensors, |n| finetune_trainable(n));
            let views: Vec<_> = batch.iter().map(|&i| latents[i].view()).collect();
            let z0 = tape.constant(
                ndarray::stack(ndarray::Axis(0), &views)
                    .expect("latent batch")
                    .into_dyn(),
            );
            let mut loss = cond_loss_var(&binder, &params.arch, &params.schedule, z0, &cond, rng);
            if config.prior_preservation && !prior_latents.is_empty() {
                let pick = rng.random_range(0..prior_latents.len());
                let (pz, pcond) = &prior_latents[pick];
                let pz0 = tape.constant(pz.clone().insert_axis(ndarray::Axis(0)).into_dyn());
                let prior_loss =
                    cond_loss_var(&binder, &params.arch, &params.schedule, pz0, pcond, rng);
                loss = loss.add(prior_loss.scale(config.prior_weight));
            }
            let l = loss.scalar_value();
            let grads = backward(loss);
            (l, binder.grads(&grads))
        };
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fine-tune loss at step {step}"
            )));
        }
        opt.step(&mut params.tensors, &named);
        curve.push(loss_val);
    }
    params.tensors.check_finite()?;
    Ok(curve)
}

/// Fine-tune a surrogate clone, tracking how many steps it has absorbed.
pub fn finetune_surrogate(
    surrogate: &mut SurrogateState,
    images: &[ImageTensor],
    config: &FinetuneConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Real>> {
    let curve = finetune(&mut surrogate.params, images, config, n_steps, rng)?;
    surrogate.steps_applied += n_steps;
    Ok(curve)
}

/// Convenience wrapper: conditional loss of a batch of images under one
/// prompt (used to monitor personalization quality).
pub fn personalization_loss(
    params: &ModelParams,
    images: &[ImageTensor],
    cond: &PromptCondition,
    rng: &mut ChaCha8Rng,
) -> Result<Real> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let xv = tape.constant(stack_images(images));
    let z0 = encode_var(&binder, &params.arch, xv);
    let loss = cond_loss_var(&binder, &params.arch, &params.schedule, z0, cond, rng);
    Ok(loss.scalar_value())
}
