//! End-to-end flows shared by the CLI and the acceptance suite: train the
//! base model from the procedural dataset, protect a subject's images, and
//! evaluate what a fresh personalized fine-tune learns from a given image
//! set.

use crate::classifier::ClassifierParams;
use crate::config::RunConfig;
use crate::dataset::DatasetSpec;
use crate::error::Result;
use crate::ldm::{ImageTensor, ModelParams, ModelVersion};
use crate::metrics::{self, EvalReport, ImageRecord, SampleRecord};
use crate::personalization::{finetune, FinetuneConfig};
use crate::prompt::identifier_prompt;
use crate::sampler::ddim_sample_batch;
use crate::tensor::Real;
use crate::train::{train_base, TrainConfig, TrainCurve, TrainItem};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Build the training and holdout sets from the procedural generator and
/// train a base model.
pub fn train_base_from_spec(
    spec: &DatasetSpec,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainCurve)> {
    let mut items = Vec::new();
    for subject in 0..spec.n_subjects {
        for index in 0..spec.images_per_subject {
            let (image, _) = crate::dataset::render_subject_image(spec, seed, subject, index);
            items.push(TrainItem { image, subject });
        }
    }
    // held-out images: fresh indices beyond the training range
    let mut holdout = Vec::new();
    for subject in 0..spec.n_subjects {
        let (image, _) = crate::dataset::render_subject_image(
            spec,
            seed,
            subject,
            spec.images_per_subject + 7,
        );
        holdout.push(TrainItem { image, subject });
    }
    train_base(&items, &holdout, train_cfg, seed, None)
}

/// Pixelwise mean of a set of images.
pub fn mean_image(images: &[ImageTensor]) -> ImageTensor {
    let (c, h, w) = images[0].shape();
    let mut acc = Array3::<Real>::zeros((c, h, w));
    for img in images {
        acc += img.data();
    }
    acc /= images.len() as Real;
    ImageTensor::from_clamped(acc)
}

/// Evaluation-side knobs.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub finetune: FinetuneConfig,
    pub eval_identifier: String,
    pub samples: usize,
    pub ddim_steps: usize,
    pub seed: u64,
    pub run_label: String,
    pub config_hash: String,
}

impl EvalSettings {
    pub fn from_run_config(cfg: &RunConfig, run_label: &str) -> Self {
        EvalSettings {
            finetune: cfg.finetune_config(),
            eval_identifier: cfg.eval_identifier.clone(),
            samples: cfg.eval_samples,
            ddim_steps: cfg.eval_ddim_steps,
            seed: cfg.seed,
            run_label: run_label.to_string(),
            config_hash: cfg.hash(),
        }
    }
}

/// Fine-tune a fresh copy of `eval_base` on `finetune_images`, sample with
/// the evaluation prompt, and score stealth (input-side) and efficacy
/// (generation-side) metrics.
///
/// `clean_counterparts` are the unperturbed versions of `finetune_images`;
/// `subject_refs` is the subject's clean reference split.
pub fn evaluate_run(
    eval_base: &ModelParams,
    perceptual_ref: &ModelParams,
    clf: &ClassifierParams,
    finetune_images: &[ImageTensor],
    clean_counterparts: &[ImageTensor],
    subject_refs: &[ImageTensor],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    // personalize a fresh model
    let mut personalized = eval_base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(settings.seed, "eval-finetune"));
    finetune(
        &mut personalized,
        finetune_images,
        &settings.finetune,
        settings.finetune.steps,
        &mut rng,
    )?;

    // sample with the evaluation prompt
    let eval_cond = identifier_prompt(&personalized.vocab, &settings.eval_identifier)?;
    let seeds: Vec<u64> = (0..settings.samples)
        .map(|i| crate::seeds::derive(settings.seed, &format!("eval-sample/{i}")))
        .collect();
    let samples = ddim_sample_batch(&personalized, &eval_cond, settings.ddim_steps, &seeds)?;

    // input-side stealth metrics
    let mut images = Vec::new();
    for (i, (adv, clean)) in finetune_images
        .iter()
        .zip(clean_counterparts.iter())
        .enumerate()
    {
        images.push(ImageRecord {
            index: i,
            psnr_in: metrics::psnr(clean, adv)?,
            perceptual_in: metrics::perceptual_distance(clean, adv, perceptual_ref),
        });
    }

    // generation-side efficacy metrics
    let ref_mean = mean_image(subject_refs);
    let mut sample_records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        sample_records.push(SampleRecord {
            index: i,
            ism_toy: clf.ism_toy(s, subject_refs)?,
            dfr_toy: clf.dfr_toy(s)?,
            quality_toy: clf.max_subject_prob(s)?,
            psnr_gen: metrics::psnr(s, &ref_mean)?,
        });
    }

    Ok(EvalReport::from_records(
        settings.run_label.clone(),
        format!("a photo of {} subject", settings.eval_identifier),
        eval_base.arch.version.tag().to_string(),
        settings.config_hash.clone(),
        images,
        sample_records,
    ))
}

/// Train (or reuse) the toy classifier for a dataset spec.
pub fn classifier_for_spec(
    spec: &DatasetSpec,
    steps: usize,
    seed: u64,
) -> Result<ClassifierParams> {
    let (images, labels) = crate::classifier::classifier_training_set(spec, seed);
    crate::classifier::train_subject_classifier(&images, &labels, spec.n_subjects, steps, seed)
}

/// A base model for the requested version: trains with the version swapped
/// into the config.
pub fn train_base_version(
    spec: &DatasetSpec,
    train_cfg: &TrainConfig,
    version: ModelVersion,
    seed: u64,
) -> Result<(ModelParams, TrainCurve)> {
    let mut cfg = train_cfg.clone();
    cfg.version = version;
    train_base_from_spec(spec, &cfg, seed)
}
