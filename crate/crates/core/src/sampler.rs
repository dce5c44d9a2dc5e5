//! Deterministic DDIM sampling and inversion (eta = 0).

use crate::error::{Error, Result};
use crate::ldm::{
    decode_var, encode_var, predict_noise_var, stack_images, AttnMap, ImageTensor, LatentCode,
    ModelParams,
};
use crate::nn::Binder;
use crate::prompt::PromptCondition;
use crate::tensor::{Real, Tape};
use ndarray::{Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::cell::RefCell;

/// Latents are unit-scale after calibration; estimates far outside this
/// range are numeric noise from the high-t division.
const Z0_CLAMP: Real = 3.0;

/// Inner fixed-point iterations per inversion step.
const INVERT_REFINEMENTS: usize = 3;

fn check_steps(params: &ModelParams, steps: usize) -> Result<usize> {
    let t_max = params.schedule.t_max();
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    if steps > t_max {
        return Err(Error::Argument(format!(
            "steps {steps} exceeds schedule length {t_max}"
        )));
    }
    if t_max % steps != 0 {
        return Err(Error::Argument(format!(
            "steps {steps} must divide schedule length {t_max} evenly"
        )));
    }
    Ok(t_max / steps)
}

fn predict_batch(
    params: &ModelParams,
    z: &ArrayD<Real>,
    t: usize,
    cond: &PromptCondition,
    rec: Option<&RefCell<Vec<AttnMap>>>,
) -> ArrayD<Real> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let zv = tape.constant(z.clone());
    let ts = vec![t; z.shape()[0]];
    predict_noise_var(&binder, &params.arch, zv, &ts, cond, rec).value()
}

fn decode_batch(params: &ModelParams, z: &ArrayD<Real>) -> Vec<ImageTensor> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let zv = tape.constant(z.clone());
    let x = decode_var(&binder, &params.arch, zv).value();
    (0..x.shape()[0])
        .map(|i| {
            let img = x.index_axis(Axis(0), i).to_owned();
            ImageTensor::from_clamped(img.into_dimensionality().expect("image rank"))
        })
        .collect()
}

/// Run the deterministic sampler from explicit starting latents.
pub fn sample_from_latents(
    params: &ModelParams,
    starts: &[LatentCode],
    cond: &PromptCondition,
    steps: usize,
) -> Result<Vec<ImageTensor>> {
    let stride = check_steps(params, steps)?;
    let views: Vec<_> = starts.iter().map(|z| z.data.view()).collect();
    let mut z = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::Argument(format!("latent stack: {e}")))?
        .into_dyn();
    for j in (1..=steps).rev() {
        let t = j * stride;
        let t_prev = (j - 1) * stride;
        let eps = predict_batch(params, &z, t, cond, None);
        let ab_t = params.schedule.alpha_bar(t);
        let ab_prev = params.schedule.alpha_bar(t_prev);
        let z0_hat = ((&z - &(&eps * (1.0 - ab_t).sqrt())) / ab_t.sqrt())
            .mapv(|v| v.clamp(-Z0_CLAMP, Z0_CLAMP));
        z = &z0_hat * ab_prev.sqrt() + &eps * (1.0 - ab_prev).sqrt();
    }
    Ok(decode_batch(params, &z))
}

/// Draw terminal latents from per-sample seeds and run the sampler.
pub fn ddim_sample_batch(
    params: &ModelParams,
    cond: &PromptCondition,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<ImageTensor>> {
    let [c, h, w] = params.arch.latent_shape();
    let starts: Vec<LatentCode> = seeds
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            LatentCode::new(Array3::from_shape_fn((c, h, w), |_| {
                rng.sample::<Real, _>(StandardNormal)
            }))
            .expect("gaussian latent is finite")
        })
        .collect();
    sample_from_latents(params, &starts, cond, steps)
}

/// Deterministic text-conditional sample.
pub fn ddim_sample(
    params: &ModelParams,
    cond: &PromptCondition,
    steps: usize,
    seed: u64,
) -> Result<ImageTensor> {
    Ok(ddim_sample_batch(params, cond, steps, &[seed])?.remove(0))
}

/// DDIM inversion: encode the image and walk the trajectory up to `z_T`.
///
/// Returns `steps + 1` latents, `z_0` first. When `record` is set, the
/// cross-attention maps of every inversion step are returned alongside.
pub fn ddim_invert_with_maps(
    params: &ModelParams,
    x: &ImageTensor,
    cond: &PromptCondition,
    steps: usize,
    record: bool,
) -> Result<(Vec<LatentCode>, Vec<Vec<AttnMap>>)> {
    let stride = check_steps(params, steps)?;
    let z0 = {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &params.tensors);
        let xv = tape.constant(stack_images(std::slice::from_ref(x)));
        encode_var(&binder, &params.arch, xv).value()
    };
    let mut z = z0.clone();
    let mut traj = Vec::with_capacity(steps + 1);
    let mut all_maps = Vec::new();
    traj.push(latent_from_batch(&z0));
    for j in 0..steps {
        let t_next = (j + 1) * stride;
        let t_cur = j * stride;
        let ab_cur = params.schedule.alpha_bar(t_cur);
        let ab_next = params.schedule.alpha_bar(t_next);
        // fixed-point refinement: the deterministic sampler step from
        // z_next uses eps(z_next, t_next), so invert against that field
        // rather than the first-order eps(z_cur, t_next) estimate
        let step_up = |eps: &ArrayD<Real>| -> ArrayD<Real> {
            let z0_hat = (&z - &(eps * (1.0 - ab_cur).sqrt())) / ab_cur.sqrt();
            &z0_hat * ab_next.sqrt() + &(eps * (1.0 - ab_next).sqrt())
        };
        let mut eps = predict_batch(params, &z, t_next, cond, None);
        let mut z_next = step_up(&eps);
        for _ in 1..INVERT_REFINEMENTS {
            eps = predict_batch(params, &z_next, t_next, cond, None);
            z_next = step_up(&eps);
        }
        if record {
            let maps = RefCell::new(Vec::new());
            let _ = predict_batch(params, &z_next, t_next, cond, Some(&maps));
            all_maps.push(maps.into_inner());
        }
        z = z_next;
        traj.push(latent_from_batch(&z));
    }
    Ok((traj, all_maps))
}

/// DDIM inversion trajectory `z_0 ... z_steps`.
pub fn ddim_invert(
    params: &ModelParams,
    x: &ImageTensor,
    cond: &PromptCondition,
    steps: usize,
) -> Result<Vec<LatentCode>> {
    Ok(ddim_invert_with_maps(params, x, cond, steps, false)?.0)
}

fn latent_from_batch(z: &ArrayD<Real>) -> LatentCode {
    let data = z
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("latent rank");
    LatentCode { data }
}
