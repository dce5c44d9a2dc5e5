//! Image quality metrics and the evaluation report.

use crate::error::{Error, Result};
use crate::ldm::{encode_stages_var, stack_images, ImageTensor, ModelParams};
use crate::nn::Binder;
use crate::tensor::{Real, Tape};
use serde::{Deserialize, Serialize};

/// Sentinel PSNR for identical images.
pub const PSNR_CAP_DB: Real = 100.0;

/// `10 log10(1 / MSE)` on the `[0,1]` scale, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Real> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.data().len() as Real;
    let mse: Real = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// LPIPS-style proxy: encoder stage features of both images are unit-
/// normalized along channels at every spatial position; the mean squared
/// difference is averaged over stages.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, reference: &ModelParams) -> Real {
    let feats_a = encode_stage_values(reference, a);
    let feats_b = encode_stage_values(reference, b);
    let mut total = 0.0;
    for (fa, fb) in feats_a.iter().zip(feats_b.iter()) {
        let na = channel_unit_normalize(fa);
        let nb = channel_unit_normalize(fb);
        let n = na.len() as Real;
        let d: Real = na
            .iter()
            .zip(nb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<Real>()
            / n;
        total += d;
    }
    total / feats_a.len() as Real
}

fn encode_stage_values(params: &ModelParams, x: &ImageTensor) -> Vec<ndarray::ArrayD<Real>> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let xv = tape.constant(stack_images(std::slice::from_ref(x)));
    let (_z, stages) = encode_stages_var(&binder, &params.arch, xv);
    stages.iter().map(|s| s.value()).collect()
}

fn channel_unit_normalize(f: &ndarray::ArrayD<Real>) -> ndarray::ArrayD<Real> {
    // [1,C,H,W]: normalize the channel vector at each (h,w)
    let shape = f.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = f.clone();
    for i in 0..h {
        for j in 0..w {
            let mut norm = 0.0;
            for ch in 0..c {
                let v = f[[0, ch, i, j]];
                norm += v * v;
            }
            let norm = norm.sqrt().max(1e-10);
            for ch in 0..c {
                out[[0, ch, i, j]] /= norm;
            }
        }
    }
    out
}

/// l-infinity budget audit of a protected image against its clean original.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetReport {
    pub eta: Real,
    pub max_abs_delta: Real,
    /// Fraction of pixels within 1e-12 of the budget boundary.
    pub boundary_fraction: Real,
    pub pass: bool,
}

pub fn budget_audit(x_clean: &ImageTensor, x_adv: &ImageTensor, eta: Real) -> Result<BudgetReport> {
    if x_clean.shape() != x_adv.shape() {
        return Err(Error::Argument(format!(
            "budget audit shape mismatch: {:?} vs {:?}",
            x_clean.shape(),
            x_adv.shape()
        )));
    }
    let mut max_abs = 0.0_f64;
    let mut at_boundary = 0usize;
    let n = x_clean.data().len();
    for (c, a) in x_clean.data().iter().zip(x_adv.data().iter()) {
        let d = (a - c).abs();
        max_abs = max_abs.max(d);
        if (d - eta).abs() <= 1e-12 {
            at_boundary += 1;
        }
    }
    Ok(BudgetReport {
        eta,
        max_abs_delta: max_abs,
        boundary_fraction: at_boundary as Real / n as Real,
        pass: max_abs <= eta + 1e-8,
    })
}

/// Permutation-invariant mean: values are sorted by total order before
/// summation so aggregation does not depend on image order.
pub fn stable_mean(values: &[Real]) -> Real {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.iter().sum::<Real>() / sorted.len() as Real
}

/// Input-side metrics of one protected image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub psnr_in: Real,
    pub perceptual_in: Real,
}

/// Generated-sample metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub ism_toy: Real,
    pub dfr_toy: u8,
    pub quality_toy: Real,
    pub psnr_gen: Real,
}

/// Quantitative evaluation of one run; aggregates are arithmetic means of
/// the per-image / per-sample values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_label: String,
    pub prompt: String,
    pub model_version: String,
    pub config_hash: String,
    pub images: Vec<ImageRecord>,
    pub samples: Vec<SampleRecord>,
    pub psnr_in: Real,
    pub perceptual_in: Real,
    pub ism_toy: Real,
    pub dfr_toy: Real,
    pub quality_toy: Real,
    pub psnr_gen: Real,
}

impl EvalReport {
    pub fn from_records(
        run_label: String,
        prompt: String,
        model_version: String,
        config_hash: String,
        images: Vec<ImageRecord>,
        samples: Vec<SampleRecord>,
    ) -> Self {
        let psnr_in = stable_mean(&images.iter().map(|r| r.psnr_in).collect::<Vec<_>>());
        let perceptual_in =
            stable_mean(&images.iter().map(|r| r.perceptual_in).collect::<Vec<_>>());
        let ism_toy = stable_mean(&samples.iter().map(|r| r.ism_toy).collect::<Vec<_>>());
        let dfr_toy = stable_mean(&samples.iter().map(|r| r.dfr_toy as Real).collect::<Vec<_>>());
        let quality_toy =
            stable_mean(&samples.iter().map(|r| r.quality_toy).collect::<Vec<_>>());
        let psnr_gen = stable_mean(&samples.iter().map(|r| r.psnr_gen).collect::<Vec<_>>());
        EvalReport {
            run_label,
            prompt,
            model_version,
            config_hash,
            images,
            samples,
            psnr_in,
            perceptual_in,
            ism_toy,
            dfr_toy,
            quality_toy,
            psnr_gen,
        }
    }
}

/// Text table over a set of reports, one row per run.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>8} {:>12} {:>8} {:>8} {:>9} {:>9}\n",
        "run", "PSNR", "perceptual", "ISM", "DFR", "quality", "PSNR_gen"
    ));
    out.push_str(&"-".repeat(78));
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{:<18} {:>8.2} {:>12.5} {:>8.3} {:>8.2} {:>9.3} {:>9.2}\n",
            r.run_label, r.psnr_in, r.perceptual_in, r.ism_toy, r.dfr_toy, r.quality_toy,
            r.psnr_gen
        ));
    }
    out
}
