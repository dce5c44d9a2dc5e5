//! Attention-attribution heatmaps and the binary attack-region mask that
//! gates perturbation updates.

use crate::error::{Error, Result};
use crate::ldm::{ImageTensor, ModelParams};
use crate::prompt::PromptCondition;
use crate::sampler::ddim_invert_with_maps;
use crate::tensor::Real;
use ndarray::{Array2, Array3};

/// Min-max normalized attribution heatmap for one token, `[H,W]` in `[0,1]`.
#[derive(Clone, Debug)]
pub struct AttributionHeatmap {
    pub map: Array2<Real>,
    pub model_tag: String,
    pub token: String,
    pub inversion_steps: usize,
}

/// Strictly binary `[H,W]` mask plus the threshold that produced it.
/// Broadcast across channels on application.
#[derive(Clone, Debug)]
pub struct BinaryMask {
    pub mask: Array2<Real>,
    pub tau: Real,
}

impl BinaryMask {
    /// All-ones mask of the given spatial size.
    pub fn full(h: usize, w: usize) -> Self {
        BinaryMask {
            mask: Array2::ones((h, w)),
            tau: 0.0,
        }
    }

    pub fn support_size(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0.0).count()
    }

    /// Hadamard product with a `[C,H,W]` array (mask broadcast over channels).
    pub fn apply_to(&self, delta: &Array3<Real>) -> Array3<Real> {
        let (c, h, w) = delta.dim();
        assert_eq!((h, w), self.mask.dim(), "mask shape mismatch");
        let mut out = delta.clone();
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i, j]] *= self.mask[[i, j]];
                }
            }
        }
        out
    }
}

/// Bilinear upsampling of a small map to `[out_h, out_w]`.
pub fn bilinear_upsample(src: &Array2<Real>, out_h: usize, out_w: usize) -> Array2<Real> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = h as Real / out_h as Real;
    let sx = w as Real / out_w as Real;
    for i in 0..out_h {
        for j in 0..out_w {
            let fy = ((i as Real + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Real);
            let fx = ((j as Real + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Real);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dy = fy - y0 as Real;
            let dx = fx - x0 as Real;
            out[[i, j]] = src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
                + src[[y0, x1]] * (1.0 - dy) * dx
                + src[[y1, x0]] * dy * (1.0 - dx)
                + src[[y1, x1]] * dy * dx;
        }
    }
    out
}

/// Attribution heatmap of one prompt token from a fine-tuned model.
///
/// Runs DDIM inversion on the image, collects every cross-attention layer's
/// map for `token_index` at every inversion step, bilinearly upsamples each
/// to image resolution, averages uniformly, and min-max normalizes. A
/// constant field normalizes to all zeros.
pub fn attribution_map(
    personalized: &ModelParams,
    x: &ImageTensor,
    cond: &PromptCondition,
    token_index: usize,
    steps: usize,
) -> Result<AttributionHeatmap> {
    if token_index >= cond.token_ids.len() {
        return Err(Error::Argument(format!(
            "token index {token_index} out of prompt bounds ({} tokens)",
            cond.token_ids.len()
        )));
    }
    let (_c, img_h, img_w) = x.shape();
    let (_traj, step_maps) = ddim_invert_with_maps(personalized, x, cond, steps, true)?;
    let mut acc = Array2::<Real>::zeros((img_h, img_w));
    let mut count = 0usize;
    for maps in &step_maps {
        for m in maps {
            let mut small = Array2::<Real>::zeros((m.height, m.width));
            for r in 0..m.height * m.width {
                small[[r / m.width, r % m.width]] = m.probs[[0, r, token_index]];
            }
            acc += &bilinear_upsample(&small, img_h, img_w);
            count += 1;
        }
    }
    if count > 0 {
        acc /= count as Real;
    }
    let min = acc.iter().cloned().fold(Real::INFINITY, Real::min);
    let max = acc.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let map = if max - min > 1e-12 {
        acc.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros((img_h, img_w))
    };
    Ok(AttributionHeatmap {
        map,
        model_tag: personalized.arch.version.tag().to_string(),
        token: cond
            .token_ids
            .get(token_index)
            .map(|&id| personalized.vocab.words()[id].clone())
            .unwrap_or_default(),
        inversion_steps: steps,
    })
}

/// Elementwise threshold: mask is 1 where the heatmap is at least `tau`.
pub fn binarize(hm: &AttributionHeatmap, tau: Real) -> Result<BinaryMask> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::Argument(format!(
            "threshold tau must be finite and >= 0, got {tau}"
        )));
    }
    let mask = hm.map.mapv(|v| if v >= tau { 1.0 } else { 0.0 });
    Ok(BinaryMask { mask, tau })
}

/// `x_adv = x + delta ⊙ M`, clamped to `[0,1]`.
pub fn apply_mask(x_clean: &ImageTensor, delta: &Array3<Real>, mask: &BinaryMask) -> ImageTensor {
    let gated = mask.apply_to(delta);
    ImageTensor::from_clamped(x_clean.data() + &gated)
}

/// Replace the delta of `x_candidate` relative to `x_clean` by its masked
/// version; with no mask, `x_candidate` passes through unchanged.
pub fn filter_delta(
    x_clean: &Array3<Real>,
    x_candidate: &Array3<Real>,
    mask: Option<&BinaryMask>,
) -> Array3<Real> {
    match mask {
        None => x_candidate.clone(),
        Some(m) => {
            let delta = x_candidate - x_clean;
            x_clean + &m.apply_to(&delta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heatmap(map: Array2<Real>) -> AttributionHeatmap {
        AttributionHeatmap {
            map,
            model_tag: "vA".to_string(),
            token: "sks".to_string(),
            inversion_steps: 5,
        }
    }

    #[test]
    fn binarize_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hm = heatmap(Array2::from_shape_fn((8, 8), |_| rng.random::<Real>()));
        let all = binarize(&hm, 0.0).unwrap();
        assert_eq!(all.support_size(), 64);
        let none = binarize(&hm, 1.0 + 1e-9).unwrap();
        assert_eq!(none.support_size(), 0);
        assert!(binarize(&hm, -0.1).is_err());
        assert!(binarize(&hm, Real::NAN).is_err());
    }

    #[test]
    fn binarize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..10 {
            let hm = heatmap(Array2::from_shape_fn((16, 16), |_| rng.random::<Real>()));
            let tau = rng.random::<Real>();
            let m = binarize(&hm, tau).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    let expect = if hm.map[[i, j]] >= tau { 1.0 } else { 0.0 };
                    assert_eq!(m.mask[[i, j]], expect, "trial {trial} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn mask_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hm = heatmap(Array2::from_shape_fn((12, 12), |_| rng.random::<Real>()));
        let m1 = binarize(&hm, 0.3).unwrap();
        let m2 = binarize(&hm, 0.7).unwrap();
        for (a, b) in m1.mask.iter().zip(m2.mask.iter()) {
            assert!(b <= a, "support at higher tau must be a subset");
        }
    }

    #[test]
    fn apply_mask_support_and_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |_| {
            rng.random::<Real>() * 0.5 + 0.25
        }))
        .unwrap();
        let delta = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<Real>() * 0.1 - 0.05);
        let mut maskdata = Array2::zeros((8, 8));
        for i in 0..4 {
            for j in 0..8 {
                maskdata[[i, j]] = 1.0;
            }
        }
        let mask = BinaryMask {
            mask: maskdata,
            tau: 0.5,
        };
        let out = apply_mask(&x, &delta, &mask);
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    if i < 4 {
                        let expect = (x.data()[[c, i, j]] + delta[[c, i, j]]).clamp(0.0, 1.0);
                        assert_eq!(out.data()[[c, i, j]], expect);
                    } else {
                        assert_eq!(out.data()[[c, i, j]], x.data()[[c, i, j]]);
                    }
                }
            }
        }
        // all-ones and all-zeros masks
        let ones = BinaryMask::full(8, 8);
        let out = apply_mask(&x, &delta, &ones);
        for (o, (xv, dv)) in out.data().iter().zip(x.data().iter().zip(delta.iter())) {
            assert_eq!(*o, (xv + dv).clamp(0.0, 1.0));
        }
        let zeros = BinaryMask {
            mask: Array2::zeros((8, 8)),
            tau: 2.0,
        };
        let out = apply_mask(&x, &delta, &zeros);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn filter_delta_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clean = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<Real>());
        let cand = Array3::from_shape_fn((3, 8, 8), |_| rng.random::<Real>());
        let mask = BinaryMask {
            mask: Array2::from_shape_fn((8, 8), |(i, _)| if i % 2 == 0 { 1.0 } else { 0.0 }),
            tau: 0.5,
        };
        let once = filter_delta(&clean, &cand, Some(&mask));
        let twice = filter_delta(&clean, &once, Some(&mask));
        assert_eq!(once, twice);
    }

    #[test]
    fn bilinear_upsample_preserves_constants() {
        let src = Array2::from_elem((4, 4), 0.42);
        let up = bilinear_upsample(&src, 64, 64);
        assert!(up.iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }
}
