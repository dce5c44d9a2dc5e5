//! Frequency Perturbation Learning: blockwise orthonormal DCT-II, an
//! energy-adaptive weight matrix, sign-gradient updates of a coefficient
//! perturbation, and the dual frequency/spatial projections.

use crate::error::{Error, Result};
use crate::ldm::{cond_loss_frozen_var, encode_var, ImageTensor, ModelParams};
use crate::localization::BinaryMask;
use crate::nn::Binder;
use crate::prompt::PromptCondition;
use crate::tensor::{backward, Real, Tape};
use ndarray::{Array2, Array3, Array5, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const DEFAULT_BLOCK: usize = 8;

/// Orthonormal DCT-II basis matrix: `C[u][i] = c(u) cos((2i+1) u pi / 2K)`
/// with `c(0) = sqrt(1/K)` and `c(u>0) = sqrt(2/K)`.
fn dct_matrix(k: usize) -> Array2<Real> {
    let mut c = Array2::zeros((k, k));
    for u in 0..k {
        let cu = if u == 0 {
            (1.0 / k as Real).sqrt()
        } else {
            (2.0 / k as Real).sqrt()
        };
        for i in 0..k {
            c[[u, i]] = cu * ((2 * i + 1) as Real * u as Real * std::f64::consts::PI
                / (2 * k) as Real)
                .cos();
        }
    }
    c
}

/// 2-d orthonormal DCT-II of a `[K,K]` block.
pub fn dct2(block: &Array2<Real>) -> Array2<Real> {
    let k = block.nrows();
    let c = dct_matrix(k);
    c.dot(block).dot(&c.t())
}

/// Exact inverse of [`dct2`].
pub fn idct2(coeffs: &Array2<Real>) -> Array2<Real> {
    let k = coeffs.nrows();
    let c = dct_matrix(k);
    c.t().dot(coeffs).dot(&c)
}

/// Per-block DCT coefficients of an image: `[C, by, bx, K, K]`.
#[derive(Clone, Debug)]
pub struct FrequencyBlockSet {
    pub coeffs: Array5<Real>,
    pub block: usize,
    pub source_shape: (usize, usize, usize),
}

/// Tile an image into non-overlapping `K x K` blocks: `[C, by, bx, K, K]`.
pub fn split_blocks(x: &Array3<Real>, k: usize) -> Result<Array5<Real>> {
    let (c, h, w) = x.dim();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Argument(format!(
            "image {h}x{w} not divisible into {k}x{k} blocks"
        )));
    }
    let (by, bx) = (h / k, w / k);
    let mut out = Array5::zeros((c, by, bx, k, k));
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                for i in 0..k {
                    for j in 0..k {
                        out[[ci, b0, b1, i, j]] = x[[ci, b0 * k + i, b1 * k + j]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`split_blocks`]; bit-exact.
pub fn merge_blocks(blocks: &Array5<Real>) -> Array3<Real> {
    let (c, by, bx, k, _) = blocks.dim();
    let mut out = Array3::zeros((c, by * k, bx * k));
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                for i in 0..k {
                    for j in 0..k {
                        out[[ci, b0 * k + i, b1 * k + j]] = blocks[[ci, b0, b1, i, j]];
                    }
                }
            }
        }
    }
    out
}

/// Blockwise DCT of a whole image.
pub fn dct_image(x: &Array3<Real>, k: usize) -> Result<FrequencyBlockSet> {
    let blocks = split_blocks(x, k)?;
    let (c, by, bx, _, _) = blocks.dim();
    let m = dct_matrix(k);
    let mut coeffs = blocks.clone();
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                let blk = blocks
                    .slice(ndarray::s![ci, b0, b1, .., ..])
                    .to_owned();
                let d = m.dot(&blk).dot(&m.t());
                coeffs.slice_mut(ndarray::s![ci, b0, b1, .., ..]).assign(&d);
            }
        }
    }
    Ok(FrequencyBlockSet {
        coeffs,
        block: k,
        source_shape: x.dim(),
    })
}

/// Blockwise inverse DCT back to an image array.
pub fn idct_image(f: &FrequencyBlockSet) -> Array3<Real> {
    let (c, by, bx, k, _) = f.coeffs.dim();
    let m = dct_matrix(k);
    let mut blocks = f.coeffs.clone();
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                let d = f.coeffs.slice(ndarray::s![ci, b0, b1, .., ..]).to_owned();
                let blk = m.t().dot(&d).dot(&m);
                blocks
                    .slice_mut(ndarray::s![ci, b0, b1, .., ..])
                    .assign(&blk);
            }
        }
    }
    merge_blocks(&blocks)
}

/// Energy-adaptive frequency weights, `[C,K,K]`, max entry 1 per channel.
#[derive(Clone, Debug)]
pub struct WeightMatrix {
    pub w: Array3<Real>,
}

/// `W(u,v) = normalize( r(u,v)^alpha * (1 - E(u,v)/E_max)^beta )` where
/// `r(u,v) = (u+v) / (2(K-1))` and `E` is the squared coefficient magnitude
/// averaged over blocks. All-zero coefficients degrade to the pure radial
/// term.
pub fn energy_weight_matrix(f: &FrequencyBlockSet, alpha: Real, beta: Real) -> WeightMatrix {
    let (c, by, bx, k, _) = f.coeffs.dim();
    let mut w = Array3::zeros((c, k, k));
    for ci in 0..c {
        let mut energy = Array2::<Real>::zeros((k, k));
        for b0 in 0..by {
            for b1 in 0..bx {
                for u in 0..k {
                    for v in 0..k {
                        let d = f.coeffs[[ci, b0, b1, u, v]];
                        energy[[u, v]] += d * d;
                    }
                }
            }
        }
        energy /= (by * bx) as Real;
        let emax = energy.iter().cloned().fold(0.0_f64, Real::max);
        let mut wmax = 0.0_f64;
        for u in 0..k {
            for v in 0..k {
                let r = if k > 1 {
                    (u + v) as Real / (2 * (k - 1)) as Real
                } else {
                    1.0
                };
                let e_term = if emax > 0.0 {
                    1.0 - energy[[u, v]] / emax
                } else {
                    1.0
                };
                let val = r.powf(alpha) * e_term.powf(beta);
                w[[ci, u, v]] = val;
                wmax = wmax.max(val);
            }
        }
        if wmax > 0.0 {
            for u in 0..k {
                for v in 0..k {
                    w[[ci, u, v]] /= wmax;
                }
            }
        }
    }
    WeightMatrix { w }
}

/// Frequency-domain perturbation, shaped like the coefficient set.
#[derive(Clone, Debug)]
pub struct FrequencyPerturbation {
    pub p: Array5<Real>,
}

impl FrequencyPerturbation {
    /// Standard-normal initialization.
    pub fn init(shape: (usize, usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        FrequencyPerturbation {
            p: Array5::from_shape_fn(shape, |_| rng.sample(StandardNormal)),
        }
    }

    pub fn zeros(shape: (usize, usize, usize, usize, usize)) -> Self {
        FrequencyPerturbation {
            p: Array5::zeros(shape),
        }
    }
}

/// Hadamard-weighted coefficient delta, projected per block onto the l2 ball
/// of radius `eps_f`.
pub fn weighted_delta(w: &WeightMatrix, p: &FrequencyPerturbation, eps_f: Real) -> Array5<Real> {
    let (c, by, bx, k, _) = p.p.dim();
    let mut delta = Array5::zeros((c, by, bx, k, k));
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                let mut norm_sq = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let d = w.w[[ci, u, v]] * p.p[[ci, b0, b1, u, v]];
                        delta[[ci, b0, b1, u, v]] = d;
                        norm_sq += d * d;
                    }
                }
                let norm = norm_sq.sqrt();
                if norm > eps_f {
                    let scale = eps_f / norm;
                    for u in 0..k {
                        for v in 0..k {
                            delta[[ci, b0, b1, u, v]] *= scale;
                        }
                    }
                }
            }
        }
    }
    delta
}

/// `A(x) = D(x) + W ⊙ P`, with the applied delta projected per block.
pub fn adjust(
    f: &FrequencyBlockSet,
    w: &WeightMatrix,
    p: &FrequencyPerturbation,
    eps_f: Real,
) -> FrequencyBlockSet {
    let delta = weighted_delta(w, p, eps_f);
    FrequencyBlockSet {
        coeffs: &f.coeffs + &delta,
        block: f.block,
        source_shape: f.source_shape,
    }
}

/// Sign-gradient ascent step on the perturbation. `sign(0) = 0`.
pub fn fpl_step(
    p: &FrequencyPerturbation,
    grad_p: &Array5<Real>,
    lambda: Real,
) -> FrequencyPerturbation {
    let mut out = p.p.clone();
    out.zip_mut_with(grad_p, |pv, &gv| {
        *pv += lambda * sign(gv);
    });
    FrequencyPerturbation { p: out }
}

pub(crate) fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Frequency attack settings.
#[derive(Clone, Debug)]
pub struct FrequencyAttackConfig {
    /// Sign-step size on the perturbation.
    pub lambda: Real,
    /// Per-block l2 budget on the applied coefficient delta.
    pub eps_f: Real,
    /// Spatial l-infinity budget around the original image.
    pub eta: Real,
    pub block: usize,
    pub steps: usize,
    /// Radial exponent of the weight matrix.
    pub w_alpha: Real,
    /// Energy exponent of the weight matrix.
    pub w_beta: Real,
}

impl Default for FrequencyAttackConfig {
    fn default() -> Self {
        FrequencyAttackConfig {
            lambda: 0.1,
            eps_f: 2.0,
            eta: 12.0 / 255.0,
            block: DEFAULT_BLOCK,
            steps: 9,
            w_alpha: 1.0,
            w_beta: 1.0,
        }
    }
}

impl FrequencyAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(Error::Config("fpl lambda must be > 0".into()));
        }
        if self.eps_f <= 0.0 {
            return Err(Error::Config("fpl eps_f must be > 0".into()));
        }
        if !(0.0 < self.eta && self.eta < 1.0) {
            return Err(Error::Config("eta must lie in (0,1)".into()));
        }
        if self.block == 0 {
            return Err(Error::Config("block size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clamp `x` into the l-infinity ball of radius `eta` around `x_clean`,
/// then into `[0,1]`.
pub fn project_spatial(x: &Array3<Real>, x_clean: &Array3<Real>, eta: Real) -> Array3<Real> {
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(x_clean).for_each(|v, &c| {
        *v = v.clamp(c - eta, c + eta).clamp(0.0, 1.0);
    });
    out
}

/// Evolving state of a frequency attack.
#[derive(Clone, Debug)]
pub struct FplState {
    pub perturbation: FrequencyPerturbation,
}

impl FplState {
    /// Fresh `N(0,1)` perturbation for an image of the given shape.
    pub fn init(shape: (usize, usize, usize), block: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (c, h, w) = shape;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::Argument(format!(
                "image {h}x{w} not divisible into {block}x{block} blocks"
            )));
        }
        Ok(FplState {
            perturbation: FrequencyPerturbation::init(
                (c, h / block, w / block, block, block),
                rng,
            ),
        })
    }
}

/// Construct the adversarial candidate for the current perturbation:
/// DCT, recompute W, adjust, IDCT, spatial clamp, `[0,1]` clamp, mask filter.
pub fn fpl_construct(
    x_adv: &Array3<Real>,
    x_clean: &Array3<Real>,
    state: &FplState,
    cfg: &FrequencyAttackConfig,
    mask: Option<&BinaryMask>,
) -> Result<(Array3<Real>, WeightMatrix)> {
    let f = dct_image(x_adv, cfg.block)?;
    let w = energy_weight_matrix(&f, cfg.w_alpha, cfg.w_beta);
    let adjusted = adjust(&f, &w, &state.perturbation, cfg.eps_f);
    let x_cand = idct_image(&adjusted);
    let x_cand = project_spatial(&x_cand, x_clean, cfg.eta);
    let x_new = crate::localization::filter_delta(x_clean, &x_cand, mask);
    Ok((x_new, w))
}

/// One frequency-attack iteration: construct the candidate with the current
/// perturbation, measure the conditional loss there, and update the
/// perturbation by the sign of its gradient. Returns the new adversarial
/// image and the loss at it.
pub fn fpl_iteration(
    params: &ModelParams,
    x_adv: &Array3<Real>,
    x_clean: &Array3<Real>,
    state: &mut FplState,
    cond: &PromptCondition,
    cfg: &FrequencyAttackConfig,
    mask: Option<&BinaryMask>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<Real>, Real)> {
    cfg.validate()?;
    let (x_new, w) = fpl_construct(x_adv, x_clean, state, cfg, mask)?;

    // Loss and image gradient at the constructed point (frozen t/eps drawn
    // from the attack rng; projections are treated as pass-through).
    let bs = 1usize;
    let ts: Vec<usize> = (0..bs)
        .map(|_| rng.random_range(1..=params.schedule.t_max()))
        .collect();
    let [lc, lh, lw] = params.arch.latent_shape();
    let eps = ArrayD::from_shape_fn(IxDyn(&[bs, lc, lh, lw]), |_| {
        rng.sample::<Real, _>(StandardNormal)
    });
    let (loss, g_img) = cond_loss_image_grad(params, &x_new, cond, &ts, &eps)?;
    let g_img = match mask {
        Some(m) => m.apply_to(&g_img),
        None => g_img,
    };

    // Chain through the linear IDCT: the adjoint of the blockwise inverse
    // transform is the blockwise forward transform.
    let g_freq = dct_image(&g_img, cfg.block)?;
    let mut grad_p = g_freq.coeffs;
    let (c, by, bx, k, _) = grad_p.dim();
    for ci in 0..c {
        for b0 in 0..by {
            for b1 in 0..bx {
                for u in 0..k {
                    for v in 0..k {
                        grad_p[[ci, b0, b1, u, v]] *= w.w[[ci, u, v]];
                    }
                }
            }
        }
    }
    if grad_p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite frequency gradient during fpl iteration".into(),
        ));
    }
    state.perturbation = fpl_step(&state.perturbation, &grad_p, cfg.lambda);
    Ok((x_new, loss))
}

/// Conditional loss at an image plus its gradient w.r.t. the image, with
/// frozen `(t, eps)`.
pub fn cond_loss_image_grad(
    params: &ModelParams,
    x: &Array3<Real>,
    cond: &PromptCondition,
    ts: &[usize],
    eps: &ArrayD<Real>,
) -> Result<(Real, Array3<Real>)> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &params.tensors);
    let xv = tape.leaf(x.clone().insert_axis(Axis(0)).into_dyn());
    let z0 = encode_var(&binder, &params.arch, xv);
    let loss = cond_loss_frozen_var(&binder, &params.arch, &params.schedule, z0, cond, ts, eps);
    let l = loss.scalar_value();
    if !l.is_finite() {
        return Err(Error::Numeric(format!("non-finite attack loss {l}")));
    }
    let grads = backward(loss);
    let g = grads
        .wrt_or_zeros(xv)
        .index_axis_move(Axis(0), 0)
        .into_dimensionality()
        .expect("image rank");
    Ok((l, g))
}

/// Standalone frequency attack: `cfg.steps` iterations from the clean image.
pub fn fpl_attack(
    x_clean: &ImageTensor,
    surrogate: &ModelParams,
    cond: &PromptCondition,
    cfg: &FrequencyAttackConfig,
    mask: Option<&BinaryMask>,
    seed: u64,
) -> Result<ImageTensor> {
    use rand::SeedableRng;
    cfg.validate()?;
    let clean = x_clean.data().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = FplState::init(clean.dim(), cfg.block, &mut rng)?;
    let mut x_adv = clean.clone();
    for _ in 0..cfg.steps {
        let (x_new, _loss) =
            fpl_iteration(surrogate, &x_adv, &clean, &mut state, cond, cfg, mask, &mut rng)?;
        x_adv = x_new;
    }
    ImageTensor::new(x_adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct O(K^4) evaluation of the forward transform definition.
    fn dct2_direct(block: &Array2<Real>) -> Array2<Real> {
        let k = block.nrows();
        let mut out = Array2::zeros((k, k));
        for u in 0..k {
            for v in 0..k {
                let cu = if u == 0 {
                    (1.0 / k as Real).sqrt()
                } else {
                    (2.0 / k as Real).sqrt()
                };
                let cv = if v == 0 {
                    (1.0 / k as Real).sqrt()
                } else {
                    (2.0 / k as Real).sqrt()
                };
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let g = ((2 * i + 1) as Real * u as Real * std::f64::consts::PI
                            / (2 * k) as Real)
                            .cos()
                            * ((2 * j + 1) as Real * v as Real * std::f64::consts::PI
                                / (2 * k) as Real)
                                .cos();
                        acc += block[[i, j]] * g;
                    }
                }
                out[[u, v]] = cu * cv * acc;
            }
        }
        out
    }

    fn rand_block(k: usize, seed: u64) -> Array2<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, k), |_| rng.random::<Real>() * 2.0 - 1.0)
    }

    #[test]
    fn dct_matches_direct_summation() {
        for seed in 0..20 {
            let b = rand_block(8, seed);
            let fast = dct2(&b);
            let direct = dct2_direct(&b);
            let err = (&fast - &direct)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-9, "dct mismatch {err}");
        }
    }

    #[test]
    fn dct_constant_block_dc_only() {
        let v = 0.37;
        let b = Array2::from_elem((8, 8), v);
        let d = dct2(&b);
        assert!((d[[0, 0]] - 8.0 * v).abs() < 1e-12);
        for u in 0..8 {
            for w in 0..8 {
                if (u, w) != (0, 0) {
                    assert!(d[[u, w]].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dct_roundtrip_and_parseval() {
        for seed in 0..50 {
            let b = rand_block(8, 100 + seed);
            let d = dct2(&b);
            let r = idct2(&d);
            let err = (&r - &b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-6);
            let eb: Real = b.iter().map(|v| v * v).sum();
            let ed: Real = d.iter().map(|v| v * v).sum();
            assert!((eb - ed).abs() / eb.max(1e-12) <= 1e-6, "parseval violated");
        }
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        // transforming each standard-basis block yields an orthonormal family
        let k = 8;
        let mut gram = Array2::<Real>::zeros((k * k, k * k));
        let mut images = Vec::new();
        for i in 0..k {
            for j in 0..k {
                let mut e = Array2::<Real>::zeros((k, k));
                e[[i, j]] = 1.0;
                images.push(dct2(&e));
            }
        }
        for a in 0..k * k {
            for b in 0..k * k {
                gram[[a, b]] = images[a].iter().zip(images[b].iter()).map(|(x, y)| x * y).sum();
            }
        }
        for a in 0..k * k {
            for b in 0..k * k {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((gram[[a, b]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn split_merge_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<Real>());
        let blocks = split_blocks(&x, 8).unwrap();
        assert_eq!(blocks.dim(), (3, 8, 8, 8, 8));
        let back = merge_blocks(&blocks);
        assert!(x.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // degenerate single block
        let y = Array3::from_shape_fn((1, 8, 8), |_| rng.random::<Real>());
        let yb = split_blocks(&y, 8).unwrap();
        assert_eq!(yb.dim(), (1, 1, 1, 8, 8));
        let yback = merge_blocks(&yb);
        assert!(y.iter().zip(yback.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // non-divisible shape
        assert!(split_blocks(&Array3::zeros((3, 60, 64)), 8).is_err());
    }

    #[test]
    fn weight_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<Real>());
        let f = dct_image(&x, 8).unwrap();
        let w = energy_weight_matrix(&f, 1.0, 1.0);
        for c in 0..3 {
            assert_eq!(w.w[[c, 0, 0]], 0.0, "DC weight must vanish for alpha>0");
            let max = w.w.index_axis(Axis(0), c).iter().cloned().fold(0.0, Real::max);
            assert!((max - 1.0).abs() < 1e-12, "max weight should normalize to 1");
        }
        // beta = 0: depends only on u+v
        let w0 = energy_weight_matrix(&f, 1.0, 0.0);
        for c in 0..3 {
            for u in 0..8 {
                for v in 0..8 {
                    let expect = (u + v) as Real / 14.0;
                    assert!((w0.w[[c, u, v]] - expect).abs() < 1e-12);
                }
            }
        }
        // all-zero coefficients: pure radial term
        let zero = dct_image(&Array3::zeros((1, 8, 8)), 8).unwrap();
        let wz = energy_weight_matrix(&zero, 1.0, 1.0);
        for u in 0..8 {
            for v in 0..8 {
                let expect = (u + v) as Real / 14.0;
                assert!((wz.w[[0, u, v]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn low_pass_image_weights_favor_high_frequencies() {
        // smooth gradient image: energy concentrated at DC
        let x = Array3::from_shape_fn((1, 64, 64), |(_, i, j)| {
            0.5 + 0.4 * ((i as Real) / 64.0) + 0.05 * ((j as Real) / 64.0)
        });
        let f = dct_image(&x, 8).unwrap();
        let w = energy_weight_matrix(&f, 1.0, 1.0);
        let mut hi = (0.0, 0usize);
        let mut lo = (0.0, 0usize);
        for u in 0..8 {
            for v in 0..8 {
                if u + v > 7 {
                    hi = (hi.0 + w.w[[0, u, v]], hi.1 + 1);
                } else if u + v < 7 {
                    lo = (lo.0 + w.w[[0, u, v]], lo.1 + 1);
                }
            }
        }
        assert!(
            hi.0 / hi.1 as Real > lo.0 / lo.1 as Real,
            "high-frequency mean weight should exceed low-frequency mean"
        );
    }

    #[test]
    fn adjust_identity_and_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array3::from_shape_fn((2, 16, 16), |_| rng.random::<Real>());
        let f = dct_image(&x, 8).unwrap();
        let w = energy_weight_matrix(&f, 1.0, 1.0);
        // P = 0 -> unchanged
        let p0 = FrequencyPerturbation::zeros((2, 2, 2, 8, 8));
        let adj = adjust(&f, &w, &p0, 2.0);
        assert_eq!(adj.coeffs, f.coeffs);
        // W = 0 -> unchanged regardless of P
        let wz = WeightMatrix {
            w: Array3::zeros((2, 8, 8)),
        };
        let p = FrequencyPerturbation::init((2, 2, 2, 8, 8), &mut rng);
        let adj = adjust(&f, &wz, &p, 2.0);
        assert_eq!(adj.coeffs, f.coeffs);
        // projection bounds the applied delta
        let eps_f = 0.5;
        let adj = adjust(&f, &w, &p, eps_f);
        let delta = &adj.coeffs - &f.coeffs;
        for c in 0..2 {
            for b0 in 0..2 {
                for b1 in 0..2 {
                    let n: Real = delta
                        .slice(ndarray::s![c, b0, b1, .., ..])
                        .iter()
                        .map(|v| v * v)
                        .sum::<Real>()
                        .sqrt();
                    assert!(n <= eps_f + 1e-9, "block norm {n} above budget");
                }
            }
        }
    }

    #[test]
    fn fpl_step_moves_by_lambda_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = FrequencyPerturbation::init((1, 1, 1, 8, 8), &mut rng);
        let mut grad = Array5::from_shape_fn((1, 1, 1, 8, 8), |_| rng.random::<Real>() - 0.5);
        grad[[0, 0, 0, 3, 3]] = 0.0;
        let next = fpl_step(&p, &grad, 0.1);
        for ((idx, &a), &b) in p.p.indexed_iter().zip(next.p.iter()) {
            let d = b - a;
            if idx == (0, 0, 0, 3, 3) {
                assert_eq!(d, 0.0);
            } else {
                assert!((d.abs() - 0.1).abs() < 1e-15);
            }
        }
        // zero gradient leaves P unchanged
        let same = fpl_step(&p, &Array5::zeros((1, 1, 1, 8, 8)), 0.1);
        assert_eq!(same.p, p.p);
    }
}
