//! A miniature text-conditional latent diffusion model.
//!
//! Encoder and decoder are small conv stacks (deterministic, no variational
//! sampling); the denoiser is a two-resolution U-Net-like network with one
//! cross-attention block per resolution. Everything is expressed as tape
//! graphs so losses are differentiable w.r.t. both parameters and the input
//! image.

use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamSet};
use crate::prompt::{PromptCondition, Vocabulary};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

/// Architectural variant; the two versions differ in width only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVersion {
    VA,
    VB,
}

impl ModelVersion {
    pub fn base_width(self) -> usize {
        match self {
            ModelVersion::VA => 32,
            ModelVersion::VB => 48,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelVersion::VA => "vA",
            ModelVersion::VB => "vB",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "vA" => Ok(ModelVersion::VA),
            "vB" => Ok(ModelVersion::VB),
            other => Err(Error::Argument(format!(
                "unknown model version '{other}' (expected vA or vB)"
            ))),
        }
    }
}

/// Static shape configuration of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub version: ModelVersion,
    pub image_size: usize,
    pub in_channels: usize,
    pub latent_channels: usize,
    /// Channel width at the 16x16 resolution; doubled at 8x8.
    pub base_width: usize,
    pub token_dim: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
}

impl ArchConfig {
    pub fn new(version: ModelVersion, vocab_size: usize) -> Self {
        ArchConfig {
            version,
            image_size: 64,
            in_channels: 3,
            latent_channels: 4,
            base_width: version.base_width(),
            token_dim: 32,
            time_dim: 64,
            vocab_size,
        }
    }

    /// Spatial size of the latent grid (downsample factor 4).
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size(), self.latent_size()]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    /// Every parameter name and shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.base_width;
        let w2 = 2 * w;
        let half = w / 2;
        let (ic, lc) = (self.in_channels, self.latent_channels);
        let (td, tim) = (self.token_dim, self.time_dim);
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        fn conv(v: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize) {
            v.push((format!("{name}.w"), vec![o, i, 3, 3]));
            v.push((format!("{name}.b"), vec![o]));
        }
        fn lin(v: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize) {
            v.push((format!("{name}.w"), vec![i, o]));
            v.push((format!("{name}.b"), vec![o]));
        }
        fn gn(v: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize) {
            v.push((format!("{name}.g"), vec![c]));
            v.push((format!("{name}.bta"), vec![c]));
        }
        // encoder
        conv(&mut v, "enc.c1", half, ic);
        conv(&mut v, "enc.c2", w, half);
        conv(&mut v, "enc.c3", w, w);
        conv(&mut v, "enc.out", lc, w);
        // decoder
        conv(&mut v, "dec.in", w, lc);
        conv(&mut v, "dec.u1", w, w);
        conv(&mut v, "dec.u2", half, w);
        conv(&mut v, "dec.out", ic, half);
        // denoiser
        lin(&mut v, "den.temb1", 16, tim);
        lin(&mut v, "den.temb2", tim, tim);
        conv(&mut v, "den.in", w, lc);
        for (rname, ch) in [("den.r1", w), ("den.r2", w2), ("den.r3", w)] {
            gn(&mut v, &format!("{rname}.gn1"), ch);
            conv(&mut v, &format!("{rname}.c1"), ch, ch);
            lin(&mut v, &format!("{rname}.t"), tim, ch);
            gn(&mut v, &format!("{rname}.gn2"), ch);
            conv(&mut v, &format!("{rname}.c2"), ch, ch);
        }
        for (aname, ch) in [("den.a1", w), ("den.a2", w2)] {
            gn(&mut v, &format!("{aname}.gn"), ch);
            lin(&mut v, &format!("{aname}.q"), ch, ch);
            lin(&mut v, &format!("{aname}.k"), td, ch);
            lin(&mut v, &format!("{aname}.v"), td, ch);
            lin(&mut v, &format!("{aname}.o"), ch, ch);
        }
        conv(&mut v, "den.down", w2, w);
        conv(&mut v, "den.up", w, w2);
        gn(&mut v, "den.ogn", w);
        conv(&mut v, "den.out", lc, w);
        // token embeddings
        v.push(("tok.emb".to_string(), vec![self.vocab_size, td]));
        // fixed latent normalization constant, calibrated after
        // autoencoder training
        v.push(("latent_scale".to_string(), vec![1]));
        v
    }
}

/// An image as `[C,H,W]` values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<Real>,
}

impl ImageTensor {
    pub fn new(data: Array3<Real>) -> Result<Self> {
        for (idx, &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite image value {v} at {idx:?}"
                )));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!(
                    "image value {v} at {idx:?} outside [0,1]"
                )));
            }
        }
        Ok(ImageTensor { data })
    }

    /// Clamp arbitrary data into `[0,1]` and wrap it.
    pub fn from_clamped(data: Array3<Real>) -> Self {
        ImageTensor {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn data(&self) -> &Array3<Real> {
        &self.data
    }

    pub fn into_data(self) -> Array3<Real> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// A latent code `[C_z, H/4, W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub data: Array3<Real>,
}

impl LatentCode {
    pub fn new(data: Array3<Real>) -> Result<Self> {
        for (idx, &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite latent value {v} at {idx:?}"
                )));
            }
        }
        Ok(LatentCode { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// One recorded cross-attention map.
#[derive(Clone, Debug)]
pub struct AttnMap {
    pub layer: String,
    /// Spatial grid the queries came from.
    pub height: usize,
    pub width: usize,
    /// Probabilities `[B, H*W, n_tokens]`; rows sum to 1.
    pub probs: Array3<Real>,
}

type AttnRecorder<'r> = Option<&'r RefCell<Vec<AttnMap>>>;

/// All learnable state of the tiny LDM plus its schedule and vocabulary.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
    pub tensors: ParamSet,
}

impl ModelParams {
    /// Fresh random initialization.
    pub fn init(version: ModelVersion, vocab: Vocabulary, seed: u64) -> Self {
        use rand::SeedableRng;
        let arch = ArchConfig::new(version, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamSet::new();
        for (name, shape) in arch.param_shapes() {
            let t = if name.ends_with(".b") || name.ends_with(".bta") {
                nn::zeros(&shape)
            } else if name.ends_with(".g") || name == "latent_scale" {
                nn::ones(&shape)
            } else if name == "tok.emb" {
                nn::randn(&shape, 0.05, &mut rng)
            } else if name.ends_with(".c2.w") || name.ends_with(".o.w") || name == "den.out.w" {
                // residual-branch outputs start small so blocks begin near
                // identity and conditioning pathways train stably
                nn::init_weight(&shape, &mut rng).mapv_into(|v| v * 0.05)
            } else {
                nn::init_weight(&shape, &mut rng)
            };
            tensors.insert(name, t);
        }
        ModelParams {
            arch,
            schedule: NoiseSchedule::default_toy(),
            vocab,
            tensors,
        }
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        let (c, h, w) = x.shape();
        let [ec, eh, ew] = self.arch.image_shape();
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Config(format!(
                "image shape ({c},{h},{w}) does not match configured ({ec},{eh},{ew})"
            )));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &PromptCondition) -> Result<()> {
        for &id in &cond.token_ids {
            if id >= self.vocab.len() {
                return Err(Error::Argument(format!(
                    "token id {id} out of vocabulary bounds ({})",
                    self.vocab.len()
                )));
            }
        }
        Ok(())
    }

    /// Deterministic latent of an image (the encoder's mean output).
    pub fn encode(&self, x: &ImageTensor) -> Result<LatentCode> {
        self.check_image(x)?;
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let xv = tape.constant(stack_images(std::slice::from_ref(x)));
        let z = encode_var(&binder, &self.arch, xv);
        let data = z.value().index_axis_move(Axis(0), 0);
        LatentCode::new(data.into_dimensionality().expect("latent rank"))
    }

    /// Decode a latent back to image space; output lies in (0,1).
    pub fn decode(&self, z: &LatentCode) -> Result<ImageTensor> {
        let z = LatentCode::new(z.data.clone())?; // re-validate finiteness
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let zv = tape.constant(z.data.insert_axis(Axis(0)).into_dyn());
        let x = decode_var(&binder, &self.arch, zv);
        let data = x.value().index_axis_move(Axis(0), 0);
        ImageTensor::new(data.into_dimensionality().expect("image rank"))
    }

    /// Predicted noise for a noised latent at timestep `t`.
    pub fn predict_noise(
        &self,
        z_t: &LatentCode,
        t: usize,
        cond: &PromptCondition,
    ) -> Result<LatentCode> {
        Ok(self.predict_noise_with_maps(z_t, t, cond, false)?.0)
    }

    /// Predicted noise plus the cross-attention maps of every layer.
    pub fn predict_noise_with_maps(
        &self,
        z_t: &LatentCode,
        t: usize,
        cond: &PromptCondition,
        record: bool,
    ) -> Result<(LatentCode, Vec<AttnMap>)> {
        self.schedule.check_t(t)?;
        self.check_cond(cond)?;
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let zv = tape.constant(z_t.data.clone().insert_axis(Axis(0)).into_dyn());
        let maps = RefCell::new(Vec::new());
        let rec = if record { Some(&maps) } else { None };
        let eps = predict_noise_var(&binder, &self.arch, zv, &[t], cond, rec);
        let data = eps.value().index_axis_move(Axis(0), 0);
        let latent = LatentCode::new(data.into_dimensionality().expect("latent rank"))?;
        Ok((latent, maps.into_inner()))
    }

    /// Denoising training loss on a batch of clean latents. `t` and the noise
    /// target are drawn from `rng`, so a fixed seed gives a fixed value.
    pub fn cond_loss(
        &self,
        z0s: &[LatentCode],
        cond: &PromptCondition,
        rng: &mut ChaCha8Rng,
    ) -> Result<Real> {
        self.check_cond(cond)?;
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let z0 = tape.constant(stack_latents(z0s));
        let loss = cond_loss_var(&binder, &self.arch, &self.schedule, z0, cond, rng);
        Ok(loss.scalar_value())
    }
}

/// Stack images into a `[B,C,H,W]` batch array.
pub fn stack_images(images: &[ImageTensor]) -> ArrayD<Real> {
    let views: Vec<_> = images.iter().map(|i| i.data().view()).collect();
    ndarray::stack(Axis(0), &views).expect("stack images").into_dyn()
}

/// Stack latents into a `[B,C,H,W]` batch array.
pub fn stack_latents(zs: &[LatentCode]) -> ArrayD<Real> {
    let views: Vec<_> = zs.iter().map(|z| z.data.view()).collect();
    ndarray::stack(Axis(0), &views).expect("stack latents").into_dyn()
}

/// Forward-process marginal: `sqrt(abar_t) z0 + sqrt(1-abar_t) eps`.
pub fn add_noise(
    schedule: &NoiseSchedule,
    z0: &LatentCode,
    t: usize,
    eps: &Array3<Real>,
) -> Result<LatentCode> {
    schedule.check_t(t)?;
    if eps.dim() != z0.data.dim() {
        return Err(Error::Argument(format!(
            "noise shape {:?} does not match latent {:?}",
            eps.dim(),
            z0.data.dim()
        )));
    }
    let (a, b) = schedule.marginal_coeffs(t);
    LatentCode::new(&z0.data * a + eps * b)
}

/// Standard-normal array shaped like a latent.
pub fn sample_noise_like(z: &LatentCode, rng: &mut ChaCha8Rng) -> Array3<Real> {
    let dim = z.data.raw_dim();
    Array3::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Encoder graph: `[B,3,H,W] -> [B,4,H/4,W/4]`.
pub fn encode_var<'t>(b: &Binder<'t, '_>, arch: &ArchConfig, x: Var<'t>) -> Var<'t> {
    encode_stages_var(b, arch, x).0
}

/// Encoder graph that also exposes the intermediate stage activations
/// (used as the feature net of the perceptual distance).
pub fn encode_stages_var<'t>(
    b: &Binder<'t, '_>,
    arch: &ArchConfig,
    x: Var<'t>,
) -> (Var<'t>, Vec<Var<'t>>) {
    let _ = arch;
    let s1 = nn::conv2d(b, "enc.c1", x, 1, 1).silu();
    let s2 = nn::conv2d(b, "enc.c2", s1, 2, 1).silu();
    let s3 = nn::conv2d(b, "enc.c3", s2, 2, 1).silu();
    let raw = nn::conv2d(b, "enc.out", s3, 1, 1);
    let z = raw.div(b.var("latent_scale").reshape(&[1, 1, 1, 1]));
    (z, vec![s1, s2, s3, z])
}

/// Decoder graph: `[B,4,H/4,W/4] -> [B,3,H,W]`, sigmoid-bounded to (0,1).
pub fn decode_var<'t>(b: &Binder<'t, '_>, arch: &ArchConfig, z: Var<'t>) -> Var<'t> {
    let _ = arch;
    let z = z.mul(b.var("latent_scale").reshape(&[1, 1, 1, 1]));
    let h = nn::conv2d(b, "dec.in", z, 1, 1).silu();
    let h = nn::conv2d(b, "dec.u1", h.upsample2x(), 1, 1).silu();
    let h = nn::conv2d(b, "dec.u2", h.upsample2x(), 1, 1).silu();
    nn::conv2d(b, "dec.out", h, 1, 1).sigmoid()
}

/// Sinusoidal features of integer timesteps, `[B,16]`.
fn time_features(ts: &[usize]) -> Array2<Real> {
    let half = 8;
    let mut out = Array2::zeros((ts.len(), 2 * half));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (10_000.0_f64).powf(-(k as Real) / half as Real);
            out[[i, k]] = (t as Real * freq).sin();
            out[[i, half + k]] = (t as Real * freq).cos();
        }
    }
    out
}

fn res_block<'t>(b: &Binder<'t, '_>, name: &str, x: Var<'t>, temb: Var<'t>) -> Var<'t> {
    let ch = x.shape()[1];
    let h = nn::conv2d(b, &format!("{name}.c1"), nn::group_norm(b, &format!("{name}.gn1"), x, 8).silu(), 1, 1);
    let tproj = nn::linear(b, &format!("{name}.t"), temb.silu());
    let bsz = tproj.shape()[0];
    let h = h.add(tproj.reshape(&[bsz, ch, 1, 1]));
    let h = nn::conv2d(b, &format!("{name}.c2"), nn::group_norm(b, &format!("{name}.gn2"), h, 8).silu(), 1, 1);
    x.add(h)
}

fn cross_attention<'t>(
    b: &Binder<'t, '_>,
    name: &str,
    x: Var<'t>,
    cond: &PromptCondition,
    rec: AttnRecorder<'_>,
) -> Var<'t> {
    let shape = x.shape();
    let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n_tok = cond.token_ids.len();
    let hn = nn::group_norm(b, &format!("{name}.gn"), x, 8);
    let q = nn::linear(
        b,
        &format!("{name}.q"),
        hn.permute(&[0, 2, 3, 1]).reshape(&[bs * h * w, c]),
    );
    let table = b.var("tok.emb");
    let tok = table.gather_rows(&cond.token_ids);
    let k = nn::linear(b, &format!("{name}.k"), tok);
    let v = nn::linear(b, &format!("{name}.v"), tok);
    let scale = 1.0 / (c as Real).sqrt();
    let scores = q.matmul(k.permute(&[1, 0])).scale(scale);
    let probs = scores.softmax();
    if let Some(rec) = rec {
        let p = probs
            .value()
            .into_shape_with_order(IxDyn(&[bs, h * w, n_tok]))
            .expect("attn map shape")
            .into_dimensionality()
            .expect("attn map rank");
        rec.borrow_mut().push(AttnMap {
            layer: name.to_string(),
            height: h,
            width: w,
            probs: p,
        });
    }
    let out = nn::linear(b, &format!("{name}.o"), probs.matmul(v));
    let out = out.reshape(&[bs, h, w, c]).permute(&[0, 3, 1, 2]);
    x.add(out)
}

/// Denoiser graph: predicted noise for a batch of noised latents.
///
/// `ts` gives the integer timestep per batch element. Cross-attention maps
/// are appended to `rec` when provided.
pub fn predict_noise_var<'t>(
    b: &Binder<'t, '_>,
    arch: &ArchConfig,
    z_t: Var<'t>,
    ts: &[usize],
    cond: &PromptCondition,
    rec: AttnRecorder<'_>,
) -> Var<'t> {
    let _ = arch;
    let tape = b.tape();
    let feats = tape.constant(time_features(ts).into_dyn());
    let temb = nn::linear(b, "den.temb2", nn::linear(b, "den.temb1", feats).silu());

    let h0 = nn::conv2d(b, "den.in", z_t, 1, 1);
    let h1 = res_block(b, "den.r1", h0, temb);
    let h1 = cross_attention(b, "den.a1", h1, cond, rec);
    let h2 = nn::conv2d(b, "den.down", h1.silu(), 2, 1);
    let h2 = res_block(b, "den.r2", h2, temb);
    let h2 = cross_attention(b, "den.a2", h2, cond, rec);
    let h3 = nn::conv2d(b, "den.up", h2.upsample2x(), 1, 1);
    let h3 = h3.add(h1);
    let h3 = res_block(b, "den.r3", h3, temb);
    nn::conv2d(b, "den.out", nn::group_norm(b, "den.ogn", h3, 8).silu(), 1, 1)
}

/// Training loss graph with sampled `(t, eps)`.
pub fn cond_loss_var<'t>(
    b: &Binder<'t, '_>,
    arch: &ArchConfig,
    schedule: &NoiseSchedule,
    z0: Var<'t>,
    cond: &PromptCondition,
    rng: &mut ChaCha8Rng,
) -> Var<'t> {
    let shape = z0.shape();
    let bs = shape[0];
    let ts: Vec<usize> = (0..bs)
        .map(|_| rng.random_range(1..=schedule.t_max()))
        .collect();
    let eps = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.sample::<Real, _>(StandardNormal));
    cond_loss_frozen_var(b, arch, schedule, z0, cond, &ts, &eps)
}

/// Like [`cond_loss_frozen_var`] but with per-sample loss weights
/// proportional to `1/SNR(t)` (capped), which emphasizes the high-noise
/// steps where prompt conditioning carries the signal. Used only for base
/// training; the reported conditional loss is always the unweighted one.
pub fn weighted_cond_loss_var<'t>(
    b: &Binder<'t, '_>,
    arch: &ArchConfig,
    schedule: &NoiseSchedule,
    z0: Var<'t>,
    cond: &PromptCondition,
    ts: &[usize],
    eps: &ArrayD<Real>,
    weight_cap: Real,
) -> Var<'t> {
    let shape = z0.shape();
    let bs = shape[0];
    assert_eq!(ts.len(), bs);
    let tape = b.tape();
    let mut a = ArrayD::zeros(IxDyn(&[bs, 1, 1, 1]));
    let mut s = ArrayD::zeros(IxDyn(&[bs, 1, 1, 1]));
    let mut w = ArrayD::zeros(IxDyn(&[bs, 1, 1, 1]));
    let mut wsum = 0.0;
    for (i, &t) in ts.iter().enumerate() {
        let (ca, cs) = schedule.marginal_coeffs(t);
        a[[i, 0, 0, 0]] = ca;
        s[[i, 0, 0, 0]] = cs;
        let ab = schedule.alpha_bar(t);
        let wi = ((1.0 - ab) / ab).min(weight_cap);
        w[[i, 0, 0, 0]] = wi;
        wsum += wi;
    }
    let scale = bs as Real / wsum;
    w.mapv_inplace(|v| v * scale);
    let eps_c = tape.constant(eps.clone());
    let z_t = z0.mul(tape.constant(a)).add(eps_c.mul(tape.constant(s)));
    let pred = predict_noise_var(b, arch, z_t, ts, cond, None);
    eps_c.sub(pred).sqr().mul(tape.constant(w)).mean_all()
}

/// Training loss graph with caller-supplied `(t, eps)` — the deterministic
/// variant used by gradient checks and attack losses.
pub fn cond_loss_frozen_var<'t>(
    b: &Binder<'t, '_>,
    arch: &ArchConfig,
    schedule: &NoiseSchedule,
    z0: Var<'t>,
    cond: &PromptCondition,
    ts: &[usize],
    eps: &ArrayD<Real>,
) -> Var<'t> {
    let shape = z0.shape();
    let bs = shape[0];
    assert_eq!(ts.len(), bs, "one timestep per batch element");
    let tape = b.tape();
    let mut a = ArrayD::zeros(IxDyn(&[bs, 1, 1, 1]));
    let mut s = ArrayD::zeros(IxDyn(&[bs, 1, 1, 1]));
    for (i, &t) in ts.iter().enumerate() {
        let (ca, cs) = schedule.marginal_coeffs(t);
        a[[i, 0, 0, 0]] = ca;
        s[[i, 0, 0, 0]] = cs;
    }
    let eps_c = tape.constant(eps.clone());
    let z_t = z0.mul(tape.constant(a)).add(eps_c.mul(tape.constant(s)));
    let pred = predict_noise_var(b, arch, z_t, ts, cond, None);
    eps_c.sub(pred).sqr().mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_model() -> ModelParams {
        ModelParams::init(ModelVersion::VA, Vocabulary::default_toy(8), 42)
    }

    fn toy_cond(m: &ModelParams) -> PromptCondition {
        crate::prompt::subject_prompt(&m.vocab, 0).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = toy_model();
        let x = ImageTensor::zeros(3, 64, 64);
        let z1 = m.encode(&x).unwrap();
        let z2 = m.encode(&x).unwrap();
        assert_eq!(z1.shape(), (4, 16, 16));
        assert!(z1.data.iter().all(|v| v.is_finite()));
        assert!(z1
            .data
            .iter()
            .zip(z2.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let m = toy_model();
        let x = ImageTensor::zeros(3, 32, 32);
        assert!(matches!(m.encode(&x), Err(Error::Config(_))));
    }

    #[test]
    fn decode_outputs_in_unit_range_and_deterministic() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentCode::new(Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<Real, _>(StandardNormal)
        }))
        .unwrap();
        let x1 = m.decode(&z).unwrap();
        let x2 = m.decode(&z).unwrap();
        assert!(x1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(x1
            .data()
            .iter()
            .zip(x2.data().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn decode_rejects_non_finite() {
        let m = toy_model();
        let mut data = Array3::zeros((4, 16, 16));
        data[[1, 2, 3]] = Real::NAN;
        let z = LatentCode { data };
        let err = m.decode(&z).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("(1, 2, 3)"), "message should carry index: {msg}");
    }

    #[test]
    fn add_noise_limits() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = LatentCode::new(Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<Real, _>(StandardNormal)
        }))
        .unwrap();
        let eps = sample_noise_like(&z0, &mut rng);
        // t=1: alpha_bar ~ 1 -> nearly z0
        let z1 = add_noise(&m.schedule, &z0, 1, &eps).unwrap();
        let max_dev = (&z1.data - &z0.data)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_dev < 0.2, "t=1 should barely change the latent: {max_dev}");
        // exact algebraic identity at arbitrary t
        let t = 57;
        let (a, b) = m.schedule.marginal_coeffs(t);
        let zt = add_noise(&m.schedule, &z0, t, &eps).unwrap();
        let expect = &z0.data * a + &eps * b;
        assert!(zt
            .data
            .iter()
            .zip(expect.iter())
            .all(|(x, y)| (x - y).abs() == 0.0));
        // out of range
        assert!(add_noise(&m.schedule, &z0, 0, &eps).is_err());
        assert!(add_noise(&m.schedule, &z0, 101, &eps).is_err());
    }

    #[test]
    fn add_noise_terminal_is_approximately_standard_normal() {
        // z_T over many draws should be statistically close to N(0,1): the
        // residual signal is bounded by sqrt(alpha_bar_T), which the default
        // schedule keeps tiny.
        let m = toy_model();
        let t_max = m.schedule.t_max();
        let ab = m.schedule.alpha_bar(t_max);
        assert!(ab < 0.01, "terminal alpha_bar should be near zero, got {ab}");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = LatentCode::new(Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<Real, _>(StandardNormal)
        }))
        .unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let eps = sample_noise_like(&z0, &mut rng);
            let zt = add_noise(&m.schedule, &z0, t_max, &eps).unwrap();
            for &v in zt.data.iter() {
                sum += v;
                sumsq += v * v;
                count += 1;
            }
        }
        // over 10^4+ pooled draws: mean within 3 sigma plus the residual
        // signal bound, variance within 5% of 1
        let mean = sum / count as Real;
        let var = sumsq / count as Real - mean * mean;
        let z0_mean = z0.data.mean().unwrap().abs();
        let bound = 3.0 / (count as Real).sqrt() + ab.sqrt() * z0_mean;
        assert!(mean.abs() <= bound, "mean {mean} exceeds bound {bound}");
        assert!((var - 1.0).abs() < 0.05, "variance {var} not ~1");
    }

    #[test]
    fn forward_marginal_variance_monte_carlo() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = LatentCode::new(Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<Real, _>(StandardNormal) * 1.5
        }))
        .unwrap();
        let var_z0 = {
            let mean = z0.data.mean().unwrap();
            z0.data.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()
        };
        for &t in &[10usize, 50, 90] {
            let ab = m.schedule.alpha_bar(t);
            let mut acc = 0.0;
            let mut accsq = 0.0;
            let mut count = 0usize;
            for _ in 0..50 {
                let eps = sample_noise_like(&z0, &mut rng);
                let zt = add_noise(&m.schedule, &z0, t, &eps).unwrap();
                for &v in zt.data.iter() {
                    acc += v;
                    accsq += v * v;
                    count += 1;
                }
            }
            let mean = acc / count as Real;
            let var = accsq / count as Real - mean * mean;
            let expect = ab * var_z0 + (1.0 - ab);
            assert!(
                (var - expect).abs() / expect < 0.05,
                "t={t}: var {var} vs expected {expect}"
            );
        }
    }

    #[test]
    fn predict_noise_shape_and_attention_rows() {
        let m = toy_model();
        let cond = toy_cond(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentCode::new(Array3::from_shape_fn((4, 16, 16), |_| {
            rng.sample::<Real, _>(StandardNormal)
        }))
        .unwrap();
        let (eps, maps) = m.predict_noise_with_maps(&z, 50, &cond, true).unwrap();
        assert_eq!(eps.shape(), (4, 16, 16));
        assert_eq!(maps.len(), 2);
        for map in &maps {
            assert_eq!(map.probs.shape()[2], cond.token_ids.len());
            for b in 0..map.probs.shape()[0] {
                for r in 0..map.probs.shape()[1] {
                    let s: Real = (0..map.probs.shape()[2])
                        .map(|c| map.probs[[b, r, c]])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn cond_loss_nonnegative_and_seed_deterministic() {
        let m = toy_model();
        let cond = toy_cond(&m);
        let x = ImageTensor::zeros(3, 64, 64);
        let z = m.encode(&x).unwrap();
        let l1 = m
            .cond_loss(&[z.clone()], &cond, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let l2 = m
            .cond_loss(&[z], &cond, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert!(l1 >= 0.0);
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn image_grad_matches_finite_differences() {
        // d cond_loss / d image through the encoder, frozen (t, eps)
        let m = toy_model();
        let cond = toy_cond(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<Real>());
        let ts = vec![40usize];
        let eps = ArrayD::from_shape_fn(IxDyn(&[1, 4, 16, 16]), |_| {
            rng.sample::<Real, _>(StandardNormal)
        });

        let eval = |data: &Array3<Real>| -> Real {
            let tape = Tape::new();
            let binder = Binder::frozen(&tape, &m.tensors);
            let xv = tape.constant(data.clone().insert_axis(Axis(0)).into_dyn());
            let z0 = encode_var(&binder, &m.arch, xv);
            cond_loss_frozen_var(&binder, &m.arch, &m.schedule, z0, &cond, &ts, &eps)
                .scalar_value()
        };

        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &m.tensors);
        let xv = tape.leaf(x0.clone().insert_axis(Axis(0)).into_dyn());
        let z0 = encode_var(&binder, &m.arch, xv);
        let loss = cond_loss_frozen_var(&binder, &m.arch, &m.schedule, z0, &cond, &ts, &eps);
        let grads = crate::tensor::backward(loss);
        let g = grads.wrt_or_zeros(xv);

        let mut rng2 = ChaCha8Rng::seed_from_u64(12);
        let step = 1e-3;
        for _ in 0..10 {
            let c = rng2.random_range(0..3);
            let i = rng2.random_range(0..64);
            let j = rng2.random_range(0..64);
            let mut xp = x0.clone();
            xp[[c, i, j]] += step;
            let mut xm = x0.clone();
            xm[[c, i, j]] -= step;
            let num = (eval(&xp) - eval(&xm)) / (2.0 * step);
            let ana = g[[0, c, i, j]];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom <= 1e-3,
                "grad mismatch at ({c},{i},{j}): numeric {num} analytic {ana}"
            );
        }
    }
}
