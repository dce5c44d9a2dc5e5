//! Procedural toy-subject dataset: each subject is a distinctly colored and
//! textured sprite composited over a varying background, with the subject
//! region recorded per image as ground truth for localization checks.

use crate::error::{Error, Result};
use crate::imageio;
use crate::ldm::ImageTensor;
use crate::seeds;
use crate::tensor::Real;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Placement ranges for the sprite, as fractions of the image size.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Placement {
    pub cx: (Real, Real),
    pub cy: (Real, Real),
    pub scale: (Real, Real),
}

impl Default for Placement {
    fn default() -> Self {
        Placement {
            cx: (0.40, 0.60),
            cy: (0.40, 0.60),
            scale: (0.30, 0.42),
        }
    }
}

/// Procedural generator parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub image_size: usize,
    pub placement: Placement,
    /// Amplitude of per-image background variation.
    pub background_amp: Real,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_subjects: 8,
            images_per_subject: 8,
            image_size: 64,
            placement: Placement::default(),
            background_amp: 0.25,
        }
    }
}

/// Inclusive-exclusive pixel bounds `[x0, y0, x1, y1)` of the subject.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: usize,
    pub index: usize,
    pub file: String,
    pub region: Region,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries_for(&self, subject: usize) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.subject == subject).collect()
    }

    /// First half of a subject's images: the clean reference split.
    pub fn reference_split(&self, subject: usize) -> Vec<&ManifestEntry> {
        let all = self.entries_for(subject);
        let half = all.len() / 2;
        all.into_iter().take(half).collect()
    }

    /// Second half: the images to protect.
    pub fn protect_split(&self, subject: usize) -> Vec<&ManifestEntry> {
        let all = self.entries_for(subject);
        let half = all.len() / 2;
        all.into_iter().skip(half).collect()
    }
}

fn hsv_to_rgb(h: Real, s: Real, v: Real) -> [Real; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-subject appearance derived deterministically from the dataset seed.
struct SubjectRecipe {
    shape: usize,
    hue: Real,
    texture_freq: Real,
    texture_angle: Real,
}

impl SubjectRecipe {
    fn derive(seed: u64, subject: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("subject/{subject}")));
        SubjectRecipe {
            shape: subject % 8,
            // uniformly spaced hues keep every subject pair far apart
            hue: (subject as Real) / 8.0 + 0.02 + rng.random::<Real>() * 0.015,
            texture_freq: 5.0 + rng.random::<Real>() * 6.0,
            texture_angle: rng.random::<Real>() * std::f64::consts::PI,
        }
    }
}

/// Signed distance to the subject silhouette, negative inside. `p` is in
/// sprite-local coordinates with unit nominal radius.
fn shape_sdf(kind: usize, px: Real, py: Real) -> Real {
    let (ax, ay) = (px.abs(), py.abs());
    let r = (px * px + py * py).sqrt();
    match kind {
        0 => r - 1.0,                                   // circle
        1 => ax.max(ay) - 0.85,                         // square
        2 => ax + ay - 1.15,                            // diamond
        3 => {
            // upward triangle
            let d1 = py - 0.75;
            let d2 = 0.95 * px - 0.55 * py - 0.62;
            let d3 = -0.95 * px - 0.55 * py - 0.62;
            d1.max(d2).max(d3)
        }
        4 => (r - 0.72).abs() - 0.30,                   // ring
        5 => (ax - 0.95).max(ay - 0.38).min((ax - 0.38).max(ay - 0.95)), // cross
        6 => {
            // hexagon
            let k = 0.866_025;
            (k * ax + 0.5 * ay).max(ay) - 0.85
        }
        _ => (px * px / 1.2 + py * py * 1.6).sqrt() - 0.9, // ellipse
    }
}

/// Render one subject image with its ground-truth region.
pub fn render_subject_image(
    spec: &DatasetSpec,
    seed: u64,
    subject: usize,
    index: usize,
) -> (ImageTensor, Region) {
    let recipe = SubjectRecipe::derive(seed, subject);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        seed,
        &format!("image/{subject}/{index}"),
    ));
    let n = spec.image_size;
    let mut data = render_background(spec, &mut rng);

    let cx = lerp(spec.placement.cx, rng.random::<Real>()) * n as Real;
    let cy = lerp(spec.placement.cy, rng.random::<Real>()) * n as Real;
    let radius = lerp(spec.placement.scale, rng.random::<Real>()) * n as Real;
    let phase = rng.random::<Real>() * std::f64::consts::TAU;
    let hue = recipe.hue + (rng.random::<Real>() - 0.5) * 0.03;
    let base = hsv_to_rgb(hue, 0.85, 0.9);
    let edge = 1.5 / radius;

    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            let px = (j as Real - cx) / radius;
            let py = (i as Real - cy) / radius;
            let sd = shape_sdf(recipe.shape, px, py);
            let alpha = (0.5 - sd / edge).clamp(0.0, 1.0) * 0.999;
            if alpha > 0.0 {
                let tex = 0.82
                    + 0.18
                        * (recipe.texture_freq
                            * (px * recipe.texture_angle.cos() + py * recipe.texture_angle.sin())
                            + phase)
                            .sin();
                for c in 0..3 {
                    let s = (base[c] * tex).clamp(0.0, 1.0);
                    data[[c, i, j]] = data[[c, i, j]] * (1.0 - alpha) + s * alpha;
                }
                if alpha > 0.5 {
                    x0 = x0.min(j);
                    y0 = y0.min(i);
                    x1 = x1.max(j + 1);
                    y1 = y1.max(i + 1);
                }
            }
        }
    }
    let region = Region { x0, y0, x1, y1 };
    (ImageTensor::from_clamped(data), region)
}

/// Render a subject-free background image (classifier negatives).
pub fn render_background_image(spec: &DatasetSpec, seed: u64, index: usize) -> ImageTensor {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("background/{index}")));
    ImageTensor::from_clamped(render_background(spec, &mut rng))
}

/// Uniform-noise image (out-of-distribution probe for the classifier).
pub fn render_noise_image(spec: &DatasetSpec, seed: u64, index: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("noise/{index}")));
    let n = spec.image_size;
    ImageTensor::from_clamped(Array3::from_shape_fn((3, n, n), |_| rng.random::<Real>()))
}

fn render_background(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Array3<Real> {
    let n = spec.image_size;
    let hue = rng.random::<Real>();
    let base = hsv_to_rgb(hue, 0.15, 0.45 + rng.random::<Real>() * 0.2);
    let amp = spec.background_amp;
    let dir = rng.random::<Real>() * std::f64::consts::TAU;
    let (gx, gy) = (dir.cos(), dir.sin());
    let grain = 0.015;
    let mut data = Array3::zeros((3, n, n));
    for i in 0..n {
        for j in 0..n {
            let t = (j as Real / n as Real - 0.5) * gx + (i as Real / n as Real - 0.5) * gy;
            let noise = (rng.random::<Real>() - 0.5) * grain;
            for c in 0..3 {
                data[[c, i, j]] = (base[c] + amp * t + noise).clamp(0.0, 1.0);
            }
        }
    }
    data
}

fn lerp(range: (Real, Real), t: Real) -> Real {
    range.0 + (range.1 - range.0) * t
}

/// Generate the dataset on disk: PNG files plus `manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{out_dir:?}: {e}"))))?;
    let mut entries = Vec::new();
    for subject in 0..spec.n_subjects {
        for index in 0..spec.images_per_subject {
            let (img, region) = render_subject_image(spec, seed, subject, index);
            let file = format!("s{subject}_{index:02}.png");
            imageio::save_png(&imageio::quantize(&img), &out_dir.join(&file))?;
            if region.is_empty() {
                return Err(Error::State(format!(
                    "generator produced empty subject region for s{subject}/{index}"
                )));
            }
            entries.push(ManifestEntry {
                subject,
                index,
                file,
                region,
            });
        }
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load the images of manifest entries, in order.
pub fn load_entries(dir: &Path, entries: &[&ManifestEntry]) -> Result<Vec<ImageTensor>> {
    entries
        .iter()
        .map(|e| imageio::load_png(&dir.join(&e.file)))
        .collect()
}

/// Dataset root passed via environment, `DDAP_DATA_DIR`.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("DDAP_DATA_DIR").map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_seed_deterministic() {
        let spec = DatasetSpec {
            n_subjects: 2,
            images_per_subject: 2,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&spec, 42, d1.path()).unwrap();
        let m2 = generate_dataset(&spec, 42, d2.path()).unwrap();
        assert_eq!(m1.entries.len(), 4);
        for (a, b) in m1.entries.iter().zip(m2.entries.iter()) {
            assert_eq!(a.region, b.region);
            let ba = std::fs::read(d1.path().join(&a.file)).unwrap();
            let bb = std::fs::read(d2.path().join(&b.file)).unwrap();
            assert_eq!(ba, bb, "png bytes must be identical across runs");
        }
        // a different seed changes the images
        let d3 = tempfile::tempdir().unwrap();
        let m3 = generate_dataset(&spec, 43, d3.path()).unwrap();
        let ba = std::fs::read(d1.path().join(&m1.entries[0].file)).unwrap();
        let bc = std::fs::read(d3.path().join(&m3.entries[0].file)).unwrap();
        assert_ne!(ba, bc);
    }

    #[test]
    fn regions_nonempty_and_within_bounds() {
        let spec = DatasetSpec::default();
        for subject in 0..spec.n_subjects {
            for index in 0..2 {
                let (img, region) = render_subject_image(&spec, 7, subject, index);
                assert!(!region.is_empty(), "s{subject}/{index}");
                assert!(region.x1 <= spec.image_size && region.y1 <= spec.image_size);
                let (c, h, w) = img.shape();
                assert_eq!((c, h, w), (3, 64, 64));
            }
        }
    }

    #[test]
    fn splits_partition_the_subject() {
        let spec = DatasetSpec {
            n_subjects: 1,
            images_per_subject: 8,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&spec, 1, dir.path()).unwrap();
        let refs = m.reference_split(0);
        let prot = m.protect_split(0);
        assert_eq!(refs.len(), 4);
        assert_eq!(prot.len(), 4);
        let all: std::collections::HashSet<usize> =
            refs.iter().chain(prot.iter()).map(|e| e.index).collect();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn subjects_are_visually_distinct() {
        let spec = DatasetSpec::default();
        // mean color inside the region differs clearly between two subjects
        let (img_a, reg_a) = render_subject_image(&spec, 3, 0, 0);
        let (img_b, reg_b) = render_subject_image(&spec, 3, 1, 0);
        let mean_in = |img: &ImageTensor, r: &Region| -> [Real; 3] {
            let mut acc = [0.0; 3];
            let mut count = 0.0;
            for i in r.y0..r.y1 {
                for j in r.x0..r.x1 {
                    for c in 0..3 {
                        acc[c] += img.data()[[c, i, j]];
                    }
                    count += 1.0;
                }
            }
            [acc[0] / count, acc[1] / count, acc[2] / count]
        };
        let ma = mean_in(&img_a, &reg_a);
        let mb = mean_in(&img_b, &reg_b);
        let dist: Real = ma
            .iter()
            .zip(mb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<Real>()
            .sqrt();
        assert!(dist > 0.15, "subject colors too close: {dist}");
    }
}
