//! Toy subject classifier: a small conv net with a cosine-similarity head
//! over normalized embeddings. Serves as the identity-similarity and
//! detection-failure oracle for generated images.

use crate::error::{Error, Result};
use crate::ldm::{stack_images, ImageTensor};
use crate::nn::{self, Binder, ParamSet};
use crate::tensor::{backward, Real, Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Logit scale of the cosine head.
const COSINE_SCALE: Real = 10.0;

/// Trained classifier state. Class `n_subjects` is the "no subject present"
/// background class.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub n_subjects: usize,
    pub emb_dim: usize,
    pub width: usize,
    pub tensors: ParamSet,
    pub trained: bool,
}

impl ClassifierParams {
    pub fn init(n_subjects: usize, seed: u64) -> Self {
        let width = 32;
        let emb_dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamSet::new();
        let mut conv = |t: &mut ParamSet, name: &str, o: usize, i: usize| {
            t.insert(format!("{name}.w"), nn::init_weight(&[o, i, 3, 3], &mut rng));
            t.insert(format!("{name}.b"), nn::zeros(&[o]));
        };
        conv(&mut tensors, "cls.c1", 16, 3);
        conv(&mut tensors, "cls.c2", width, 16);
        conv(&mut tensors, "cls.c3", width, width);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        tensors.insert("cls.emb.w", nn::init_weight(&[width, emb_dim], &mut rng2));
        tensors.insert("cls.emb.b", nn::zeros(&[emb_dim]));
        tensors.insert(
            "cls.head",
            nn::init_weight(&[n_subjects + 1, emb_dim], &mut rng2),
        );
        ClassifierParams {
            n_subjects,
            emb_dim,
            width,
            tensors,
            trained: false,
        }
    }

    fn check_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State(
                "classifier has not been trained; call train_subject_classifier first".into(),
            ));
        }
        Ok(())
    }

    /// Normalized embeddings `[B, emb_dim]` of a batch of images.
    pub fn embed(&self, images: &[ImageTensor]) -> Array2<Real> {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let x = tape.constant(stack_images(images));
        let e = embed_var(&binder, x);
        normalize_rows(
            &e.value()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("embedding rank"),
        )
    }

    /// Softmax class probabilities `[B, n_subjects + 1]`.
    pub fn probabilities(&self, images: &[ImageTensor]) -> Array2<Real> {
        let tape = Tape::new();
        let binder = Binder::frozen(&tape, &self.tensors);
        let x = tape.constant(stack_images(images));
        let logits = logits_var(&binder, x);
        logits
            .softmax()
            .value()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logits rank")
    }

    /// Cosine similarity between an image's embedding and the mean embedding
    /// of the subject's clean references.
    pub fn ism_toy(&self, x_gen: &ImageTensor, subject_refs: &[ImageTensor]) -> Result<Real> {
        self.check_trained()?;
        if subject_refs.is_empty() {
            return Err(Error::Argument("ism needs at least one reference".into()));
        }
        let e = self.embed(std::slice::from_ref(x_gen));
        let refs = self.embed(subject_refs);
        let mut mean = Array1::<Real>::zeros(self.emb_dim);
        for r in refs.rows() {
            mean += &r;
        }
        mean /= subject_refs.len() as Real;
        Ok(cosine(&e.row(0).to_owned(), &mean))
    }

    /// Detection failure: 1 when no subject class reaches probability 0.5.
    pub fn dfr_toy(&self, x_gen: &ImageTensor) -> Result<u8> {
        self.check_trained()?;
        Ok(if self.max_subject_prob(x_gen)? < 0.5 { 1 } else { 0 })
    }

    /// Highest subject-class probability (the background class is excluded).
    pub fn max_subject_prob(&self, x: &ImageTensor) -> Result<Real> {
        self.check_trained()?;
        let p = self.probabilities(std::slice::from_ref(x));
        Ok((0..self.n_subjects)
            .map(|c| p[[0, c]])
            .fold(0.0_f64, Real::max))
    }

    /// Most probable subject class.
    pub fn predict_subject(&self, x: &ImageTensor) -> Result<usize> {
        self.check_trained()?;
        let p = self.probabilities(std::slice::from_ref(x));
        let mut best = 0;
        for c in 1..self.n_subjects + 1 {
            if p[[0, c]] > p[[0, best]] {
                best = c;
            }
        }
        Ok(best)
    }
}

pub fn cosine(a: &Array1<Real>, b: &Array1<Real>) -> Real {
    let na = a.dot(a).sqrt().max(1e-12);
    let nb = b.dot(b).sqrt().max(1e-12);
    a.dot(b) / (na * nb)
}

fn normalize_rows(m: &Array2<Real>) -> Array2<Real> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn embed_var<'t>(b: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
    let h = nn::conv2d(b, "cls.c1", x, 2, 1).silu();
    let h = nn::conv2d(b, "cls.c2", h, 2, 1).silu();
    let h = nn::conv2d(b, "cls.c3", h, 2, 1).silu();
    // global average pool
    let shape = h.shape();
    let (bs, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    let pooled = h
        .reshape(&[bs, c, hh * ww])
        .sum_axes_keep(&[2])
        .scale(1.0 / (hh * ww) as Real)
        .reshape(&[bs, c]);
    nn::linear(b, "cls.emb", pooled)
}

fn logits_var<'t>(b: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
    let e = embed_var(b, x);
    // cosine head: scaled inner product of normalized embedding and
    // normalized class weights
    let e_norm = e
        .sqr()
        .sum_axes_keep(&[1])
        .add_scalar(1e-12)
        .sqrt();
    let e_hat = e.div(e_norm);
    let wt = b.var("cls.head"); // [classes, emb]
    let w_norm = wt.sqr().sum_axes_keep(&[1]).add_scalar(1e-12).sqrt();
    let w_hat = wt.div(w_norm);
    e_hat.matmul(w_hat.permute(&[1, 0])).scale(COSINE_SCALE)
}

/// Train the classifier on labeled images. Labels in `0..n_subjects` are
/// subjects; `n_subjects` is the background class.
pub fn train_subject_classifier(
    images: &[ImageTensor],
    labels: &[usize],
    n_subjects: usize,
    steps: usize,
    seed: u64,
) -> Result<ClassifierParams> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Argument(format!(
            "classifier training needs matching images/labels, got {}/{}",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > n_subjects) {
        return Err(Error::Argument(format!(
            "label {bad} exceeds background class {n_subjects}"
        )));
    }
    let mut clf = ClassifierParams::init(n_subjects, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "classifier"));
    let mut opt = nn::Adam::new(3e-3);
    let batch = 16.min(images.len());
    let n_classes = n_subjects + 1;
    for step in 0..steps {
        let picks: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..images.len()))
            .collect();
        let batch_images: Vec<ImageTensor> = picks.iter().map(|&i| images[i].clone()).collect();
        // light input noise for robustness
        let noisy: Vec<ImageTensor> = batch_images
            .iter()
            .map(|img| {
                let noise = ndarray::Array3::from_shape_fn(img.data().dim(), |_| {
                    (rng.random::<Real>() - 0.5) * 0.04
                });
                ImageTensor::from_clamped(img.data() + &noise)
            })
            .collect();
        let (loss_val, named) = {
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &clf.tensors);
            let x = tape.constant(stack_images(&noisy));
            let logits = logits_var(&binder, x);
            // cross entropy via log-sum-exp
            let lse = logits.exp().sum_axes_keep(&[1]).ln();
            let mut onehot = Array2::<Real>::zeros((batch, n_classes));
            for (row, &i) in picks.iter().enumerate() {
                onehot[[row, labels[i]]] = 1.0;
            }
            let target = tape.constant(onehot.into_dyn());
            let picked = logits.mul(target).sum_axes_keep(&[1]);
            let loss = lse.sub(picked).mean_all();
            let l = loss.scalar_value();
            let grads = backward(loss);
            (l, binder.grads(&grads))
        };
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "classifier loss diverged at step {step}"
            )));
        }
        opt.step(&mut clf.tensors, &named);
    }
    clf.trained = true;
    Ok(clf)
}

/// Persist a trained classifier.
pub fn save_classifier(path: &std::path::Path, clf: &ClassifierParams) -> Result<()> {
    crate::checkpoint::save_tensors(
        path,
        &clf.tensors,
        &[
            ("n_subjects".to_string(), clf.n_subjects as u64),
            ("emb_dim".to_string(), clf.emb_dim as u64),
            ("width".to_string(), clf.width as u64),
            ("trained".to_string(), clf.trained as u64),
        ],
    )
}

/// Load a trained classifier.
pub fn load_classifier(path: &std::path::Path) -> Result<ClassifierParams> {
    let (tensors, meta) = crate::checkpoint::load_tensors(path)?;
    let get = |key: &str| -> Result<u64> {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("classifier checkpoint missing {key}")))
    };
    Ok(ClassifierParams {
        n_subjects: get("n_subjects")? as usize,
        emb_dim: get("emb_dim")? as usize,
        width: get("width")? as usize,
        tensors,
        trained: get("trained")? != 0,
    })
}

/// Build the standard classifier training set from a dataset: all subject
/// images plus procedural background and noise negatives.
pub fn classifier_training_set(
    spec: &crate::dataset::DatasetSpec,
    seed: u64,
) -> (Vec<ImageTensor>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for subject in 0..spec.n_subjects {
        for index in 0..spec.images_per_subject {
            let (img, _) = crate::dataset::render_subject_image(spec, seed, subject, index);
            images.push(img);
            labels.push(subject);
        }
    }
    let n_neg = spec.n_subjects * spec.images_per_subject / 2;
    for i in 0..n_neg {
        images.push(crate::dataset::render_background_image(spec, seed, i));
        labels.push(spec.n_subjects);
    }
    for i in 0..n_neg / 2 {
        images.push(crate::dataset::render_noise_image(spec, seed, i));
        labels.push(spec.n_subjects);
    }
    (images, labels)
}

/// Untrained-state marker helper for ArrayD conversions in callers.
pub fn batch_rows(a: &ArrayD<Real>) -> Vec<Array1<Real>> {
    (0..a.shape()[0])
        .map(|i| {
            a.index_axis(Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("row rank")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_classifier_is_a_state_error() {
        let clf = ClassifierParams::init(4, 1);
        let x = ImageTensor::zeros(3, 64, 64);
        assert!(matches!(clf.dfr_toy(&x), Err(Error::State(_))));
        assert!(matches!(
            clf.ism_toy(&x, &[ImageTensor::zeros(3, 64, 64)]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn cosine_is_symmetric() {
        let a = Array1::from_vec(vec![1.0, 2.0, -0.5]);
        let b = Array1::from_vec(vec![-0.3, 0.8, 1.1]);
        assert!((cosine(&a, &b) - cosine(&b, &a)).abs() < 1e-15);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_learns_tiny_task() {
        // two subjects, few steps: loss should fall and predictions should
        // separate the classes
        let spec = crate::dataset::DatasetSpec {
            n_subjects: 2,
            images_per_subject: 4,
            ..Default::default()
        };
        let (images, labels) = classifier_training_set(&spec, 11);
        let clf = train_subject_classifier(&images, &labels, 2, 120, 5).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for (img, &label) in images.iter().zip(labels.iter()) {
            if label < 2 {
                let pred = clf.predict_subject(img).unwrap();
                if pred == label {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert!(
            correct * 10 >= total * 8,
            "classifier should fit the toy set: {correct}/{total}"
        );
    }
}
