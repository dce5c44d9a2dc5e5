//! Python bindings for the anti-personalization toolkit: the tiny LDM, the
//! dual-domain protection loop, the blockwise DCT, and the quality metrics.

use ddap_core::checkpoint::{load_model, save_model, CheckpointKind};
use ddap_core::config::RunConfig;
use ddap_core::dataset::{generate_dataset, DatasetSpec};
use ddap_core::ddpl::{run_aspl, AttackMode, RunHooks};
use ddap_core::fpl;
use ddap_core::ldm::{ImageTensor, LatentCode, ModelParams, ModelVersion};
use ddap_core::metrics;
use ddap_core::personalization::{finetune, FinetuneConfig};
use ddap_core::prompt::{identifier_prompt, PromptCondition, Vocabulary};
use ddap_core::sampler;
use ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn to_py_err(e: ddap_core::Error) -> PyErr {
    use ddap_core::Error as E;
    match e {
        E::Argument(_) | E::Config(_) | E::State(_) => PyValueError::new_err(e.to_string()),
        E::Io(_) | E::Image(_) | E::Json(_) => PyIOError::new_err(e.to_string()),
        E::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_from_array(a: PyReadonlyArray3<'_, f64>) -> PyResult<ImageTensor> {
    let arr: Array3<f64> = a.as_array().to_owned();
    ImageTensor::new(arr).map_err(to_py_err)
}

/// The miniature text-conditional latent diffusion model.
#[pyclass]
struct TinyLdm {
    params: ModelParams,
}

#[pymethods]
impl TinyLdm {
    /// Fresh random model. `version` is "vA" or "vB".
    #[new]
    #[pyo3(signature = (version="vA", n_subjects=8, seed=0))]
    fn new(version: &str, n_subjects: usize, seed: u64) -> PyResult<Self> {
        let v = ModelVersion::from_tag(version).map_err(to_py_err)?;
        Ok(TinyLdm {
            params: ModelParams::init(v, Vocabulary::default_toy(n_subjects), seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, _) = load_model(&path).map_err(to_py_err)?;
        Ok(TinyLdm { params })
    }

    #[pyo3(signature = (path, personalized=false))]
    fn save(&self, path: PathBuf, personalized: bool) -> PyResult<()> {
        let kind = if personalized {
            CheckpointKind::Personalized
        } else {
            CheckpointKind::BaseModel
        };
        save_model(&path, &self.params, kind).map_err(to_py_err)
    }

    fn version(&self) -> String {
        self.params.arch.version.tag().to_string()
    }

    fn clone_model(&self) -> TinyLdm {
        TinyLdm {
            params: self.params.clone(),
        }
    }

    /// Deterministic latent of an image array `[3,H,W]` in `[0,1]`.
    fn encode<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let img = image_from_array(image)?;
        let z = self.params.encode(&img).map_err(to_py_err)?;
        Ok(z.data.into_pyarray(py))
    }

    /// Decode a latent `[4,h,w]` back to an image in `[0,1]`.
    fn decode<'py>(
        &self,
        py: Python<'py>,
        latent: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let z = LatentCode::new(latent.as_array().to_owned()).map_err(to_py_err)?;
        let x = self.params.decode(&z).map_err(to_py_err)?;
        Ok(x.into_data().into_pyarray(py))
    }

    /// Conditional denoising loss of an image batch under a prompt.
    fn cond_loss(&self, images: Vec<PyReadonlyArray3<'_, f64>>, prompt: &str, seed: u64) -> PyResult<f64> {
        let cond =
            PromptCondition::new(&self.params.vocab, prompt).map_err(to_py_err)?;
        let mut latents = Vec::new();
        for a in images {
            let img = image_from_array(a)?;
            latents.push(self.params.encode(&img).map_err(to_py_err)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params
            .cond_loss(&latents, &cond, &mut rng)
            .map_err(to_py_err)
    }

    /// Deterministic DDIM sample for a prompt.
    fn ddim_sample<'py>(
        &self,
        py: Python<'py>,
        prompt: &str,
        steps: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let cond =
            PromptCondition::new(&self.params.vocab, prompt).map_err(to_py_err)?;
        let img = sampler::ddim_sample(&self.params, &cond, steps, seed).map_err(to_py_err)?;
        Ok(img.into_data().into_pyarray(py))
    }

    /// DDIM inversion trajectory; returns `steps + 1` latents.
    fn ddim_invert<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        prompt: &str,
        steps: usize,
    ) -> PyResult<Vec<Bound<'py, PyArray3<f64>>>> {
        let img = image_from_array(image)?;
        let cond =
            PromptCondition::new(&self.params.vocab, prompt).map_err(to_py_err)?;
        let traj = sampler::ddim_invert(&self.params, &img, &cond, steps).map_err(to_py_err)?;
        Ok(traj.into_iter().map(|z| z.data.into_pyarray(py)).collect())
    }

    /// Personalization fine-tuning in place; returns the loss curve.
    #[pyo3(signature = (images, prompt="a photo of sks subject", steps=200, lr=1e-4, seed=0))]
    fn finetune(
        &mut self,
        images: Vec<PyReadonlyArray3<'_, f64>>,
        prompt: &str,
        steps: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let imgs: Vec<ImageTensor> = images
            .into_iter()
            .map(image_from_array)
            .collect::<PyResult<_>>()?;
        let cfg = FinetuneConfig {
            prompt: prompt.to_string(),
            lr,
            steps,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        finetune(&mut self.params, &imgs, &cfg, steps, &mut rng).map_err(to_py_err)
    }

    /// Dual-domain protection of an image set; returns protected arrays.
    #[pyo3(signature = (images, prompt="a photo of sks subject", epochs=50, attack="ddap",
                        use_mask=true, tau=0.35, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn protect<'py>(
        &self,
        py: Python<'py>,
        images: Vec<PyReadonlyArray3<'py, f64>>,
        prompt: &str,
        epochs: usize,
        attack: &str,
        use_mask: bool,
        tau: f64,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyArray3<f64>>>> {
        let imgs: Vec<ImageTensor> = images
            .into_iter()
            .map(image_from_array)
            .collect::<PyResult<_>>()?;
        let cond =
            PromptCondition::new(&self.params.vocab, prompt).map_err(to_py_err)?;
        let mut cfg = RunConfig::default();
        cfg.ddpl.epochs = epochs;
        cfg.attack = AttackMode::parse(attack).map_err(to_py_err)?;
        cfg.use_mask = use_mask;
        cfg.tau = tau;
        let opts = cfg.protect_options();
        let out = run_aspl(
            &imgs,
            &self.params,
            &cond,
            &opts,
            seed,
            &mut RunHooks::default(),
        )
        .map_err(to_py_err)?;
        Ok(out
            .into_iter()
            .map(|i| i.into_data().into_pyarray(py))
            .collect())
    }
}

/// Orthonormal 2-d DCT-II of a square block.
#[pyfunction]
fn dct2<'py>(py: Python<'py>, block: PyReadonlyArray2<'py, f64>) -> Bound<'py, PyArray2<f64>> {
    let b: Array2<f64> = block.as_array().to_owned();
    fpl::dct2(&b).into_pyarray(py)
}

/// Exact inverse of [`dct2`].
#[pyfunction]
fn idct2<'py>(py: Python<'py>, coeffs: PyReadonlyArray2<'py, f64>) -> Bound<'py, PyArray2<f64>> {
    let c: Array2<f64> = coeffs.as_array().to_owned();
    fpl::idct2(&c).into_pyarray(py)
}

/// PSNR in dB between two images, capped at 100.
#[pyfunction]
fn psnr(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    let ia = image_from_array(a)?;
    let ib = image_from_array(b)?;
    metrics::psnr(&ia, &ib).map_err(to_py_err)
}

/// Max l-infinity deviation and pass/fail against a budget.
#[pyfunction]
fn budget_audit(
    clean: PyReadonlyArray3<'_, f64>,
    adv: PyReadonlyArray3<'_, f64>,
    eta: f64,
) -> PyResult<(f64, bool)> {
    let ic = image_from_array(clean)?;
    let ia = image_from_array(adv)?;
    let rep = metrics::budget_audit(&ic, &ia, eta).map_err(to_py_err)?;
    Ok((rep.max_abs_delta, rep.pass))
}

/// Generate the procedural dataset on disk; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, n_subjects=8, images_per_subject=8))]
fn gen_dataset(
    out_dir: PathBuf,
    seed: u64,
    n_subjects: usize,
    images_per_subject: usize,
) -> PyResult<String> {
    let spec = DatasetSpec {
        n_subjects,
        images_per_subject,
        ..Default::default()
    };
    generate_dataset(&spec, seed, &out_dir).map_err(to_py_err)?;
    Ok(out_dir.join("manifest.json").to_string_lossy().to_string())
}

/// Rare-identifier prompt helper, e.g. `identifier_prompt_text("sks")`.
#[pyfunction]
fn identifier_prompt_text(identifier: &str) -> PyResult<String> {
    let vocab = Vocabulary::default_toy(8);
    identifier_prompt(&vocab, identifier)
        .map(|p| p.text)
        .map_err(to_py_err)
}

#[pymodule]
fn ddap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TinyLdm>()?;
    m.add_function(wrap_pyfunction!(dct2, m)?)?;
    m.add_function(wrap_pyfunction!(idct2, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(budget_audit, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(identifier_prompt_text, m)?)?;
    Ok(())
}
