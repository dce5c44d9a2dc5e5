//! `ddap` — dataset generation, base training, personalization, protection,
//! and evaluation runs, bound together by a reproducible run config.
//!
//! Exit codes: 0 success, 1 usage/config, 2 I/O, 3 numeric failure.

use clap::{Parser, Subcommand};
use ddap_core::checkpoint::{load_model, save_model, CheckpointKind};
use ddap_core::classifier::{load_classifier, save_classifier, ClassifierParams};
use ddap_core::config::RunConfig;
use ddap_core::dataset::{self, Manifest};
use ddap_core::ddpl::{run_aspl, AttackMode, ProgressRecord, RunHooks};
use ddap_core::error::{Error, Result};
use ddap_core::imageio;
use ddap_core::ldm::{ImageTensor, ModelVersion};
use ddap_core::metrics::{budget_audit, render_table, EvalReport};
use ddap_core::personalization::finetune;
use ddap_core::pipeline::{classifier_for_spec, evaluate_run, train_base_version, EvalSettings};
use ddap_core::prompt::identifier_prompt;
use rand::SeedableRng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ddap", version, about = "Dual-domain anti-personalization toolkit")]
struct Cli {
    /// Run config file (flat key = value lines). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset root; falls back to $DDAP_DATA_DIR, then ./data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Emit JSON-lines progress records on stdout.
    #[arg(long, global = true)]
    progress: bool,

    /// Set a dotted config key, e.g. --set ddpl.epochs=10 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural subject dataset.
    GenData {
        /// Output directory (defaults to the dataset root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tiny base model from the dataset spec.
    TrainBase {
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Architecture variant: vA or vB.
        #[arg(long)]
        model_version: Option<String>,
    },
    /// Fine-tune a personalized model from an image folder and prompt.
    Personalize {
        /// Base checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Folder of PNG images.
        #[arg(long)]
        images: PathBuf,
        /// Fine-tune prompt; must contain one identifier token.
        #[arg(long)]
        prompt: Option<String>,
        /// Fine-tune steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Fine-tuned checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft protected versions of one subject's protect split.
    Protect {
        /// Base checkpoint used to run the attack.
        #[arg(long)]
        model: PathBuf,
        /// Subject index.
        #[arg(long)]
        subject: usize,
        /// Output directory for protected PNGs and the progress log.
        #[arg(long)]
        out: PathBuf,
        /// Attack composition: spl | fpl | ddap.
        #[arg(long)]
        attack: Option<String>,
        /// Localization mask: on | off.
        #[arg(long)]
        mask: Option<String>,
        /// Mask threshold.
        #[arg(long)]
        tau: Option<f64>,
        /// l-infinity budget.
        #[arg(long)]
        eta: Option<f64>,
        /// Protection epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a fresh model on given images and score the outcome.
    Evaluate {
        /// Base checkpoint for the evaluation fine-tune.
        #[arg(long)]
        model: PathBuf,
        /// Folder of PNGs to fine-tune on (protected or clean).
        #[arg(long)]
        images: PathBuf,
        /// Subject index (for clean references).
        #[arg(long)]
        subject: usize,
        /// Row label in reports.
        #[arg(long)]
        label: Option<String>,
        /// Report output path (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Evaluation prompt identifier override (sks / t@t).
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Merge evaluation reports into a text table.
    Report {
        /// Report JSON files.
        inputs: Vec<PathBuf>,
        /// Optional path for the rendered table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn data_dir(cli: &Cli) -> PathBuf {
    cli.data
        .clone()
        .or_else(dataset::data_dir_from_env)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for ov in &cli.overrides {
        let (k, v) = ov.split_once('=').ok_or_else(|| {
            Error::Argument(format!("--set expects key=value, got '{ov}'"))
        })?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn require_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(Error::Argument(format!(
            "no dataset manifest at {path:?}; run `ddap gen-data` first"
        )));
    }
    Manifest::load(&path)
}

fn load_folder_images(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Argument(format!("no PNG images in {dir:?}")));
    }
    files
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default();
            imageio::load_png(&p).map(|img| (name, img))
        })
        .collect()
}

/// Classifier cache: train once per (spec, steps, seed) and reuse.
fn classifier_cached(cfg: &RunConfig, data: &Path) -> Result<ClassifierParams> {
    let tag = format!(
        "classifier_s{}_n{}_t{}.ckpt",
        cfg.seed, cfg.dataset.n_subjects, cfg.classifier_steps
    );
    let path = data.join(tag);
    if path.exists() {
        return load_classifier(&path);
    }
    let clf = classifier_for_spec(&cfg.dataset, cfg.classifier_steps, cfg.seed)?;
    save_classifier(&path, &clf)?;
    Ok(clf)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let data = data_dir(&cli);
    match &cli.cmd {
        Cmd::GenData { out } => {
            let dir = out.clone().unwrap_or_else(|| data.clone());
            let manifest = dataset::generate_dataset(&cfg.dataset, cfg.seed, &dir)?;
            println!(
                "wrote {} images for {} subjects to {}",
                manifest.entries.len(),
                cfg.dataset.n_subjects,
                dir.display()
            );
            Ok(())
        }
        Cmd::TrainBase { out, model_version } => {
            let version = match model_version.as_deref() {
                Some(tag) => ModelVersion::from_tag(tag)?,
                None => cfg.train.version,
            };
            let (model, curve) = train_base_version(&cfg.dataset, &cfg.train, version, cfg.seed)?;
            save_model(out, &model, CheckpointKind::BaseModel)?;
            let curve_path = out.with_extension("curve.json");
            std::fs::write(&curve_path, serde_json::to_string_pretty(&curve)?)?;
            println!(
                "trained {} base model: recon {:.2} dB, holdout loss {:.4} -> {}",
                version.tag(),
                curve.recon_psnr_db,
                curve.holdout_cond_loss,
                out.display()
            );
            Ok(())
        }
        Cmd::Personalize {
            model,
            images,
            prompt,
            steps,
            out,
        } => {
            let (mut params, _) = load_model(model)?;
            let named = load_folder_images(images)?;
            let imgs: Vec<ImageTensor> = named.into_iter().map(|(_, i)| i).collect();
            let mut ft = cfg.finetune_config();
            if let Some(p) = prompt {
                ft.prompt = p.clone();
            }
            let steps = steps.unwrap_or(cfg.eval_finetune_steps);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ddap_core::seeds::derive(
                cfg.seed,
                "personalize",
            ));
            let curve = finetune(&mut params, &imgs, &ft, steps, &mut rng)?;
            save_model(out, &params, CheckpointKind::Personalized)?;
            println!(
                "personalized over {} steps (loss {:.4} -> {:.4}) -> {}",
                steps,
                curve.first().copied().unwrap_or(0.0),
                curve.last().copied().unwrap_or(0.0),
                out.display()
            );
            Ok(())
        }
        Cmd::Protect {
            model,
            subject,
            out,
            attack,
            mask,
            tau,
            eta,
            epochs,
        } => {
            let mut cfg = cfg.clone();
            if let Some(a) = attack {
                cfg.attack = AttackMode::parse(a)?;
            }
            if let Some(m) = mask {
                cfg.use_mask = match m.as_str() {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(Error::Argument(format!(
                            "--mask expects on|off, got '{other}'"
                        )))
                    }
                };
            }
            if let Some(t) = tau {
                cfg.tau = *t;
            }
            if let Some(e) = eta {
                cfg.ddpl.eta = *e;
            }
            if let Some(e) = epochs {
                cfg.ddpl.epochs = *e;
            }
            protect_cmd(&cli, &cfg, &data, model, *subject, out)
        }
        Cmd::Evaluate {
            model,
            images,
            subject,
            label,
            out,
            prompt,
        } => {
            let mut cfg = cfg.clone();
            if let Some(p) = prompt {
                cfg.eval_identifier = p.clone();
            }
            evaluate_cmd(&cfg, &data, model, images, *subject, label.as_deref(), out)
        }
        Cmd::Report { inputs, out } => {
            if inputs.is_empty() {
                return Err(Error::Argument("report needs at least one input".into()));
            }
            let mut reports = Vec::new();
            for p in inputs {
                let text = std::fs::read_to_string(p)?;
                reports.push(serde_json::from_str::<EvalReport>(&text)?);
            }
            let table = render_table(&reports);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(path, table)?;
            }
            Ok(())
        }
    }
}

fn protect_cmd(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    model: &Path,
    subject: usize,
    out: &Path,
) -> Result<()> {
    let manifest = require_manifest(data)?;
    if subject >= manifest.spec.n_subjects {
        return Err(Error::Argument(format!(
            "subject {subject} out of range 0..{}",
            manifest.spec.n_subjects
        )));
    }
    let (base, _) = load_model(model)?;
    let protect_entries = manifest.protect_split(subject);
    let clean = dataset::load_entries(data, &protect_entries)?;
    let cond = identifier_prompt(&base.vocab, &cfg.train_identifier)?;
    let opts = cfg.protect_options();

    std::fs::create_dir_all(out)?;
    let mut progress_file = std::fs::File::create(out.join("progress.jsonl"))?;
    let emit_stdout = cli.progress;
    let mut progress = |rec: &ProgressRecord| {
        use std::io::Write;
        let line = serde_json::to_string(rec).expect("progress serializes");
        if emit_stdout {
            println!("{line}");
        }
        let _ = writeln!(progress_file, "{line}");
    };
    let mut hooks = RunHooks {
        progress: Some(&mut progress),
        audit: None,
    };
    let run_seed = ddap_core::seeds::derive(cfg.seed, &format!("protect/{subject}"));
    let protected = run_aspl(&clean, &base, &cond, &opts, run_seed, &mut hooks)?;

    // quantize to the stored 8-bit grid, re-verify the budget, then persist
    for (entry, adv) in protect_entries.iter().zip(protected.iter()) {
        let q = imageio::quantize(adv);
        let clean_img = imageio::load_png(&data.join(&entry.file))?;
        let audit = budget_audit(&clean_img, &q, cfg.ddpl.eta)?;
        if !audit.pass {
            return Err(Error::Numeric(format!(
                "post-quantization budget violation on {}: {:.6} > {:.6}",
                entry.file, audit.max_abs_delta, cfg.ddpl.eta
            )));
        }
        imageio::save_png(&q, &out.join(&entry.file))?;
    }
    cfg.save(&out.join("run_config.txt"))?;
    std::fs::write(out.join("config_hash.txt"), cfg.hash())?;
    println!(
        "protected {} images of subject {subject} -> {} (config {})",
        protected.len(),
        out.display(),
        cfg.hash()
    );
    Ok(())
}

fn evaluate_cmd(
    cfg: &RunConfig,
    data: &Path,
    model: &Path,
    images: &Path,
    subject: usize,
    label: Option<&str>,
    out: &Path,
) -> Result<()> {
    let manifest = require_manifest(data)?;
    let (eval_base, _) = load_model(model)?;
    let named = load_folder_images(images)?;
    let finetune_images: Vec<ImageTensor> = named.iter().map(|(_, i)| i.clone()).collect();

    // clean counterparts: match by file name against the dataset; fall back
    // to the protect split when names do not line up.
    let mut counterparts = Vec::new();
    for (name, img) in &named {
        match manifest.entries.iter().find(|e| &e.file == name) {
            Some(e) => counterparts.push(imageio::load_png(&data.join(&e.file))?),
            None => counterparts.push(img.clone()),
        }
    }
    let refs = dataset::load_entries(data, &manifest.reference_split(subject))?;
    let clf = classifier_cached(cfg, data)?;
    let label = label
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("s{subject}"));
    let settings = EvalSettings {
        run_label: label,
        ..EvalSettings::from_run_config(cfg, "run")
    };
    // the perceptual reference is the protect-version base model when
    // available next to the eval model; otherwise the eval base itself
    let report = evaluate_run(
        &eval_base,
        &eval_base,
        &clf,
        &finetune_images,
        &counterparts,
        &refs,
        &settings,
    )?;
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "evaluated {} images of subject {subject}: psnr_in {:.2} ism {:.3} dfr {:.2} -> {}",
        finetune_images.len(),
        report.psnr_in,
        report.ism_toy,
        report.dfr_toy,
        out.display()
    );
    Ok(())
}
