//! End-to-end CLI flow at miniature scale: dataset, base training,
//! protection, evaluation, and report rendering through the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn ddap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddap"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ddap");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn full_tiny_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("base.ckpt");
    let protected = dir.path().join("protected");
    let report = dir.path().join("report.json");

    let tiny: Vec<String> = [
        "dataset.n_subjects=2",
        "dataset.images_per_subject=4",
        "train.ae_steps=40",
        "train.den_steps=40",
        "train.holdout_threshold=100.0",
        "ddpl.surrogate_steps=1",
        "ddpl.perturb_steps=2",
        "eval_finetune_steps=4",
        "eval_samples=2",
        "eval_ddim_steps=10",
        "classifier_steps=40",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect();

    run_ok(ddap()
        .args(["gen-data"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--seed", "3"])
        .args(&tiny));
    assert!(data.join("manifest.json").exists());
    assert_eq!(count_pngs(&data), 8);

    run_ok(ddap()
        .args(["train-base"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--seed", "3"])
        .args(["--out", model.to_str().unwrap()])
        .args(&tiny));
    assert!(model.exists());

    let out = run_ok(ddap()
        .args(["protect"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--seed", "3"])
        .args(["--model", model.to_str().unwrap()])
        .args(["--subject", "0"])
        .args(["--out", protected.to_str().unwrap()])
        .args(["--epochs", "1"])
        .args(["--mask", "off"])
        .args(["--attack", "ddap"])
        .arg("--progress")
        .args(&tiny));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.lines().any(|l| l.starts_with('{') && l.contains("\"epoch\"")),
        "expected JSONL progress on stdout: {stdout}"
    );
    assert_eq!(count_pngs(&protected), 2, "protect split of 4 images is 2");
    assert!(protected.join("progress.jsonl").exists());
    assert!(protected.join("run_config.txt").exists());

    // protected images stay within the 8-bit budget relative to the originals
    for entry in std::fs::read_dir(&protected).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().map(|e| e == "png").unwrap_or(false) {
            let adv = ddap_core::imageio::load_png(&p).unwrap();
            let clean =
                ddap_core::imageio::load_png(&data.join(p.file_name().unwrap())).unwrap();
            let audit =
                ddap_core::metrics::budget_audit(&clean, &adv, 12.0 / 255.0).unwrap();
            assert!(audit.pass, "{p:?}: {audit:?}");
            assert!(audit.max_abs_delta > 0.0);
        }
    }

    run_ok(ddap()
        .args(["evaluate"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--seed", "3"])
        .args(["--model", model.to_str().unwrap()])
        .args(["--images", protected.to_str().unwrap()])
        .args(["--subject", "0"])
        .args(["--label", "protected"])
        .args(["--out", report.to_str().unwrap()])
        .args(&tiny));
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(parsed["psnr_in"].as_f64().is_some());
    assert_eq!(parsed["samples"].as_array().unwrap().len(), 2);

    let out = run_ok(ddap().args(["report", report.to_str().unwrap()]));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("PSNR"), "table header: {table}");
    assert!(table.contains("protected"), "row label: {table}");
}

fn count_pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
                .count()
        })
        .unwrap_or(0)
}

#[test]
fn exit_codes() {
    // usage error -> 1
    let out = ddap().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // missing checkpoint -> 2 (I/O)
    let dir = tempfile::tempdir().unwrap();
    let out = ddap()
        .args(["personalize"])
        .args(["--model", dir.path().join("missing.ckpt").to_str().unwrap()])
        .args(["--images", dir.path().to_str().unwrap()])
        .args(["--out", dir.path().join("o.ckpt").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // bad flag value -> 1
    let out = ddap()
        .args(["protect"])
        .args(["--model", "x.ckpt"])
        .args(["--subject", "0"])
        .args(["--out", dir.path().to_str().unwrap()])
        .args(["--mask", "sideways"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
