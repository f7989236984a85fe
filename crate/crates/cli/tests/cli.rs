//! End-to-end command checks at the micro preset.

use std::path::Path;
use std::process::{Command, Output};

use seas_core::manifest::read_manifests;

fn run_seas(root: &Path, args: &[&str]) -> Output {
    let out_dir = root.join("out");
    Command::new(env!("CARGO_BIN_EXE_seas"))
        .env("SEAS_CACHE_DIR", root.join("cache"))
        .arg("--out")
        .arg(&out_dir)
        .arg("--config")
        .arg(root.join("config.toml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("config.toml"), "preset = \"micro\"\nseed = 11\n").unwrap();
    let out = root.join("out");

    expect_ok(&run_seas(root, &["gen-data"]));
    assert!(out.join("corpus/manifest.jsonl").exists());

    let again = run_seas(root, &["gen-data"]);
    assert!(!again.status.success());
    let err = String::from_utf8_lossy(&again.stderr);
    assert!(err.starts_with("error class=validation"), "stderr: {}", err);
    expect_ok(&run_seas(root, &["gen-data", "--force"]));

    expect_ok(&run_seas(root, &["train-rmp"]));
    let cache_entries = std::fs::read_dir(root.join("cache")).unwrap().count();
    assert_eq!(cache_entries, 3, "vae, generator and rmp checkpoints");

    expect_ok(&run_seas(root, &["generate"]));
    assert!(out.join("generated/normal/manifest.jsonl").exists());
    assert!(out.join("generated/scratch/images/00000.png").exists());
    assert!(out.join("generated/scratch/masks/00000.png").exists());

    expect_ok(&run_seas(root, &["evaluate"]));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "set,count,is,ic_lpips,kid,ic_lpips_a,auroc,ap,f1_max,iou");
    assert!(lines.len() >= 3, "normal row plus one per anomaly type");
    assert!(lines[1].starts_with("normal,2,"));

    expect_ok(&run_seas(root, &["ablate", "--arm", "tau_30"]));
    let summary = std::fs::read_to_string(out.join("ablate/summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("tau_30,")));

    let runs = read_manifests(&out.join("runs.jsonl")).unwrap();
    let commands: Vec<&str> = runs.iter().map(|m| m.command.as_str()).collect();
    assert!(commands.contains(&"gen-data"));
    assert!(commands.contains(&"train-rmp"));
    assert!(commands.contains(&"generate"));
    assert!(commands.contains(&"evaluate"));
    assert!(commands.contains(&"ablate:tau_30"));
    for m in &runs {
        assert!(m.finished_unix >= m.started_unix);
        assert!(!m.content_hash().is_empty());
    }
}

#[test]
fn unknown_arm_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("config.toml"), "preset = \"micro\"\n").unwrap();
    let out = run_seas(root, &["ablate", "--arm", "nope"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error class=config"), "stderr: {}", err);
}
