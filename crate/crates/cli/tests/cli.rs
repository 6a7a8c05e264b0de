//! Exit-code and output contracts of the `cme` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn cme() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cme"))
}

fn write_tiny_scenario(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        r#"
h = 10
w = 10
c = 6
frame_count = 6
seed = 5
noise_sigma = 0.2
appearance_drift_rate = 0.1

[target]
center = [5.0, 5.0]
velocity = [0.1, 0.0]
radius = 1.8
deform_amplitude = 0.2
"#,
    )
    .unwrap();
    path
}

#[test]
fn gen_writes_files_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    for out in [&out_a, &out_b] {
        let status = cme()
            .args(["gen", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert!(out_a.join("frame_000.txt").exists());
    assert!(out_a.join("truth_005.pgm").exists());
    for name in ["frame_000.txt", "frame_005.txt", "truth_003.pgm"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical gen runs"
        );
    }
}

#[test]
fn gen_missing_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "h = 10\nw = 10\n").unwrap();
    let output = cme()
        .args(["gen", "--scenario"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("missing field"), "{stderr}");
}

#[test]
fn run_missing_scenario_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let output = cme()
        .args(["run", "--scenario", "/nonexistent/scenario.toml", "--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_defaults_echo_published_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let out = tmp.path().join("out");
    let status = cme()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["top_k"], 3);
    assert_eq!(metrics["config"]["zeta"], 0.9);
    assert_eq!(metrics["config"]["beta"], 0.001);
    assert_eq!(metrics["config"]["strategy"], "compact");
    assert!(out.join("frames.csv").exists());
}

#[test]
fn run_initial_only_keeps_bank_size_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let out = tmp.path().join("out");
    let status = cme()
        .args(["run", "--strategy", "initial-only", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("frames.csv")).unwrap();
    let sizes: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert!(!sizes.is_empty());
    assert!(
        sizes.iter().all(|s| *s == sizes[0]),
        "bank size changed: {sizes:?}"
    );
}

#[test]
fn run_rejects_multiple_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let output = cme()
        .args(["run", "--seeds", "1,2", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_masks_flag_writes_pgms() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let out = tmp.path().join("out");
    let status = cme()
        .args(["run", "--masks", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("masks/mask_000.pgm").exists());
    assert!(out.join("masks/mask_005.pgm").exists());
}

#[test]
fn ablate_writes_all_variant_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let out = tmp.path().join("out");
    let status = cme()
        .args(["ablate", "--seeds", "3,1", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    // Header + 2 seeds x 6 variants + 6 summary rows.
    assert_eq!(lines.len(), 1 + 12 + 6, "{csv}");
    // Deterministic sort: seed 1 rows precede seed 3 rows.
    assert!(lines[1].starts_with("1,baseline,"));
    assert!(lines[7].starts_with("3,baseline,"));
    for variant in ["baseline", "+dfl_n", "+dfl", "+me_all", "+cme", "+cme+dfl"] {
        assert!(
            csv.contains(&format!("mean,{variant},")),
            "missing summary for {variant}"
        );
    }
}

#[test]
fn ablate_requires_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let output = cme()
        .args(["ablate", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = cme().arg("gradcheck").output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{:?}", ok);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("max relative error"), "{stdout}");

    let corrupted = cme()
        .args(["gradcheck", "--corrupt-gradient"])
        .output()
        .unwrap();
    assert_eq!(corrupted.status.code(), Some(1));

    let oversized = cme()
        .args(["gradcheck", "--height", "5", "--width", "5"])
        .output()
        .unwrap();
    assert_eq!(oversized.status.code(), Some(2));
}

#[test]
fn bad_thread_env_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_tiny_scenario(tmp.path());
    let output = cme()
        .env("CME_THREADS", "zero")
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}
