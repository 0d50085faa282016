use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_driftgate"));
    c.env("RUST_LOG", "warn").env_remove("DG_SEED");
    c
}

const TINY: &str = r#"
seeds = [3]
jobs = 1

[stream]
segments = 2
frames_per_segment = 8
channels = 6
height = 8
width = 8
shared_channels = 2
object_radius = 2.5
holdout_per_segment = 2

[sweep]
deltas = [1, 3]

[[methods]]
method = "baseline"

[[methods]]
method = "grcl"
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = \"not a list\"");
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let missing = bin()
        .args(["run", "--config", "/nonexistent/exp.toml"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn run_writes_all_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let status = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for f in ["results.csv", "metrics.jsonl", "summary.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read(a.join("results.csv")).unwrap(),
        fs::read(b.join("results.csv")).unwrap()
    );
    let rows = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("o");
    let status = bin()
        .env("DG_SEED", "11,12")
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(5).is_some_and(|s| s == "11" || s == "12")));
}

#[test]
fn plot_all_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    assert!(bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    assert!(bin()
        .args(["plot", "--results"])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    for k in [
        "delta-curve",
        "memory-curve",
        "gate-popcount",
        "mas-compare",
    ] {
        assert!(
            out.join("plots").join(format!("{k}.tsv")).exists(),
            "missing {k}"
        );
    }
    let bad = bin()
        .args(["plot", "--kind", "pie", "--results"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exported_stream_runs_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    assert!(bin()
        .args(["export-stream", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let manifest_cfg = dir.path().join("m.toml");
    fs::write(&manifest_cfg, "manifest = \"data/manifest.txt\"\njobs = 1\n[sweep]\ndeltas = [2]\n[[methods]]\nmethod = \"rmscl\"\n").unwrap();
    let out = dir.path().join("m");
    let status = bin()
        .args(["run", "--config"])
        .arg(&manifest_cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn verify_passes() {
    let out = bin().arg("verify").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}
