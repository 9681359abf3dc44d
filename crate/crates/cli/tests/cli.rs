use std::path::Path;

use clap::Parser;
use vwm_cli::manifest::{sha256_hex, Manifest};
use vwm_cli::{run_cli, Cli, CliError};

fn run(args: &[&str]) -> Result<std::path::PathBuf, CliError> {
    let mut v = vec!["vwm"];
    v.extend_from_slice(args);
    run_cli(&Cli::parse_from(v))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sr");
    let m = run(&["store-recall", "--runs", "2", "--presentations", "20", "--out-dir", out.to_str().unwrap()]).unwrap();
    let manifest = Manifest::read(&m).unwrap();
    let mut listed: Vec<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
    listed.sort();
    let mut on_disk: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    for a in &manifest.artifacts {
        assert_eq!(sha256_hex(&read(&out.join(&a.path))), a.sha256);
    }
    assert_eq!(manifest.seeds, vec![0]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "experiment = \"store-recall\"\nseed = 4\n[store_recall]\np_on = 0.1\nruns = 1\npresentations = 5\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let m =
        run(&["store-recall", "--config", cfg.to_str().unwrap(), "--p-on", "0.3", "--out-dir", out.to_str().unwrap()])
            .unwrap();
    let manifest = Manifest::read(&m).unwrap();
    assert!(manifest.config.contains("p_on = 0.3"));
    assert!(manifest.config.contains("seed = 4"));
    let summary = String::from_utf8(read(&out.join("summary.csv"))).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("0.3,"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "experiment = \"wm\"\n[wm]\ndelay_ms = -1\n").unwrap();
    let e = run(&["sweep", "--config", cfg.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("delay_ms"));
    let e = run(&["assoc", "--delays", "100,100", "--out-dir", dir.path().to_str().unwrap()]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn sweep_rows_and_partial_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    run(&[
        "sweep",
        "--experiment",
        "store-recall",
        "--grid",
        "p_on=0.05,0.1",
        "--grid",
        "stored=green,purple",
        "--seeds",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
    ])
    .unwrap();
    let text = String::from_utf8(read(&out.join("sweep.csv"))).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",error: ")).count(), 6);
    assert_eq!(rows.iter().filter(|r| r.contains(",ok,")).count(), 6);
    let matrix = String::from_utf8(read(&out.join("accuracy_matrix.csv"))).unwrap();
    assert_eq!(matrix.lines().count(), 3);
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for w in ["1", "3"] {
        let out = dir.path().join(w);
        run(&[
            "sweep",
            "--experiment",
            "assoc",
            "--grid",
            "rho=0.1,0.2",
            "--seeds",
            "2",
            "--workers",
            w,
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .unwrap_or_else(|e| panic!("{e}"));
        hashes.push(read(&out.join("sweep.csv")));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let m = run(&["assoc", "--trials", "5", "--delays", "100,1000", "--out-dir", out.to_str().unwrap()]).unwrap();
    run(&["replay", m.to_str().unwrap()]).unwrap();
    let text = std::fs::read_to_string(&m).unwrap();
    let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
    manifest.artifacts[0].sha256 = "0".repeat(64);
    std::fs::write(&m, serde_json::to_string(&manifest).unwrap()).unwrap();
    let e = run(&["replay", m.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
