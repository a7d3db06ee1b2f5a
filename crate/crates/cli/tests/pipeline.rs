use std::fs;
use std::path::Path;
use std::process::Command;

use difftune_cli::config::RawConfig;
use difftune_cli::{run, CliError, ExperimentConfig};

fn small(out: &Path) -> RawConfig {
    let mut raw = RawConfig::default();
    for (k, v) in [
        ("experiment.seed", "3"),
        ("model.hidden", "16x16"),
        ("pretrain.iterations", "100"),
        ("pretrain.batch_size", "32"),
        ("train.iterations", "30"),
        ("train.batch_size", "32"),
        ("train.validation_interval", "10"),
        ("train.validation_samples", "32"),
        ("bank.size", "64"),
        ("eval.samples", "64"),
        ("eval.reference_samples", "64"),
        ("eval.projections", "8"),
        ("sampler.steps", "10"),
    ] {
        raw.set_override(&format!("{k}={v}")).unwrap();
    }
    raw.set("io", "out_dir", &out.to_string_lossy());
    raw
}

fn run_kind(raw: &RawConfig, kind: &str) -> Result<difftune_cli::RunOutcome, CliError> {
    let mut raw = raw.clone();
    raw.set("experiment", "kind", kind);
    run(&ExperimentConfig::from_raw(&raw)?)
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(str::to_string)
        .collect()
}

#[test]
fn missing_inputs_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let raw = small(&out);
    for kind in [
        "make_bank",
        "finetune",
        "forgetting_sweep",
        "tau_sweep",
        "eval",
    ] {
        let err = run_kind(&raw, kind).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{kind}: {err}");
    }
    assert!(!out.exists());
}

#[test]
fn tau_zero_finetune_matches_standard_finetune_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let raw = small(dir.path());
    run_kind(&raw, "pretrain").unwrap();
    run_kind(&raw, "make_bank").unwrap();
    let mut checkpoints = Vec::new();
    for (variant, tau) in [("standard_ft", "1"), ("diff_tuning", "0")] {
        let mut r = raw.clone();
        r.set("train", "variant", variant);
        r.set("train", "tau", tau);
        run_kind(&r, "finetune").unwrap();
        checkpoints.push(fs::read(dir.path().join("finetuned.ckpt")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
    let pretrained = fs::read(dir.path().join("pretrained.ckpt")).unwrap();
    assert_ne!(checkpoints[0], pretrained);
}

#[test]
fn finetune_log_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let raw = small(dir.path());
    run_kind(&raw, "pretrain").unwrap();
    run_kind(&raw, "make_bank").unwrap();
    run_kind(&raw, "finetune").unwrap();
    let text = fs::read_to_string(dir.path().join("finetune_log.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(
        lines.next(),
        Some(difftune_cli::runner::FINETUNE_LOG_HEADER)
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 30);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert!(!row[1].is_empty(), "diff_tuning logs a retention loss");
        assert_eq!(row[4].is_empty(), (i + 1) % 10 != 0, "row {i}");
    }
}

#[test]
fn tau_sweep_emits_one_row_per_grid_value() {
    let dir = tempfile::tempdir().unwrap();
    let raw = small(dir.path());
    run_kind(&raw, "pretrain").unwrap();
    run_kind(&raw, "make_bank").unwrap();
    let outcome = run_kind(&raw, "tau_sweep").unwrap();
    let rows = data_lines(&dir.path().join("tau_sweep.csv"));
    let taus: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(taus, ["0.0", "0.3", "0.5", "0.7", "1.0", "1.5"]);
    assert_eq!(outcome.reports.len(), 6);
    for i in 0..6 {
        assert!(dir.path().join(format!("tau_sweep/tau_{i}.csv")).is_file());
    }
}

#[test]
fn forgetting_sweep_is_flat_when_both_models_coincide() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = small(dir.path());
    run_kind(&raw, "pretrain").unwrap();
    raw.set(
        "io",
        "finetuned",
        &dir.path().join("pretrained.ckpt").to_string_lossy(),
    );
    let outcome = run_kind(&raw, "forgetting_sweep").unwrap();
    assert_eq!(outcome.reports.len(), 11);
    let first = &outcome.reports[0].1;
    for (_, r) in &outcome.reports {
        assert_eq!(r, first);
    }
}

#[test]
fn numerical_failure_leaves_an_incomplete_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = small(dir.path());
    run_kind(&raw, "pretrain").unwrap();
    run_kind(&raw, "make_bank").unwrap();
    raw.set("train", "learning_rate", "1e300");
    let err = run_kind(&raw, "finetune").unwrap_err();
    assert!(matches!(err, CliError::Aborted { .. }), "{err}");
    assert!(err.to_string().contains("iteration"));
    let text = fs::read_to_string(dir.path().join("finetune_log.csv")).unwrap();
    assert!(text.lines().last().unwrap().starts_with("# incomplete"));
    assert!(!dir.path().join("finetuned.ckpt").exists());
}

#[test]
fn every_csv_embeds_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let raw = small(dir.path());
    for kind in ["pretrain", "make_bank", "finetune", "eval"] {
        run_kind(&raw, kind).unwrap();
    }
    for name in [
        "pretrain_log.csv",
        "finetune_log.csv",
        "finetune_report.csv",
        "eval.csv",
    ] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with("# config_hash=") && first.contains("seed=3"),
            "{name}"
        );
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 3);
    assert!(json["report"]["mmd"].is_number());
}

#[test]
fn binary_resolves_flags_and_rejects_bad_keys() {
    let bin = env!("CARGO_BIN_EXE_difftune");
    let ok = Command::new(bin)
        .args([
            "tau-sweep",
            "--seed",
            "9",
            "--set",
            "train.tau=0.5",
            "--dry-run",
        ])
        .args([
            "--set",
            "io.pretrained=Cargo.toml",
            "--set",
            "io.bank=Cargo.toml",
        ])
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let json: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(json["kind"], "tau_sweep");
    assert_eq!(json["seed"], 9);

    let bad = Command::new(bin)
        .args(["pretrain", "--seed", "1", "--set", "train.bogus=1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.bogus"));

    let no_seed = Command::new(bin)
        .args(["pretrain", "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(no_seed.status.code(), Some(2));
}

#[test]
fn shipped_config_spells_out_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/transfer.ini");
    let mut raw = RawConfig::load(&path).unwrap();
    raw.set("experiment", "kind", "pretrain");
    let from_file = ExperimentConfig::from_raw(&raw).unwrap();
    let mut bare = RawConfig::default();
    bare.set("experiment", "kind", "pretrain");
    bare.set("experiment", "seed", "1");
    let defaults = ExperimentConfig::from_raw(&bare).unwrap();
    assert_eq!(
        ExperimentConfig {
            config_hash: String::new(),
            ..from_file
        },
        ExperimentConfig {
            config_hash: String::new(),
            ..defaults
        }
    );
}
