mod common;

use common::*;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualshot(dir.path(), &["train-everything"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualshot(dir.path(), &["--set", "alpha=2", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));

    let out = dualshot(dir.path(), &["--set", "nmt_hidden=wide", "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nmt_hidden") && stderr(&out).contains("usize"), "{}", stderr(&out));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "colour=blue\n").unwrap();
    let out = dualshot(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn help_documents_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualshot(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for (key, _, _) in dualshot_cli::config::KEYS {
        assert!(text.contains(key), "{key} missing from help");
    }
    assert!(text.contains("[default: 0.005]"));
}

#[test]
fn missing_artifacts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualshot(dir.path(), &["translate", "--from", "x", "--to", "y"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn zero_step_experiment_then_translate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let zero = [
        "--set", "nmt_steps=0", "--set", "lm_epochs=0", "--set", "dual_steps=0",
        "--set", "resume_small_steps=0", "--set", "resume_full_steps=0",
    ];
    let mut args = vec!["--config", cfg.as_str()];
    args.extend(zero);
    args.push("run-experiment");
    let out = dualshot(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 5);
    assert!(dir.path().join("manifest.json").exists());

    let out = dualshot_with_input(dir.path(), &["--config", &cfg, "translate", "--from", "x", "--to", "y"], "");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    let out = dualshot_with_input(dir.path(), &["--config", &cfg, "translate", "--from", "x", "--to", "q"], "ab\n");
    assert_eq!(out.status.code(), Some(1));

    let line = std::fs::read_to_string(dir.path().join("data/test.x")).unwrap().lines().next().unwrap().to_string();
    let input = format!("{line}\n\n{line}\n");
    let out = dualshot_with_input(dir.path(), &["--config", &cfg, "translate", "--from", "x", "--to", "y"], &input);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], lines[2]);
}
