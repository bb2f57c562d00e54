#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::io::Write;

/// A complete but tiny experiment: every stage runs in seconds.
pub const SMALL: &str = "\
n_supervised=300
n_mono=200
n_test=30
n_small=40
bpe_merges=40
nmt_embed=12
nmt_hidden=12
nmt_attention=12
nmt_batch=16
nmt_steps=40
resume_small_steps=10
resume_full_steps=10
lm_hidden=12
lm_batch=16
lm_epochs=1
dual_steps=4
dual_batch=4
";

pub fn dualshot(dir: &Path, args: &[&str]) -> Output {
    dualshot_with_input(dir, args, "")
}

pub fn dualshot_with_input(dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dualshot"))
        .arg("--out-dir")
        .arg(dir)
        .arg("--quiet")
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn dualshot");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

pub fn small_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
