use std::path::Path;
use std::process::{Command, Output};

fn rfa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn rfa")
}

#[test]
fn recurrence_check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfa(
        &["verify-recurrence", "--seed", "1", "--d", "8", "--feature-dim", "64", "--lengths", "64"],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("seed=1"));
    assert!(stdout.contains("SUMMARY passed="));
}

#[test]
fn bad_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rfa(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(rfa(&["verify-kernel", "--d", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(rfa(&["bench-decode", "--kind", "lstm"], dir.path()).status.code(), Some(2));
    assert_eq!(rfa(&["bench-decode", "--reps", "2"], dir.path()).status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = rfa(
        &[
            "bench-decode", "--kind", "softmax", "--lengths", "8,16,32", "--d", "8",
            "--feature-dim", "8", "--out", "b.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("kind,mode,length,batch,"));
}

#[test]
fn identical_argv_gives_identical_sweep_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let args = |name: &'static str| {
        vec!["sweep-d", "--seed", "3", "--feature-dims", "4,16", "--seeds", "3", "--out", name]
    };
    assert_eq!(rfa(&args("a.csv"), dir.path()).status.code(), Some(0));
    assert_eq!(rfa(&args("b.csv"), dir.path()).status.code(), Some(0));
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# toy\nsteps = 3\nvocab = 4\nseq_len = 6\nout = cfg.csv\n").unwrap();
    let out = rfa(
        &["train-toy", "--config", "run.cfg", "--steps", "2", "--kind", "softmax"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("cfg.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}
