//! End-to-end checks of the `pipesim` binary: exit codes, stdout shape,
//! and the files a run leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pipesim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipesim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn generate_validate_run_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let gen = pipesim(&["generate", "forward", "--rate-mbps", "1", "--out", "scn"], root);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    assert!(stdout(&gen).starts_with("wrote "));
    let scenario = root.join("scn/scenario.toml");
    assert!(scenario.exists());

    let val = pipesim(&["validate", "scn/scenario.toml"], root);
    assert_eq!(code(&val), 0, "{}", stderr(&val));
    let vout = stdout(&val);
    assert!(vout.contains("ok: 1 switches, 2 hosts, 2 links, 2 apps"), "{vout}");
    assert!(!vout.contains("warning:"), "{vout}");

    let run = pipesim(&["run", "scn/scenario.toml", "--seed", "7", "--out", "out"], root);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let rout = stdout(&run);
    assert!(rout.contains("scenario: forward"), "{rout}");
    assert!(rout.contains("seed: 7"), "{rout}");
    assert!(rout.contains("conservation=ok"), "{rout}");
    assert!(rout.contains("delivered: 1.000000"), "{rout}");

    let summary = fs::read_to_string(root.join("out/summary.txt")).unwrap();
    assert_eq!(summary, rout, "summary file mirrors stdout");
    let series = root.join("out/series");
    let csvs: Vec<_> = fs::read_dir(&series).unwrap().collect();
    assert!(!csvs.is_empty(), "series directory has files");
    let one = fs::read_to_string(series.join("host_h1.csv")).unwrap();
    assert!(one.starts_with("time_s,packets,bytes\n"), "{one}");
}

#[test]
fn run_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = pipesim(&["generate", "forward", "--rate-mbps", "1", "--out", "scn"], root);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));

    for out in ["a", "b"] {
        let run = pipesim(
            &["run", "scn/scenario.toml", "--seed", "3", "--trace", "--out", out],
            root,
        );
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    }
    let diff = pipesim(&["trace-diff", "a/trace.txt", "b/trace.txt"], root);
    assert_eq!(code(&diff), 0, "{}", stderr(&diff));
    assert_eq!(stdout(&diff).trim(), "identical");
}

#[test]
fn trace_diff_reports_first_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("a.txt"), "one\ntwo\nthree\n").unwrap();
    fs::write(root.join("b.txt"), "one\nTWO\nthree\n").unwrap();

    let diff = pipesim(&["trace-diff", "a.txt", "b.txt"], root);
    assert_eq!(code(&diff), 3);
    let out = stdout(&diff);
    assert!(out.contains("line 2 differs"), "{out}");
    assert!(out.contains("a: two"), "{out}");
    assert!(out.contains("b: TWO"), "{out}");

    let missing = pipesim(&["trace-diff", "a.txt", "nope.txt"], root);
    assert_eq!(code(&missing), 1);
}

#[test]
fn load_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let absent = pipesim(&["run", "nope.toml"], root);
    assert_eq!(code(&absent), 1);
    assert!(stderr(&absent).starts_with("error:"));

    fs::write(root.join("bad.toml"), "name = \"x\"\nduration_s = ").unwrap();
    let garbled = pipesim(&["validate", "bad.toml"], root);
    assert_eq!(code(&garbled), 1);
    assert!(stderr(&garbled).starts_with("error:"));

    let template = pipesim(&["generate", "bogus", "--out", "scn"], root);
    assert_eq!(code(&template), 1);
    assert!(stderr(&template).contains("bogus"));
}

#[test]
fn trace_flag_needs_an_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = pipesim(&["generate", "forward", "--rate-mbps", "1", "--out", "scn"], root);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));

    let run = pipesim(&["run", "scn/scenario.toml", "--trace"], root);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("--trace needs --out"));
}

#[test]
fn validate_surfaces_notes_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = pipesim(&["generate", "ecmp", "--flows", "2", "--out", "scn"], root);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));

    let val = pipesim(&["validate", "scn/scenario.toml"], root);
    assert_eq!(code(&val), 0, "{}", stderr(&val));
    let out = stdout(&val);
    assert!(out.contains("not statically decidable"), "{out}");
    assert!(out.contains("ok: 4 switches, 6 hosts, 10 links, 3 apps"), "{out}");
}
