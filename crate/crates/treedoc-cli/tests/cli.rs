//! End-to-end tests of the `treedoc` binary: scenario runs, fuzzing,
//! trace emission, and the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treedoc"))
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn tmp_path(name: &str) -> PathBuf {
    let p = std::env::temp_dir().join(format!("treedoc-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_file(&p);
    p
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8(out.stdout.clone())
        .expect("stdout is utf-8")
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn mid_string_insert_converges_to_the_golden_rendering() {
    let out = bin().arg("run").arg(scenario_path("insert_between.txt")).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 1, "one summary line without --metrics");
    assert!(lines[0].contains("\"final_rendering\":\"abcXdef\""), "{}", lines[0]);
    assert!(lines[0].contains("\"checks_failed\":0"), "{}", lines[0]);
}

#[test]
fn concurrent_inserts_at_one_gap_interleave_identically() {
    let out = bin().arg("run").arg(scenario_path("concurrent_sides.txt")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert!(lines[0].contains("\"final_rendering\":\"abcYXdef\""), "{}", lines[0]);
    assert!(lines[0].contains("\"converged\":true"), "{}", lines[0]);
}

#[test]
fn committed_flatten_preserves_rendering_and_caps_depth() {
    let out = bin()
        .arg("run")
        .arg(scenario_path("flatten_rebalance.txt"))
        .arg("--metrics")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 2, "summary plus metrics");
    assert!(lines[0].contains("\"final_rendering\":\"abcdefgh\""), "{}", lines[0]);
    assert!(lines[1].starts_with("{\"metrics\":"), "{}", lines[1]);
    assert!(lines[1].contains("\"max_path_len\":4"), "eight atoms fit in depth 4: {}", lines[1]);
}

#[test]
fn empty_scenario_passes_with_an_empty_report() {
    let path = tmp_path("empty.txt");
    fs::write(&path, "sites 2\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_lines(&out);
    assert!(lines[0].contains("\"events\":0"), "{}", lines[0]);
    assert!(lines[0].contains("\"final_rendering\":\"\""), "{}", lines[0]);
    fs::remove_file(&path).unwrap();
}

#[test]
fn parse_errors_name_the_line_and_exit_2() {
    let path = tmp_path("bad.txt");
    fs::write(&path, "sites 2\ninsert 0 0 a\nfrobnicate 1\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "stderr: {stderr}");
    assert!(stderr.contains("frobnicate"), "stderr: {stderr}");
    fs::remove_file(&path).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().args(["fuzz", "--faults", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fault profile"), "stderr: {stderr}");

    let out = bin().arg("run").arg(tmp_path("missing.txt")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replaying_a_fuzz_trace_reproduces_the_report_byte_for_byte() {
    let trace = tmp_path("trace.txt");
    let fuzz = bin()
        .args(["fuzz", "--seed", "11", "--sites", "4", "--ops", "150", "--faults", "partition"])
        .arg("--metrics")
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(fuzz.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&fuzz.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("# fuzz seed=11 sites=4 ops=150 faults=partition\n"), "{text}");

    let replay = bin().arg("run").arg(&trace).arg("--metrics").output().unwrap();
    assert_eq!(replay.status.code(), Some(0));
    assert_eq!(fuzz.stdout, replay.stdout, "replay must reproduce the report exactly");
    fs::remove_file(&trace).unwrap();
}

#[test]
fn the_same_seed_prints_the_same_report_twice() {
    let run = || {
        bin()
            .args(["fuzz", "--seed", "3", "--ops", "120", "--faults", "partition-crash"])
            .arg("--metrics")
            .output()
            .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(a.stdout, b.stdout, "same seed, same bytes");
}

#[test]
fn run_normalizes_a_scenario_through_trace_emission() {
    let trace = tmp_path("norm.txt");
    let first = bin()
        .arg("run")
        .arg(scenario_path("insert_between.txt"))
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(first.status.code(), Some(0));
    let second = bin().arg("run").arg(&trace).output().unwrap();
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout, "the emitted trace replays identically");
    fs::remove_file(&trace).unwrap();
}
