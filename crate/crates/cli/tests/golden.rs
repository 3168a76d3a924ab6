use std::path::{Path, PathBuf};
use std::process::Command;

use gkm_cli::{compare_runs, parse_scenario, run, RunOptions, ScenarioError};

fn dir(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(sub)
}

fn scenarios() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir("scenarios"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    v.sort();
    v
}

fn gcsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gcsim"))
}

#[test]
fn traces_match_golden_files() {
    let files = scenarios();
    assert!(files.len() >= 7);
    for scn in files {
        let name = scn.file_stem().unwrap().to_str().unwrap();
        let text = std::fs::read_to_string(&scn).unwrap();
        let out = run(&parse_scenario(&text).unwrap(), RunOptions::default()).unwrap();
        assert_eq!(out.exit_code(), 0, "{name}: {:?}", out.stats.violations);
        let golden = std::fs::read_to_string(dir("tests/golden").join(format!("{name}.trace"))).unwrap();
        let diff = compare_runs(&golden, &out.trace);
        assert!(diff.is_empty(), "{name} drifted from its golden trace:\n{diff}");
        assert_eq!(out.stats.tape_items, out.stats.total_items(), "{name}");
    }
}

#[test]
fn rekey8_script_parses_to_six_events() {
    let scn = parse_scenario(&std::fs::read_to_string(dir("scenarios/rekey8-lkh.scn")).unwrap()).unwrap();
    assert_eq!(scn.events.len(), 6);
}

#[test]
fn policy_change_diff_touches_only_ciphertext_and_key_lines() {
    let base = std::fs::read_to_string(dir("tests/golden/rekey8-lkh.trace")).unwrap();
    let strong = std::fs::read_to_string(dir("tests/golden/rekey8-lkh-strong.trace")).unwrap();
    let diff = compare_runs(&base, &strong);
    let changed: Vec<&str> = diff
        .lines()
        .filter(|l| (l.starts_with('-') || l.starts_with('+')) && !l.starts_with("---") && !l.starts_with("+++"))
        .map(|l| l[1..].trim_start())
        .collect();
    assert!(!changed.is_empty());
    for l in changed {
        let head = l.split_whitespace().next().unwrap_or("");
        let ok = matches!(head, "scheme" | "ct" | "group" | "captured" | "recovered" | "summary")
            || (head.starts_with("t=") && l.contains(" prf="));
        assert!(ok, "unexpected diff line: {l}");
    }
}

#[test]
fn tampered_trace_gives_nonempty_diff() {
    let golden = std::fs::read_to_string(dir("tests/golden/rekey8-lkh.trace")).unwrap();
    assert!(compare_runs(&golden, &golden).is_empty());
    let tampered = golden.replacen("keyfp=23fe4f37", "keyfp=23fe4f38", 1);
    assert_ne!(tampered, golden);
    let diff = compare_runs(&golden, &tampered);
    assert!(diff.contains("-  group t=0") && diff.contains("+  group t=0"), "{diff}");
}

#[test]
fn cli_writes_trace_and_stats_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = dir("scenarios/rekey8-lkh.scn");
    let mut traces = Vec::new();
    for i in 0..2 {
        let trace = tmp.path().join(format!("t{i}.trace"));
        let stats = tmp.path().join(format!("s{i}.kv"));
        let status = gcsim()
            .args(["run", scn.to_str().unwrap(), "--seed", "7", "--trace"])
            .arg(&trace)
            .arg("--stats")
            .arg(&stats)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let kv = std::fs::read_to_string(&stats).unwrap();
        assert!(kv.lines().any(|l| l == "final_recovery=4"), "{kv}");
        traces.push(trace);
    }
    let a = std::fs::read(&traces[0]).unwrap();
    let b = std::fs::read(&traces[1]).unwrap();
    assert_eq!(a, b);

    let diff = gcsim().arg("diff").args(&traces).output().unwrap();
    assert_eq!(diff.status.code(), Some(0));
    assert!(diff.stdout.is_empty());
    let other = gcsim()
        .args(["diff"])
        .arg(&traces[0])
        .arg(dir("tests/golden/rekey8-lkh-strong.trace"))
        .output()
        .unwrap();
    assert_eq!(other.status.code(), Some(1));
}

#[test]
fn key_bytes_need_the_insecure_flag() {
    let scn = dir("scenarios/rekey8-lkh.scn");
    let quiet = gcsim().args(["run", scn.to_str().unwrap()]).output().unwrap();
    let loud = gcsim()
        .args(["run", scn.to_str().unwrap(), "--insecure-dump-keys"])
        .output()
        .unwrap();
    let quiet = String::from_utf8(quiet.stdout).unwrap();
    let loud = String::from_utf8(loud.stdout).unwrap();
    assert!(!quiet.contains("  tree "));
    assert!(loud.lines().any(|l| l.starts_with("  tree ")));
}

#[test]
fn bad_scripts_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("scheme lkh\njoin u9\n", "line 2"),
        ("scheme lkh-turbo\n", "line 1"),
        ("scheme cs\nn 8\njoin u1\n", "line 3"),
    ] {
        let p = tmp.path().join("bad.scn");
        std::fs::write(&p, text).unwrap();
        let out = gcsim().arg("run").arg(&p).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{text}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains(needle), "{text}: {err}");
    }
    assert!(matches!(
        parse_scenario("scheme lkh\njoin u9\n"),
        Err(ScenarioError::Parse { line: 2, .. })
    ));
    let missing = gcsim().args(["run", "/nonexistent.scn"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}
