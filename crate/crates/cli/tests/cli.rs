use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kbsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("KBSIM_SEED")
        .output()
        .expect("binary runs")
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn without_wall_clock(path: &Path) -> String {
    let mut v = report(path);
    v.as_object_mut().unwrap().remove("wall_clock_ms");
    v.to_string()
}

const MINIMAL: &str = "topology.nic_count = 1\ntopology.core_count = 1\ntopology.stack = pmd\n\
                       loadgen.rate_gbps = 10\nsim.duration_ns = 1000000\n";

#[test]
fn minimal_run_has_no_drops() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("m.cfg"), MINIMAL).unwrap();
    let o = kbsim(&["run", "m.cfg", "--out", "out"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&d.path().join("out/report.json"));
    assert_eq!(r["schema_version"], "1");
    assert_eq!(r["totals"]["drop_pct"], 0.0);
    assert!(r["totals"]["tx"].as_u64().unwrap() > 0);
    assert_eq!(r["ports"][0]["latency"]["count"], r["totals"]["rx"]);
    assert!(d.path().join("out/config.resolved").exists());
}

#[test]
fn same_seed_same_report_and_echo_round_trip() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("m.cfg"), MINIMAL).unwrap();
    for out in ["a", "b"] {
        assert!(kbsim(&["run", "m.cfg", "--out", out], d.path()).status.success());
    }
    let a = without_wall_clock(&d.path().join("a/report.json"));
    assert_eq!(a, without_wall_clock(&d.path().join("b/report.json")));
    assert!(kbsim(&["run", "a/report.json", "--out", "c"], d.path()).status.success());
    assert_eq!(a, without_wall_clock(&d.path().join("c/report.json")));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.cfg"), "seed = 1\nnic.wb_thresh = 4\n").unwrap();
    let o = kbsim(&["run", "bad.cfg"], d.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nic.wb_thresh") && err.contains("line 2"), "{err}");
}

#[test]
fn cross_field_violation_exits_2() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("p.cfg"), "pmd.mode = pipeline\ntopology.core_count = 1\n").unwrap();
    let o = kbsim(&["validate", "p.cfg"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("core_count"));
    let o = kbsim(&["run", "missing.cfg"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_env_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("m.cfg"), "seed = 5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_kbsim"))
        .args(["validate", "m.cfg"])
        .current_dir(d.path())
        .env("KBSIM_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l == "seed = 42"));
}

#[test]
fn samples_dump_is_optional() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("m.cfg"), format!("{MINIMAL}loadgen.dump_samples = true\n")).unwrap();
    assert!(kbsim(&["run", "m.cfg", "--out", "s"], d.path()).status.success());
    let s = fs::read_to_string(d.path().join("s/samples.csv")).unwrap();
    assert_eq!(s.lines().next(), Some("tx_tick,rx_tick,rtt_ps"));
    let r = report(&d.path().join("s/report.json"));
    assert_eq!(s.lines().count() as u64 - 1, r["totals"]["rx"].as_u64().unwrap());
    fs::write(d.path().join("n.cfg"), MINIMAL).unwrap();
    assert!(kbsim(&["run", "n.cfg", "--out", "n"], d.path()).status.success());
    assert!(!d.path().join("n/samples.csv").exists());
}

const QUICK_SEARCH: &str = "search.hold_window_ns = 500000\nsearch.coarse_step = 10\nsearch.start_rate = 2\n";

#[test]
fn empty_knob_list_is_one_baseline_row() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("k.cfg"), QUICK_SEARCH).unwrap();
    let o = kbsim(&["sweep", "k.cfg", "--axis", "knobs=", "--out", "k"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("k/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "axis_point,max_sustainable_gbps");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("baseline,"));
}

#[test]
fn stack_axis_pmd_beats_kernel() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("s.cfg"), QUICK_SEARCH).unwrap();
    let o = kbsim(&["sweep", "s.cfg", "--axis", "stack", "--out", "s"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("s/sweep.csv")).unwrap();
    let vals: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(vals[0].0, "stack=kernel");
    assert_eq!(vals[1].0, "stack=pmd");
    assert!(vals[1].1 >= vals[0].1, "{vals:?}");
}

#[test]
fn bad_axis_exits_2() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("s.cfg"), "").unwrap();
    let o = kbsim(&["sweep", "s.cfg", "--axis", "knobs=turbo"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn burst_study_writes_one_csv_per_size() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("b.cfg"), "").unwrap();
    let o = kbsim(&["burst-study", "b.cfg", "--bursts", "1,32", "--out", "b"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for b in [1, 32] {
        let csv = fs::read_to_string(d.path().join(format!("b/writebacks_{b}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("interval_start_ns,l2_writebacks,llc_writebacks"));
    }
    let j: Value = serde_json::from_str(&fs::read_to_string(d.path().join("b/burst_study.json")).unwrap()).unwrap();
    for o in j.as_array().unwrap() {
        assert_eq!(o["returned"], 1024);
    }
}

#[test]
fn burst_study_rejects_kernel_stack() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("b.cfg"), "topology.stack = kernel\n").unwrap();
    assert_eq!(kbsim(&["burst-study", "b.cfg"], d.path()).status.code(), Some(2));
}
