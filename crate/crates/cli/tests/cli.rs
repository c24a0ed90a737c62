use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rot-cfi-sim"));
    c.env_remove("ROT_CFI_SIM_PROFILE_DIR");
    c
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

fn gen(dir: &TempDir, name: &str, args: &[&str]) -> PathBuf {
    let path = dir.path().join(name);
    let mut all = vec!["gen"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", path.to_str().unwrap()]);
    let out = exec(&all);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_clean_trace_as_json() {
    let dir = TempDir::new().unwrap();
    let trace = gen(
        &dir,
        "bal.log",
        &["balanced", "--depth", "2", "--width", "2"],
    );
    let out = exec(&["simulate", "--trace", s(&trace), "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["schema"], 1);
    assert_eq!(r["config"]["profile"], "optimized");
    assert_eq!(r["config"]["queue_depth"], 1);
    assert_eq!(r["events_by_kind"]["call"], 6);
    assert_eq!(r["events_by_kind"]["return"], 6);
    assert_eq!(r["cf_event_count"], 12);
    assert_eq!(r["violations"].as_array().unwrap().len(), 0);
}

#[test]
fn attack_is_detected_at_the_corrupted_record() {
    let dir = TempDir::new().unwrap();
    let trace = gen(
        &dir,
        "bal.log",
        &["balanced", "--depth", "2", "--width", "2"],
    );
    let out = exec(&[
        "attack",
        "--trace",
        s(&trace),
        "--corrupt-return-at",
        "5",
        "--format",
        "json",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let r = json(&out);
    let v = r["violations"].as_array().unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0]["trace_index"], 5);
    assert!(stderr(&out).contains("detected: record 5"));
}

#[test]
fn attack_on_a_non_return_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let trace = gen(
        &dir,
        "bal.log",
        &["balanced", "--depth", "2", "--width", "2"],
    );
    let out = exec(&["attack", "--trace", s(&trace), "--corrupt-return-at", "1"]);
    assert_eq!(code(&out), 2);
    let out = exec(&["attack", "--trace", s(&trace), "--corrupt-return-at", "999"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn profiles_lists_builtin_totals() {
    let out = exec(&["profiles"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for (name, call, ret, avg) in [
        ("irq", 258, 276, 267),
        ("polling", 103, 121, 112),
        ("optimized", 64, 82, 73),
    ] {
        let line = text
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("no {name} row in {text}"));
        let nums: Vec<u64> = line
            .split_whitespace()
            .filter_map(|w| w.parse().ok())
            .collect();
        assert_eq!(nums, vec![call, ret, avg], "{line}");
    }
}

#[test]
fn profiles_picks_up_user_tables() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("slow.toml"),
        "name = \"slow\"\nvariant = \"custom\"\ncall_cycles = 500\nreturn_cycles = 600\n",
    )
    .unwrap();
    let out = bin()
        .args(["profiles", "--format", "json"])
        .env("ROT_CFI_SIM_PROFILE_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = json(&out);
    let slow = rows
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "slow")
        .expect("user profile listed");
    assert_eq!(slow["average_cycles"], 550);
}

#[test]
fn gen_patterns_have_documented_shapes() {
    let dir = TempDir::new().unwrap();
    let classify = |path: &Path| {
        let out = exec(&["classify", "--trace", s(path), "--format", "json"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        json(&out)
    };

    let bal = classify(&gen(
        &dir,
        "b.log",
        &["balanced", "--depth", "2", "--width", "2"],
    ));
    assert_eq!(bal["events_by_kind"]["call"], 6);
    assert_eq!(bal["events_by_kind"]["return"], 6);

    let burst = classify(&gen(&dir, "r.log", &["burst", "--n", "3"]));
    assert_eq!(burst["event_count"], 3);
    assert_eq!(burst["events_by_kind"]["return"], 3);

    let gap = classify(&gen(&dir, "g.log", &["gap", "--n", "100"]));
    assert_eq!(gap["events_by_kind"]["call"], 100);
    assert_eq!(gap["events_by_kind"]["return"], 100);
    let events = gap["events"].as_array().unwrap();
    assert_eq!(events[0]["cycle"], 1000);
    assert_eq!(events[1]["cycle"], 2000);
}

#[test]
fn gen_rejects_unknown_pattern() {
    let out = exec(&["gen", "spiral"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn classify_count_matches_simulation() {
    let dir = TempDir::new().unwrap();
    for seed in 0..5 {
        let seed = seed.to_string();
        let trace = gen(
            &dir,
            "r.log",
            &["random", "--n", "400", "--seed", &seed, "--density", "40"],
        );
        let c = json(&exec(&[
            "classify",
            "--trace",
            s(&trace),
            "--format",
            "json",
        ]));
        let out = exec(&["simulate", "--trace", s(&trace), "--format", "json"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(c["event_count"], json(&out)["cf_event_count"]);
    }
}

#[test]
fn bad_inputs_exit_with_usage_status() {
    let dir = TempDir::new().unwrap();
    let trace = gen(&dir, "b.log", &["balanced"]);
    for args in [
        vec!["simulate", "--trace", s(&trace), "--bus-width", "48"],
        vec!["simulate", "--trace", s(&trace), "--profile", "fast"],
        vec!["simulate", "--trace", s(&trace), "--queue-depth", "0"],
        vec!["simulate", "--trace", "/nonexistent/trace.log"],
        vec!["simulate"],
        vec!["frobnicate"],
    ] {
        let out = exec(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }

    let bad = dir.path().join("bad.log");
    std::fs::write(&bad, "1 0x0 0x13 0x4\n1 0x4 0x13 0x8\n1 0x8 0x13 0xc\n").unwrap();
    let out = exec(&["simulate", "--trace", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cycle 1"), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let trace = gen(&dir, "b.log", &["balanced"]);
    let cfg = dir.path().join("sim.toml");
    std::fs::write(
        &cfg,
        "profile = \"polling\"\nqueue_depth = 2\nformat = \"json\"\n",
    )
    .unwrap();

    let out = exec(&["--config", s(&cfg), "simulate", "--trace", s(&trace)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["config"]["profile"], "polling");
    assert_eq!(r["config"]["queue_depth"], 2);

    let out = exec(&[
        "--config",
        s(&cfg),
        "simulate",
        "--trace",
        s(&trace),
        "--profile",
        "irq",
        "--queue-depth",
        "4",
    ]);
    let r = json(&out);
    assert_eq!(r["config"]["profile"], "irq");
    assert_eq!(r["config"]["queue_depth"], 4);

    std::fs::write(&cfg, "queue_dpeth = 2\n").unwrap();
    let out = exec(&["--config", s(&cfg), "simulate", "--trace", s(&trace)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_output_order_ignores_flag_order() {
    let dir = TempDir::new().unwrap();
    let trace = gen(&dir, "b.log", &["balanced"]);
    let run = |args: &[&str]| {
        let mut all = vec!["compare", "--trace", s(&trace), "--format", "json"];
        all.extend_from_slice(args);
        let out = exec(&all);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let keys: Vec<(String, u64)> = json(&out)["reports"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| {
                (
                    r["config"]["profile"].as_str().unwrap().to_owned(),
                    r["config"]["queue_depth"].as_u64().unwrap(),
                )
            })
            .collect();
        keys
    };
    let a = run(&[
        "--profile",
        "irq",
        "--profile",
        "optimized",
        "--queue-depth",
        "8",
        "--queue-depth",
        "1",
    ]);
    let b = run(&[
        "--queue-depth",
        "1",
        "--profile",
        "optimized",
        "--queue-depth",
        "8",
        "--profile",
        "irq",
    ]);
    let want: Vec<(String, u64)> = [("optimized", 1), ("irq", 1), ("optimized", 8), ("irq", 8)]
        .iter()
        .map(|&(p, d)| (p.to_owned(), d))
        .collect();
    assert_eq!(a, want);
    assert_eq!(b, want);

    let all = run(&[]);
    assert_eq!(all.len(), 6);
}

#[test]
fn halt_reports_where_the_run_stopped() {
    let dir = TempDir::new().unwrap();
    let trace = gen(&dir, "b.log", &["balanced", "--depth", "2", "--width", "2"]);
    let out = exec(&[
        "attack",
        "--trace",
        s(&trace),
        "--corrupt-return-at",
        "5",
        "--halt-on-violation",
        "--format",
        "json",
    ]);
    assert_eq!(code(&out), 3);
    let r = json(&out);
    assert!(r["halted"].is_object(), "{r}");
    assert!(r["slowdown"].is_null());
}

#[test]
fn text_report_uses_a_dash_for_undefined_slowdown() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.log");
    std::fs::write(&empty, "# nothing retired\n").unwrap();
    let out = exec(&["simulate", "--trace", s(&empty)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains('\u{2013}'), "{}", stdout(&out));
}
