use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn banditd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banditd"))
        .args(args)
        .env_remove("BANDITD_CONFIG")
        .env_remove("BANDITD_OUT")
        .env_remove("BANDITD_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = banditd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn registry() -> String {
    configs()
        .join("registry.json")
        .to_string_lossy()
        .into_owned()
}

fn world() -> String {
    configs().join("world.json").to_string_lossy().into_owned()
}

fn seeded_run(out: &Path, seed: &str) -> Value {
    let text = ok(&[
        "--config",
        &registry(),
        "--seed",
        seed,
        "run",
        "--world",
        &world(),
        "--duration",
        "4000",
        "--out",
        s(out),
    ]);
    serde_json::from_str(&text).unwrap()
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    assert_eq!(code(&banditd(&["--help"])), 0);
    assert_eq!(code(&banditd(&["--version"])), 0);
    assert_eq!(code(&banditd(&[])), 1);
    assert_eq!(code(&banditd(&["simulate", "--bogus"])), 1);
    assert_eq!(
        code(&banditd(&["replay", "--log", "x", "--policy", "greedy"])),
        1
    );

    // a command that needs --out but has none
    assert_eq!(code(&banditd(&["simulate", "--world", &world()])), 1);

    let missing = banditd(&[
        "--config",
        "/no/such/registry.json",
        "report",
        "regret",
        "--run",
        ".",
    ]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/such/registry.json"));

    let dir = tempfile::tempdir().unwrap();
    let nothing = banditd(&[
        "simulate",
        "--world",
        "/no/such/world.json",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&nothing), 2);
    assert!(String::from_utf8_lossy(&nothing.stderr).contains("/no/such/world.json"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"instances": []}"#).unwrap();
    assert_eq!(
        code(&banditd(&["--config", s(&bad), "health", "--run", "."])),
        2
    );
}

#[test]
fn seeded_runs_reproduce_manifests_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let a = seeded_run(&dir.path().join("a"), "17");
    let b = seeded_run(&dir.path().join("b"), "17");
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/manifest.json")).unwrap(),
        fs::read(dir.path().join("b/manifest.json")).unwrap()
    );
    let snaps = a["snapshots"].as_object().unwrap();
    assert_eq!(snaps.len(), 2);

    let c = seeded_run(&dir.path().join("c"), "18");
    assert_ne!(a["snapshots"], c["snapshots"]);
}

#[test]
fn manifest_decision_count_matches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let m = seeded_run(dir.path(), "5");
    let logged = m["decisions"].as_u64().unwrap();
    assert_eq!(logged, 4000);
    assert_eq!(m["pipeline"]["decisions"].as_u64().unwrap(), logged);
    assert_eq!(m["aggregated_pulls"].as_u64().unwrap(), logged);
}

#[test]
fn regret_report_recomputes_the_run_curve() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "simulate",
        "--world",
        &world(),
        "--rounds",
        "1500",
        "--out",
        s(&run),
    ]);
    let csv = ok(&["report", "regret", "--run", s(&run)]);
    assert_eq!(csv, fs::read_to_string(run.join("regret.csv")).unwrap());
}

fn decision(i: usize, t: i64, arm: &str) -> Value {
    json!({
        "decision_id": format!("d{i}"),
        "instance_id": "feed",
        "test_id": "t",
        "variant_id": "v",
        "context": {"unified": [1.0, 0.0, 1.0], "fine_len": 2},
        "arm_id": arm,
        "timestamp": t,
    })
}

#[test]
fn continuity_on_one_context_has_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("decisions.jsonl");
    let lines: Vec<String> = (0..60)
        .map(|i| decision(i, i as i64 * 1000, if i % 3 == 0 { "a" } else { "b" }).to_string())
        .collect();
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let csv = ok(&[
        "report",
        "continuity",
        "--decisions",
        s(&log),
        "--min-support",
        "10",
    ]);
    let rows: Vec<&str> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 1, "{csv}");
    assert!(rows[0].starts_with("0,0,"), "{csv}");
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[
        "simulate",
        "--world",
        &world(),
        "--rounds",
        "3000",
        "--out",
        s(&run),
    ]);
    let decisions = run.join("logs/decisions.jsonl");
    for kind in ["continuity", "stability"] {
        let mut outs = Vec::new();
        for n in 0..2 {
            let out = dir.path().join(format!("{kind}{n}.csv"));
            ok(&[
                "report",
                kind,
                "--decisions",
                s(&decisions),
                "--epsilon-ms",
                "300000",
                "--delta-ms",
                "600000",
                "--min-support",
                "5",
                "--out",
                s(&out),
            ]);
            outs.push(fs::read(out).unwrap());
        }
        assert_eq!(outs[0], outs[1], "{kind}");
        assert!(!outs[0].is_empty());
    }

    let mut reports = Vec::new();
    for n in 0..2 {
        let out = dir.path().join(format!("health{n}"));
        ok(&[
            "health",
            "--run",
            s(&run),
            "--out",
            s(&out),
            "--epsilon-ms",
            "300000",
            "--delta-ms",
            "600000",
            "--min-support",
            "5",
        ]);
        reports.push(
            [
                "health.json",
                "continuity.csv",
                "stability.csv",
                "exploitation/sim/default/control.csv",
            ]
            .map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(reports[0], reports[1]);

    // same seed, same replay log, same tuning report
    let log = dir.path().join("replay");
    ok(&[
        "simulate",
        "--world",
        &world(),
        "--rounds",
        "2000",
        "--out",
        s(&log),
        "--sim",
        s(&write_sim(dir.path())),
    ]);
    let replay_log = log.join("logs/replay.jsonl");
    let a = ok(&[
        "--seed",
        "4",
        "tune-lambda",
        "--log",
        s(&replay_log),
        "--grid",
        "0.5,1,4",
        "--mode",
        "windowed",
        "--t1-ms",
        "60000",
        "--t2-ms",
        "inf",
    ]);
    let b = ok(&[
        "--seed",
        "4",
        "tune-lambda",
        "--log",
        s(&replay_log),
        "--grid",
        "0.5,1,4",
        "--mode",
        "windowed",
        "--t1-ms",
        "60000",
        "--t2-ms",
        "inf",
    ]);
    assert_eq!(a, b);
}

fn write_sim(dir: &Path) -> PathBuf {
    let p = dir.join("sim.json");
    fs::write(&p, json!({"explore_fraction": 0.5}).to_string()).unwrap();
    p
}

#[test]
fn close_and_train_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path();
    let base = ["--config", &registry(), "--out", s(state)];
    let train = |now: &str| -> Vec<Value> {
        let mut args = base.to_vec();
        args.extend(["train", "--now-ms", now]);
        ok(&args)
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };

    let first = train("1000");
    assert_eq!(first.len(), 2);
    assert!(first.iter().all(|l| l["model_version"].as_u64().is_some()));

    // a redelivered cycle publishes nothing new
    assert_eq!(train("1000"), first);

    let mut args = base.to_vec();
    args.extend(["close-window", "--now-ms", "2000"]);
    let closed: Vec<Value> = ok(&args)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(closed.len(), 2);

    let second = train("3000");
    for (a, b) in first.iter().zip(&second) {
        assert!(b["model_version"].as_u64() > a["model_version"].as_u64());
        assert_eq!(b["consumed_windows"], json!([0]));
    }
}
