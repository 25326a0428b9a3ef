use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"corpus": {"size": 6}, "max_new": 10}"#;

fn bench(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_free-bench"))
        .args(args)
        .current_dir(dir)
        .env_remove("FREE_DECODE_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

#[test]
fn help_and_version_succeed() {
    let dir = setup();
    let out = bench(&["sweep", "--help"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("normalized_latency,state_copied"), "{text}");
    assert_eq!(code(&bench(&["--version"], dir.path())), 0);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"analyses": ["nope"]}"#).unwrap();
    for args in [
        &["frobnicate"][..],
        &["sweep", "--config", "missing.json"],
        &["sweep", "--config", "small.json", "--policy", "fast"],
        &["analyze", "--config", "bad.json"],
        &["sweep", "--config", "small.json", "--shallow-depth", "9"],
        &["sweep", "--config", "small.json", "--max-new", "0"],
    ] {
        let out = bench(args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn data_errors_exit_with_two() {
    let dir = setup();
    std::fs::write(
        dir.path().join("corpus.jsonl"),
        "{\"id\":\"r1\",\"prompt\":[1,99],\"reference\":[2]}\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"corpus": {"path": "corpus.jsonl"}}"#).unwrap();
    let out = bench(&["sweep", "--config", "cfg.json"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("r1"));

    std::fs::write(dir.path().join("weights.json"), r#"{"model": {"weights": "none.bin"}}"#).unwrap();
    assert_eq!(code(&bench(&["sweep", "--config", "weights.json"], dir.path())), 2);
}

#[test]
fn generated_files_feed_a_sweep() {
    let dir = setup();
    let gen = |cmd: &str| bench(&[cmd, "--config", "small.json", "--out-dir", "gen"], dir.path());
    assert_eq!(code(&gen("gen-weights")), 0);
    assert_eq!(code(&gen("gen-corpus")), 0);
    let cfg = r#"{"model": {"weights": "gen/weights.bin"}, "corpus": {"path": "gen/corpus.jsonl"}, "max_new": 10}"#;
    std::fs::write(dir.path().join("files.json"), cfg).unwrap();

    let out = bench(
        &["sweep", "--config", "files.json", "--out-dir", "a", "--policy", "shallow_deep", "--lambda", "0.5,1.1"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().last().unwrap().starts_with("shallow_deep,1.100000,1.000000,"), "{csv}");

    let out = bench(&["sweep", "--config", "small.json", "--out-dir", "b", "--policy", "shallow_deep", "--lambda", "0.5,1.1"], dir.path());
    assert_eq!(code(&out), 0);
    let same = std::fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap();
    assert_eq!(csv, same);
}

#[test]
fn adaptive_and_analyze_write_reports() {
    let dir = setup();
    let out = bench(&["adaptive", "--config", "small.json", "--out-dir", "r"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["adaptive.json", "adaptive_trajectory.csv", "estimator.txt", "adaptive_traces.jsonl"] {
        assert!(dir.path().join("r").join(f).is_file(), "{f}");
    }
    let traj = std::fs::read_to_string(dir.path().join("r/adaptive_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 7);

    let out = bench(&["analyze", "--config", "small.json", "--out-dir", "r", "--lambda", "0.5"], dir.path());
    assert_eq!(code(&out), 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/analysis.json")).unwrap()).unwrap();
    assert_eq!(json["spd_vs_sc"].as_array().unwrap().len(), 1);
}

#[test]
fn thread_cap_from_environment() {
    let dir = setup();
    let run = |threads: Option<&str>, out_dir: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_free-bench"));
        cmd.args(["sweep", "--config", "small.json", "--policy", "conventional", "--lambda", "0.5"])
            .args(["--out-dir", out_dir])
            .current_dir(dir.path())
            .env_remove("FREE_DECODE_THREADS");
        if let Some(t) = threads {
            cmd.env("FREE_DECODE_THREADS", t);
        }
        cmd.output().unwrap()
    };
    assert_eq!(code(&run(Some("zero"), "x")), 1);
    assert_eq!(code(&run(Some("0"), "x")), 1);
    assert_eq!(code(&run(Some("1"), "one")), 0);
    assert_eq!(code(&run(None, "any")), 0);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("sweep.csv")).unwrap();
    assert_eq!(read("one"), read("any"));
}
