use std::path::Path;

use hipt::bench::parse_report_csv;
use hipt::cli::{run, EXIT_BUDGET, EXIT_OK, EXIT_USAGE};

fn hipt(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("hipt").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = hipt(args);
    assert_eq!(code, EXIT_OK, "hipt {}: {out}{err}", args.join(" "));
    out
}

fn only_run_dir(dir: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.join("report.csv").is_file()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn smoke_pipeline_through_every_command() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    std::fs::write(
        tmp.path().join("short.json"),
        r#"{"curriculum": {"stage_a_steps": 2, "stage_b_steps": 2, "patch_batch": 4, "small_region_batch": 2, "large_region_batch": 2, "slide_batch": 1},
            "adaptation": {"clam": {"epochs": 3}, "linear": {"epochs": 10}},
            "protocols": ["CLAM", "LINEAR"]}"#,
    )
    .unwrap();
    let cfg = p("short.json");

    ok(&["gen-data", "--preset", "smoke", "--out", &p("data")]);
    let out = ok(&["pretrain", "--config", &cfg, "--data", &p("data"), "--out", &p("model")]);
    assert!(out.starts_with("4 steps"), "{out}");
    let metrics = std::fs::read_to_string(tmp.path().join("model/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    ok(&["extract-features", "--model", &p("model"), "--data", &p("data"), "--out", &p("features")]);

    ok(&["adapt", "--config", &cfg, "--model", &p("model"), "--features", &p("features"), "--protocol", "linear", "--out", &p("adapt")]);
    let scores = std::fs::read_to_string(tmp.path().join("adapt/scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("slide_id,task_id,score,label"));
    assert_eq!(scores.lines().count(), 1 + 8);

    let eval = |workers: &str, out: &str| {
        ok(&["eval", "--config", &cfg, "--model", &p("model"), "--features", &p("features"), "--workers", workers, "--out", &p(out)]);
        only_run_dir(&tmp.path().join(out))
    };
    let one = eval("1", "eval1");
    let three = eval("3", "eval3");
    assert_eq!(one.file_name(), three.file_name());
    let report = std::fs::read(one.join("report.csv")).unwrap();
    assert_eq!(report, std::fs::read(three.join("report.csv")).unwrap());
    let rows = parse_report_csv(std::str::from_utf8(&report).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 4);
    for f in ["summary.json", "radar.json", "config.json"] {
        assert!(one.join(f).is_file(), "{f}");
    }

    let summary = ok(&["report", "--input", &one.to_string_lossy(), "--out", &p("resummarised")]);
    assert!(summary.contains("average CLAM"), "{summary}");
    assert_eq!(
        std::fs::read(tmp.path().join("resummarised/report.csv")).unwrap(),
        report
    );

    let (code, _, err) = hipt(&["pretrain", "--config", &cfg, "--data", &p("data"), "--out", &p("tight"), "--checkpoint", "region", "--mem-budget", "1M"]);
    assert_eq!(code, EXIT_BUDGET, "{err}");
    assert!(err.contains("minimum feasible budget"), "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope").to_string_lossy().into_owned();
    for args in [
        vec!["pretrain"],
        vec!["pretrain", "--data", missing.as_str()],
        vec!["eval", "--model", missing.as_str()],
        vec!["gen-data", "--preset", "huge"],
        vec!["adapt", "--protocol", "svm"],
        vec!["frobnicate"],
        vec!["verify", "--workers", "0"],
        vec!["report", "--input", tmp.path().to_str().unwrap()],
    ] {
        let (code, _, _) = hipt(&args);
        assert_eq!(code, EXIT_USAGE, "{args:?}");
    }
    let (code, out, _) = hipt(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("gen-data") && out.contains("extract-features"));
}

#[test]
fn verify_passes() {
    let out = ok(&["verify"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.contains("PASS grad/clam/loss"));
}

#[test]
fn print_config_reflects_flags() {
    let out = ok(&["eval", "--print-config", "--seed", "9", "--protocol", "linear", "--checkpoint", "stage"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["curriculum"]["seed"], 9);
    assert_eq!(v["protocols"], serde_json::json!(["LINEAR"]));
    assert_eq!(v["curriculum"]["policy"]["mode"], "PER_STAGE");
}
