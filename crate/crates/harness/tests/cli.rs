use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DATASET: &str = r#"{"example_id":"b","topic":"husky","turns":[{"speaker":"apprentice","text":"I love huskies."},{"speaker":"wizard","text":"Are they fast?"}],"gold_knowledge":"Huskies are fast sled dogs","gold_response":"Yes, huskies are fast sled dogs."}
{"example_id":"a","turns":[{"speaker":"user","text":"When did the dallas cowboys win their last playoff game?"}],"gold_answers":["2014"]}
{"example_id":"c","topic":"food","turns":[{"speaker":"apprentice","text":"Pizza from Naples is the best."}],"gold_knowledge":"Pizza originated in Naples","gold_response":"Naples is where pizza started."}
"#;

fn k2r(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_k2r"))
        .current_dir(dir)
        .args(args)
        .env_remove("K2R_SEED")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("data.jsonl"), DATASET).unwrap();
    dir
}

const EVAL: &[&str] = &[
    "eval",
    "--dataset",
    "data.jsonl",
    "--knowledge-backend",
    "template:2014",
    "--response-backend",
    "template:It was in {k}.",
    "--report",
    "report.json",
];

#[test]
fn eval_writes_json_and_csv() {
    let dir = setup();
    let out = k2r(dir.path(), EVAL);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["examples"], 3);
    assert_eq!(report["config"]["seed"], 0);
    assert_eq!(report["per_example"][0]["example_id"], "a");
    assert_eq!(report["per_example"][0]["ap"], 1.0);
    assert_eq!(report["counts"]["ap"]["evaluated"], 1);
    assert_eq!(report["counts"]["ap"]["skipped"], 2);
    assert!(report["per_example"][1]["rf1"].is_number());
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("example_id,f1,kf1,pkf1,rf1,bleu4,rougeL,ap,gap\na,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn seed_env_fallback_is_echoed() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_k2r"))
        .current_dir(dir.path())
        .args(EVAL)
        .env("K2R_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 77);
}

#[test]
fn exit_codes() {
    let dir = setup();
    assert_eq!(k2r(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(
        k2r(dir.path(), &["eval", "--dataset", "data.jsonl"])
            .status
            .code(),
        Some(1)
    );
    let mut bad_conf = EVAL.to_vec();
    bad_conf.extend(["--confidence", "11"]);
    assert_eq!(k2r(dir.path(), &bad_conf).status.code(), Some(1));

    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let mut empty = EVAL.to_vec();
    empty[2] = "empty.jsonl";
    let out = k2r(dir.path(), &empty);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty dataset"));

    let mut missing = EVAL.to_vec();
    missing[2] = "nope.jsonl";
    assert_eq!(k2r(dir.path(), &missing).status.code(), Some(2));

    let down = [
        "eval",
        "--dataset",
        "data.jsonl",
        "--knowledge-backend",
        r#"{"kind":"http","params":{"endpoint":"http://127.0.0.1:9/","timeout_secs":"2"}}"#,
        "--response-backend",
        "echo",
        "--report",
        "down.json",
    ];
    let out = k2r(dir.path(), &down);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("down.json")).unwrap()).unwrap();
    assert_eq!(report["failures"].as_array().unwrap().len(), 3);
    assert_eq!(report["failures"][0]["step"], "knowledge");
}

#[test]
fn sweep_writes_one_report_per_level() {
    let dir = setup();
    let mut args = EVAL.to_vec();
    args[0] = "sweep";
    args.extend(["--levels", "0,10"]);
    let out = k2r(dir.path(), &args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let read = |name: &str| -> Value {
        serde_json::from_slice(&std::fs::read(dir.path().join(name)).unwrap()).unwrap()
    };
    let (low, high) = (read("report.conf-0.json"), read("report.conf-10.json"));
    assert_eq!(low["config"]["k2r"]["confidence"], 0);
    assert_eq!(high["config"]["k2r"]["confidence"], 10);
    // template responses ignore the confidence token
    assert_eq!(low["per_example"], high["per_example"]);
    let summary = read("report.json");
    assert_eq!(summary["levels"].as_array().unwrap().len(), 2);
    assert_eq!(summary["levels"][1]["report"], "report.conf-10.json");

    args.pop();
    args.push("0,11");
    assert_eq!(k2r(dir.path(), &args).status.code(), Some(1));
}

#[test]
fn build_train_is_deterministic() {
    let dir = setup();
    let run = |out: &str| {
        let o = k2r(
            dir.path(),
            &[
                "build-train",
                "--dataset",
                "data.jsonl",
                "--mode",
                "confidence",
                "--out",
                out,
                "--seed",
                "3",
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let first = run("t1.jsonl");
    assert_eq!(first, run("t2.jsonl"));
    let rows: Vec<Value> = first
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // "a" has no gold knowledge and is skipped; b and c give two examples each
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["task"], "knowledge");
    assert_eq!(rows[1]["task"], "response");
    assert!(rows[1]["confidence_token"].is_u64());

    let o = k2r(
        dir.path(),
        &[
            "build-train",
            "--dataset",
            "data.jsonl",
            "--mode",
            "unsupervised",
            "--out",
            "u.jsonl",
        ],
    );
    assert!(o.status.success());
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["examples"], 4);
    assert_eq!(stats["skipped"]["missing-gold-response"], 1);
}

#[test]
fn forge_writes_episodes_and_audit() {
    let dir = setup();
    let out = k2r(
        dir.path(),
        &[
            "forge",
            "--dataset",
            "data.jsonl",
            "--summarizer",
            "template:{last}",
            "--question-generator",
            "template:What about {k}?",
            "--qa",
            "echo",
            "--out",
            "qa.jsonl",
            "--audit",
            "audit.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    let records: Vec<Value> = audit
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(stats["candidates"], records.len());
    // an echoing QA model never reproduces a bare candidate
    assert!(records
        .iter()
        .all(|r| r["kept"] == false && r["drop_reason"] == "qa-mismatch"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("qa.jsonl")).unwrap(),
        ""
    );
}
