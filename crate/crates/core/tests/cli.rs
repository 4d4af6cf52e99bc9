//! The `medclaim` binary: subcommands and exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_medclaim");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn medclaim<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn corpus() -> PathBuf {
    fixture("synthetic/corpus.jsonl")
}

fn gazetteer() -> String {
    format!("gazetteer:{}", fixture("synthetic/gazetteer.tsv").display())
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(medclaim(["bogus"]).status.code(), Some(1));
    assert_eq!(medclaim(["extract"]).status.code(), Some(1));
    assert_eq!(medclaim(Vec::<&str>::new()).status.code(), Some(1));
    assert_eq!(medclaim(["--help"]).status.code(), Some(0));
    assert_eq!(medclaim(["--version"]).status.code(), Some(0));
}

#[test]
fn bad_input_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c.jsonl");
    let missing = Command::new(BIN)
        .args(["extract", "--corpus", "/nonexistent/corpus.jsonl", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let bad_mode = Command::new(BIN)
        .args(["extract", "--mode", "weird", "--corpus"])
        .arg(corpus())
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(bad_mode.status.code(), Some(1));
    assert!(stderr(&bad_mode).contains("weird"));

    let broken = tmp.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"a\", \"text\": \"x\", \"entities\": [{\"start\": 0, \"end\": 9, \"label\": \"Treatment\", \"surface\": \"x\"}]}\n").unwrap();
    let invalid = Command::new(BIN)
        .args(["extract", "--corpus"])
        .arg(&broken)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(1), "{}", stderr(&invalid));
}

#[test]
fn extract_select_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cands = tmp.path().join("c.jsonl");
    let claims = tmp.path().join("s.jsonl");
    let verdicts = tmp.path().join("v.jsonl");
    let out = Command::new(BIN)
        .args(["extract", "--entities", &gazetteer(), "--corpus"])
        .arg(corpus())
        .arg("--out")
        .arg(&cands)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&cands).unwrap().lines().count(), 20);

    let out = Command::new(BIN)
        .args(["select", "--corpus"])
        .arg(corpus())
        .arg("--candidates")
        .arg(&cands)
        .arg("--out")
        .arg(&claims)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let claim_lines = std::fs::read_to_string(&claims).unwrap();
    assert_eq!(claim_lines.lines().count(), 16);
    assert!(claim_lines.contains("aspirin cures headaches"));

    let out = Command::new(BIN)
        .args(["check", "--corpus"])
        .arg(corpus())
        .arg("--claims")
        .arg(&claims)
        .arg("--out")
        .arg(&verdicts)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let score: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(score["f1"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::read_to_string(&verdicts).unwrap().lines().count(), 16);

    let table = medclaim([
        "report".to_string(),
        "--results".into(),
        format!("toy:core_claim={}", verdicts.display()),
        "--results".into(),
        format!("toy:full={}", verdicts.display()),
        "--baseline".into(),
        "full".into(),
    ]);
    assert!(table.status.success(), "{}", stderr(&table));
    let text = stdout(&table);
    assert!(text.starts_with("# baseline: full\n"));
    assert!(text.contains("core_claim.delta"));
}

#[test]
fn failing_scorer_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cands = tmp.path().join("c.jsonl");
    let out = Command::new(BIN)
        .args(["extract", "--corpus"])
        .arg(corpus())
        .arg("--out")
        .arg(&cands)
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(BIN)
        .args(["select", "--scorer", "cmd:false", "--corpus"])
        .arg(corpus())
        .arg("--candidates")
        .arg(&cands)
        .arg("--out")
        .arg(tmp.path().join("s.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("protocol error"));
}

#[test]
fn ner_eval_modes() {
    let strict = Command::new(BIN)
        .args(["ner-eval", "--pred", &gazetteer(), "--corpus"])
        .arg(corpus())
        .output()
        .unwrap();
    assert!(strict.status.success(), "{}", stderr(&strict));
    let score: serde_json::Value = serde_json::from_str(&stdout(&strict)).unwrap();
    assert_eq!(score["macro_avg"]["f1"], 1.0);

    let mapped = Command::new(BIN)
        .args(["ner-eval", "--mode", "relaxed", "--pred", &gazetteer(), "--scheme"])
        .arg(fixture("bear_scheme.txt"))
        .arg("--corpus")
        .arg(corpus())
        .output()
        .unwrap();
    assert!(mapped.status.success(), "{}", stderr(&mapped));
    let score: serde_json::Value = serde_json::from_str(&stdout(&mapped)).unwrap();
    let classes: Vec<&str> = score["evaluated_classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    assert!(classes.contains(&"med_C") && !classes.contains(&"Symptom/Side-effect"));

    let bad = Command::new(BIN)
        .args(["ner-eval", "--mode", "fuzzy", "--pred", &gazetteer(), "--corpus"])
        .arg(corpus())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn link_from_args_and_stdin() {
    let kb = fixture("table1_kb.jsonl");
    let out = Command::new(BIN)
        .arg("link")
        .arg("--kb")
        .arg(&kb)
        .args(["medicines", "VTE", "qqq"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["normalized"], "pharmaceutical preparations");
    assert_eq!(lines[1]["candidates"][0]["concept_id"], "T3");
    assert_eq!(lines[2]["candidates"].as_array().unwrap().len(), 0);

    let mut child = Command::new(BIN)
        .arg("link")
        .arg("--kb")
        .arg(&kb)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"blood clots\n\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("\"normalized\":\"thrombus\""));
}

#[test]
fn link_sweep_reports_coverage() {
    let out = Command::new(BIN)
        .arg("link")
        .arg("--kb")
        .arg(fixture("synthetic/kb.jsonl"))
        .arg("--corpus")
        .arg(corpus())
        .args(["--sweep", "0.5,0.9"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<Vec<String>> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    let linked: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(linked[0] >= linked[1]);
}

#[test]
fn report_compare_and_check_table() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = tmp.path().join("counts.json");
    let out = Command::new(BIN)
        .args(["report", "--compare"])
        .arg(fixture("healthver_gold_entities.jsonl"))
        .arg(fixture("healthver_ner_core_claim.jsonl"))
        .arg("--counts-out")
        .arg(&counts)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("unchanged 161, shifted 90"));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&counts).unwrap()).unwrap();
    assert_eq!(saved["shifted"], 90);

    let ok = Command::new(BIN)
        .args(["report", "--check-table"])
        .arg(fixture("tables/table3.tsv"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let off = Command::new(BIN)
        .args(["report", "--check-table"])
        .arg(fixture("tables/table2.tsv"))
        .output()
        .unwrap();
    assert_eq!(off.status.code(), Some(1));
    assert!(stdout(&off).contains("FAIL\taverage\taverage\tner_core_claim.R"));
}

#[test]
fn run_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = Command::new(BIN)
        .arg("run")
        .arg("--config")
        .arg(fixture("synthetic/run.conf"))
        .arg("--output")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["claims_emitted"], 16);
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 7);

    let broken = tmp.path().join("bad.conf");
    std::fs::write(&broken, "corpus = x.jsonl\noutput = o\nmystery = 1\n").unwrap();
    let out = Command::new(BIN)
        .arg("run")
        .arg("--config")
        .arg(&broken)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mystery"));
}

#[test]
fn run_with_failing_scorer_from_env_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .env("MEDCLAIM_SCORER", "cmd:false")
        .arg("run")
        .arg("--config")
        .arg(fixture("synthetic/run.conf"))
        .arg("--output")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
