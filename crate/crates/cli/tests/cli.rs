use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn geotrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geotrace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small() -> String {
    root().join("scenarios/small.toml").display().to_string()
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let (scenario, out) = (small(), dir.display().to_string());
    let mut args = vec!["run", "--scenario", &scenario, "--out", &out];
    args.extend_from_slice(extra);
    geotrace(&args)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_report.json")).unwrap()).unwrap()
}

fn audit_args(dir: &Path) -> Vec<String> {
    vec![
        "audit".into(),
        "--evidence".into(),
        dir.join("evidence.jsonl").display().to_string(),
        "--itpa".into(),
        dir.join("itpa.jsonl").display().to_string(),
        "--registry".into(),
        dir.join("registry.json").display().to_string(),
    ]
}

fn run_args(args: &[String]) -> Output {
    geotrace(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn same_seed_same_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run_into(&a, &["--seed", "7"])), 0);
    assert_eq!(code(&run_into(&b, &["--seed", "7", "--threads", "3"])), 0);
    assert_eq!(report(&a)["transcript_digest"], report(&b)["transcript_digest"]);
    assert_eq!(
        fs::read(a.join("transcript.jsonl")).unwrap(),
        fs::read(b.join("transcript.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("run_report.json")).unwrap(),
        fs::read(b.join("run_report.json")).unwrap()
    );
}

#[test]
fn reports_validate_against_schema() {
    let schema: Value =
        serde_json::from_str(&fs::read_to_string(root().join("schemas/run_report.schema.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let tmp = tempfile::tempdir().unwrap();
    for (name, adversary) in [("honest", "none"), ("both", "both")] {
        let dir = tmp.path().join(name);
        run_into(&dir, &["--adversary", adversary]);
        let r = report(&dir);
        let errors: Vec<String> = validator.iter_errors(&r).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
    }
    let mut broken = report(&tmp.path().join("honest"));
    broken["rounds"][0]["m"] = Value::from(-1);
    assert!(!validator.is_valid(&broken));
}

#[test]
fn audit_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let honest = tmp.path().join("honest");
    let attack = tmp.path().join("attack");
    assert_eq!(code(&run_into(&honest, &[])), 0);
    assert_eq!(code(&run_into(&attack, &["--adversary", "ha-targeted"])), 3);

    let out = run_args(&audit_args(&honest));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let clean: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(clean["violations"].as_array().unwrap().len(), 0);
    assert_eq!(clean["coverage_findings"].as_array().unwrap().len(), 0);

    let out = run_args(&audit_args(&attack));
    assert_eq!(code(&out), 3);
    let flagged: Value = serde_json::from_slice(&out.stdout).unwrap();
    let target = &report(&attack)["attacks"]["ha_targeted"]["target"];
    assert_eq!(flagged["violations"].as_array().unwrap().len(), 1);
    assert_eq!(&flagged["violations"][0]["user_id"], target);

    // Tamper with the signed request bytes of the first evidence line.
    let path = honest.join("evidence.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let env = first["envelope"].as_str().unwrap();
    let flipped = if env.as_bytes()[40] == b'A' { "B" } else { "A" };
    first["envelope"] = Value::from(format!("{}{}{}", &env[..40], flipped, &env[41..]));
    let rest: Vec<&str> = text.lines().skip(1).collect();
    fs::write(&path, format!("{first}\n{}\n", rest.join("\n"))).unwrap();
    let out = run_args(&audit_args(&honest));
    assert_eq!(code(&out), 2);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report["integrity_errors"].as_array().unwrap().is_empty());
}

#[test]
fn targeted_run_reports_violation_and_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &["--adversary", "ha-targeted"]);
    assert_eq!(code(&out), 3);
    let r = report(tmp.path());
    let attack = &r["attacks"]["ha_targeted"];
    assert_eq!(attack["covers_expected"], Value::Bool(true));
    assert_eq!(attack["placements"].as_array().unwrap().len(), 2);
    let violations: Vec<&Value> = r["audits"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|a| a["report"]["violations"].as_array().unwrap())
        .collect();
    assert_eq!(violations.len(), 1);
    assert_eq!(violations[0]["user_id"], attack["target"]);
    assert!(violations[0]["evidence_refs"].as_array().unwrap().len() >= 2);
}

#[test]
fn replay_verifies_and_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    run_into(tmp.path(), &[]);
    let transcript = tmp.path().join("transcript.jsonl");
    let registry = tmp.path().join("registry.json");
    let args = |t: &Path| {
        vec![
            "replay".to_string(),
            "--transcript".into(),
            t.display().to_string(),
            "--registry".into(),
            registry.display().to_string(),
        ]
    };
    assert_eq!(code(&run_args(&args(&transcript))), 0);
    let text = fs::read_to_string(&transcript).unwrap();
    let dropped: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let gap = tmp.path().join("gap.jsonl");
    fs::write(&gap, dropped).unwrap();
    assert_eq!(code(&run_args(&args(&gap))), 2);
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "population = 150\nlp_coverage = 1.5\n").unwrap();
    let out = geotrace(&["run", "--scenario", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    fs::write(&bad, "populaton = 150\n").unwrap();
    assert_eq!(code(&geotrace(&["run", "--scenario", bad.to_str().unwrap()])), 1);

    assert_eq!(code(&geotrace(&["run", "--scenario", "/nonexistent/x.toml"])), 1);
    assert_eq!(code(&geotrace(&["run", "--lp-coverage", "Atlantis", "--days", "1"])), 1);
}

#[test]
fn coverage_accepts_country_names() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &["--lp-coverage", "Spain", "--days", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let c = report(tmp.path())["scenario"]["lp_coverage"].as_f64().unwrap();
    assert!((c - 0.6205).abs() < 1e-9);
}

#[test]
fn repeat_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &["--seed", "10", "--repeat", "2", "--days", "1"]);
    assert_eq!(code(&out), 0);
    for seed in [10, 11] {
        let r = report(&tmp.path().join(format!("seed-{seed}")));
        assert_eq!(r["scenario"]["seed"], Value::from(seed));
    }
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn world_export_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = geotrace(&["world", "--scenario", &small(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let pois = fs::read_to_string(tmp.path().join("pois.csv")).unwrap();
    let traces = fs::read_to_string(tmp.path().join("traces.csv")).unwrap();
    assert!(pois.lines().count() > 1);
    assert!(traces.lines().count() > 140);
    assert_eq!(pois.lines().filter(|l| l.starts_with("id,")).count(), 1);
}
