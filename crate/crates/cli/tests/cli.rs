use std::path::Path;
use std::process::{Command, Output};

fn umid_env(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_umid"));
    cmd.args(args).current_dir(dir).env_remove("UMID_SEED");
    if let Some(s) = seed {
        cmd.env("UMID_SEED", s);
    }
    cmd.output().expect("spawn umid")
}

fn umid(dir: &Path, args: &[&str]) -> Output {
    umid_env(dir, args, None)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL: [&str; 6] = ["--set", "num_members=10", "--set", "num_nonmembers=10", "--epochs", "40"];
const INV: [&str; 4] = ["--runs", "6", "--iters", "40"];

fn train(dir: &Path) {
    ok(&umid(dir, &[&["train-testbed", "--seed", "1", "--out", "tb"][..], &SMALL].concat()));
}

fn baseline(dir: &Path) {
    ok(&umid(
        dir,
        &[&["baseline", "--model", "tb/model.json", "--seed", "2", "--count", "25", "--out", "bl"][..], &INV].concat(),
    ));
}

fn audit_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    [
        &["audit", "--model", "tb/model.json", "--baseline", "bl/baseline.jsonl", "--queries", "tb/dataset.jsonl", "--seed", "3"][..],
        &INV,
        extra,
    ]
    .concat()
}

fn sha(path: &Path) -> String {
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(path.parent().unwrap().join("manifest.json")).unwrap()).unwrap();
    let name = path.file_name().unwrap().to_str().unwrap();
    m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["path"].as_str().unwrap().ends_with(name))
        .unwrap()["sha256"]
        .as_str()
        .unwrap()
        .to_string()
}

#[test]
fn train_writes_model_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path());
    let tb = tmp.path().join("tb");
    for f in ["model.json", "dataset.jsonl", "local_samples.jsonl", "manifest.json"] {
        assert!(tb.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(tb.join("manifest.json")).unwrap()).unwrap();
    let model: serde_json::Value = serde_json::from_slice(&std::fs::read(tb.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["run_id"], manifest["run_id"]);
    assert_eq!(manifest["command"], "train-testbed");
    assert_eq!(manifest["config"]["seed"], "1");
    let dataset = std::fs::read_to_string(tb.join("dataset.jsonl")).unwrap();
    assert_eq!(dataset.lines().filter(|l| l.starts_with('{')).count(), 20);
    assert!(dataset.trim_end().ends_with(manifest["run_id"].as_str().unwrap()));
}

#[test]
fn config_file_must_name_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.conf"), "# testbed\nepochs = 5\n").unwrap();
    let out = umid(tmp.path(), &["train-testbed", "--config", "c.conf", "--out", "tb"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    std::fs::write(tmp.path().join("d.conf"), "seed = 4\nnum_members = 6\nnum_nonmembers = 6\nepochs = 5\n").unwrap();
    ok(&umid(tmp.path(), &["train-testbed", "--config", "d.conf", "--out", "tb"]));
}

#[test]
fn bad_keys_and_values_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["train-testbed", "--seed", "1", "--set", "bogus=1", "--out", "x"],
        vec!["train-testbed", "--seed", "1", "--set", "epochs=many", "--out", "x"],
        vec!["train-testbed", "--seed", "1", "--set", "temperature=0", "--out", "x"],
        vec!["gen-gibberish", "--seed", "1", "--mode", "loud", "--out", "x"],
        vec!["train-testbed", "--no-such-flag"],
        vec!["verify-theory", "--seed", "1", "--set", "gamma_in=1.5", "--out", "x"],
    ] {
        assert_eq!(code(&umid(tmp.path(), &args)), 2, "{args:?}");
    }
}

#[test]
fn same_seed_same_model_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&umid(d, &[&["train-testbed", "--seed", "7", "--out", "a"][..], &SMALL].concat()));
    ok(&umid(d, &[&["train-testbed", "--seed", "7", "--out", "b"][..], &SMALL].concat()));
    ok(&umid(d, &[&["train-testbed", "--seed", "8", "--out", "c"][..], &SMALL].concat()));
    let (a, b, c) = (sha(&d.join("a/model.json")), sha(&d.join("b/model.json")), sha(&d.join("c/model.json")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(std::fs::read(d.join("a/model.json")).unwrap(), std::fs::read(d.join("b/model.json")).unwrap());
}

#[test]
fn seed_precedence_flag_over_env() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&umid_env(d, &["gen-gibberish", "--count", "5", "--out", "env"], Some("11")));
    ok(&umid(d, &["gen-gibberish", "--count", "5", "--seed", "11", "--out", "flag"]));
    ok(&umid_env(d, &["gen-gibberish", "--count", "5", "--seed", "12", "--out", "both"], Some("11")));
    let read = |p: &str| std::fs::read_to_string(d.join(p).join("gibberish.txt")).unwrap();
    let body = |s: String| s.lines().filter(|l| !l.starts_with('#')).map(String::from).collect::<Vec<_>>();
    assert_eq!(body(read("env")), body(read("flag")));
    assert_ne!(body(read("both")), body(read("flag")));
    assert_eq!(body(read("env")).len(), 5);
}

#[test]
fn audit_threshold_above_voters_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    baseline(d);
    let out = umid(d, &audit_args(&["--threshold", "5", "--out", "au"]));
    assert_eq!(code(&out), 2);
    let out = umid(d, &audit_args(&["--threshold", "0", "--out", "au"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn repeated_audit_writes_rows_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    baseline(d);
    ok(&umid(d, &audit_args(&["--repeat", "5", "--out", "au"])));
    let csv = std::fs::read_to_string(d.join("au/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 7, "{csv}");
    assert!(rows[0].starts_with("run_seed,precision,recall,accuracy"));
    assert!(rows[6].starts_with("mean±std,"));
    for k in 0..5 {
        assert!(d.join(format!("au/decisions_{k}.jsonl")).exists());
    }
    let seeds: std::collections::BTreeSet<&str> = rows[1..6].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(seeds.len(), 5);
}

#[test]
fn enhanced_audit_adds_a_fifth_vote() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    baseline(d);
    ok(&umid(d, &audit_args(&["--enhanced", "--local-samples", "tb/local_samples.jsonl", "--out", "au"])));
    let text = std::fs::read_to_string(d.join("au/decisions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["votes"].as_array().unwrap().len(), 5);
    assert!(first["R"].is_number());

    let out = umid(d, &audit_args(&["--enhanced", "--out", "au2"]));
    assert_eq!(code(&out), 2);
    let out = umid(d, &audit_args(&["--enhanced", "--local-samples", "nowhere.jsonl", "--out", "au2"]));
    assert_eq!(code(&out), 3);
}

#[test]
fn metrics_from_decisions_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let decision = |t: &str, m: bool| {
        format!(
            r#"{{"text":"{t}","S_n":0.5,"D_n2":0.2,"votes":[{m},{m},{m},false],"vote_count":{},"decision":"{}","latency_ms":1.0}}"#,
            if m { 3 } else { 0 },
            if m { "member" } else { "non-member" }
        )
    };
    let lines: Vec<String> = [("a", true), ("b", false), ("c", true), ("d", false)]
        .iter()
        .map(|(t, m)| decision(t, *m))
        .collect();
    std::fs::write(d.join("dec.jsonl"), lines.join("\n")).unwrap();
    std::fs::write(
        d.join("truth.jsonl"),
        r#"{"text":"a","is_member":true}
{"text":"b","is_member":true}
{"text":"c","is_member":false}
{"text":"d","is_member":false}
"#,
    )
    .unwrap();
    ok(&umid(d, &["metrics", "--decisions", "dec.jsonl", "--truth", "truth.jsonl", "--out", "m"]));
    let csv = std::fs::read_to_string(d.join("m/metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[1..4], &["0.500000", "0.500000", "0.500000"]);

    ok(&umid(d, &["metrics", "--decisions", "dec.jsonl", "--truth", "truth.jsonl", "--threshold", "4", "--out", "m4"]));
    let csv = std::fs::read_to_string(d.join("m4/metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[1..4], &["0.000000", "0.000000", "0.500000"]);
}

#[test]
fn missing_artifacts_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = umid(d, &[&["baseline", "--model", "missing.json", "--seed", "1", "--out", "bl"][..], &INV].concat());
    assert_eq!(code(&out), 3);
    assert_eq!(code(&umid(d, &["rerun", "--manifest", "nope/manifest.json"])), 3);
    assert_eq!(
        code(&umid(d, &["metrics", "--decisions", "none.jsonl", "--truth", "none.jsonl", "--out", "m"])),
        3
    );
}

#[test]
fn dimension_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    baseline(d);
    ok(&umid(
        d,
        &[&["train-testbed", "--seed", "1", "--set", "embed_dim=16", "--out", "other"][..], &SMALL].concat(),
    ));
    let out = umid(
        d,
        &[&["audit", "--model", "other/model.json", "--baseline", "bl/baseline.jsonl", "--queries", "tb/dataset.jsonl", "--seed", "3", "--out", "au"][..], &INV].concat(),
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rerun_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    baseline(d);
    let before = std::fs::read(d.join("bl/baseline.jsonl")).unwrap();
    let manifest_before: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("bl/manifest.json")).unwrap()).unwrap();
    std::fs::remove_file(d.join("bl/baseline.jsonl")).unwrap();
    ok(&umid(d, &["rerun", "--manifest", "bl/manifest.json"]));
    assert_eq!(std::fs::read(d.join("bl/baseline.jsonl")).unwrap(), before);
    let manifest_after: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("bl/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest_before["run_id"], manifest_after["run_id"]);
    assert_eq!(manifest_before["artifacts"], manifest_after["artifacts"]);
}

#[test]
fn theory_commands_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&umid(d, &["verify-theory", "--seed", "1", "--n", "30", "--trials", "40", "--set", "d=64", "--set", "m=8", "--out", "th"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("th/theory.json")).unwrap()).unwrap();
    assert!(report["success_rate"].as_f64().unwrap() > 0.5);
    assert!(report["run_id"].is_string());
    let csv = std::fs::read_to_string(d.join("th/theory.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 80);

    ok(&umid(d, &["verify-concentration", "--seed", "1", "--trials", "30", "--n-grid", "4,16,64", "--set", "d=64", "--set", "m=8", "--out", "co"]));
    let csv = std::fs::read_to_string(d.join("co/concentration.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert_eq!(code(&umid(d, &["verify-concentration", "--seed", "1", "--n-grid", "0,4", "--out", "co2"])), 2);
}

#[test]
fn no_separation_when_members_always_leak() {
    let tmp = tempfile::tempdir().unwrap();
    let out = umid(
        tmp.path(),
        &["verify-theory", "--seed", "2", "--n", "10", "--trials", "10", "--set", "d=64", "--set", "m=8", "--set", "leakage=1", "--out", "th"],
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("th/theory.json")).unwrap()).unwrap();
    assert_eq!(report["refused"], true);
}

#[test]
fn defense_reports_have_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train(d);
    ok(&umid(
        d,
        &[&["eval-defense", "--model", "tb/model.json", "--queries", "tb/dataset.jsonl", "--defense", "filter", "--seed", "2", "--set", "count=25", "--out", "f"][..], &INV].concat(),
    ));
    let csv = std::fs::read_to_string(d.join("f/defense.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("without,") && rows[2].starts_with("filter,"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("f/defense.json")).unwrap()).unwrap();
    assert!(report["flagged_baseline_fraction"].as_f64().unwrap() > 0.9);

    let out = umid(
        d,
        &[&["eval-defense", "--model", "tb/model.json", "--queries", "tb/dataset.jsonl", "--defense", "dp", "--epsilon", "-1", "--seed", "2", "--out", "dp"][..], &INV].concat(),
    );
    assert_eq!(code(&out), 2);
}
