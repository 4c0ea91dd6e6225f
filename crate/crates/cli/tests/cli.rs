use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mkedit_core::gateway::{hashed_unit_vector, FixtureEmbedder, MockScript};
use mkedit_core::kb::Language;

const ES_Q: &str = "¿Qué ciudad fue el lugar de nacimiento de Henning Löhlein?";
const EN_Q: &str = "Which city was the birthplace of Henning Löhlein?";
const EN_LOC: &str = "Who is the lead singer of Collective Soul?";

fn mkedit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkedit"))
        .current_dir(dir)
        .args(args)
        .env_remove("MKEDIT_GENERATOR_URL")
        .env_remove("MKEDIT_EMBEDDER_URL")
        .env_remove("MKEDIT_CLASSIFIER_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn table1_backend(dir: &Path) {
    let mut fx = FixtureEmbedder::new(64, 3);
    fx.insert_group(
        [ES_Q, EN_Q, "In which city was Henning Löhlein born?"],
        hashed_unit_vector("löhlein", 3, 64),
    )
    .unwrap();
    fx.save(dir.join("fixture.json")).unwrap();
    MockScript::default()
        .with_answer(Language::En, EN_Q, "Bonn")
        .with_answer(Language::En, EN_LOC, "Ed Roland")
        .save(dir.join("script.json"))
        .unwrap();
}

#[test]
fn spanish_edit_answers_english_query() {
    let dir = tempfile::tempdir().unwrap();
    table1_backend(dir.path());
    let o = mkedit(dir.path(), &["edit", "--lang", "es", "--q", ES_Q, "--a", "Munich"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let backend = ["--fixture", "fixture.json", "--script", "script.json"];
    let mut args = vec!["query", "--lang", "en", "--text", EN_Q];
    args.extend(backend);
    let o = mkedit(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains(&format!("New Fact: {ES_Q} Munich")), "{out}");
    assert!(out.contains("pre-edit answer: Bonn"), "{out}");
    assert!(out.contains("answer: Munich"), "{out}");

    let mut args = vec!["query", "--lang", "en", "--text", EN_LOC];
    args.extend(backend);
    let out = stdout(&mkedit(dir.path(), &args));
    assert!(out.contains("no knowledge retrieved"), "{out}");
    assert!(out.contains("answer: Ed Roland"), "{out}");
    assert!(dir.path().join("kb.query.config.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mkedit(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(mkedit(dir.path(), &["eval"]).status.code(), Some(1));
    assert_eq!(mkedit(dir.path(), &["query", "--lang", "xx", "--text", "a"]).status.code(), Some(1));
    // No knowledge base yet.
    assert_eq!(mkedit(dir.path(), &["query", "--lang", "en", "--text", "a"]).status.code(), Some(1));

    mkedit(dir.path(), &["edit", "--lang", "en", "--q", "Who?", "--a", "Me"]);
    let o = mkedit(
        dir.path(),
        &[
            "query", "--lang", "en", "--text", "Who?", "--backend", "http",
            "--generator-url", "http://127.0.0.1:9", "--embedder-url", "http://127.0.0.1:9",
            "--timeout-ms", "500",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_all_test_languages_and_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(mkedit(d, &["synth", "--n", "20", "--dim", "64"]).status.success());
    let backend = ["--fixture", "fixture.json", "--script", "script.json", "--latency-per-byte-us", "0"];

    let mut args = vec!["eval", "--data", "dataset.json", "--test-langs", "all", "--shots", "4"];
    args.extend(backend);
    let o = mkedit(d, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 12);
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 4);
    assert!(d.join("report.timing.json").exists());
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("report.config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["mode"], "few_bi");
    assert_eq!(snapshot["shots"], 4);

    let mut args = vec!["ablate-kb", "--data", "dataset.json", "--sizes", "2,4,6,8,10,20", "--shots", "2"];
    args.extend(backend);
    let o = mkedit(d, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ab: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ablate_kb.json")).unwrap()).unwrap();
    assert_eq!(ab["rows"].as_array().unwrap().len(), 6);

    let mut args = vec!["ablate-kb", "--data", "dataset.json", "--sizes", "10,50"];
    args.extend(backend);
    assert_eq!(mkedit(d, &args).status.code(), Some(1));
}

#[test]
fn ingest_dedups_and_replay_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    mkedit(d, &["synth", "--n", "5", "--dim", "16"]);
    let text = fs::read_to_string(d.join("dataset.json")).unwrap();
    let mut records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    let mut dup = records[1].clone();
    dup["record_id"] = "dup".into();
    records.push(dup);
    fs::write(d.join("raw.json"), serde_json::to_string(&records).unwrap()).unwrap();

    let o = mkedit(d, &["ingest", "--input", "raw.json", "--out", "clean.json", "--kb-lang", "de"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("kept 5, conflicts 1"));
    let conflicts = fs::read_to_string(d.join("clean.conflicts.json")).unwrap();
    assert!(conflicts.contains("exact-duplicate"));

    fs::remove_file(d.join("clean.json")).unwrap();
    let o = mkedit(d, &["replay", "clean.config.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("clean.json").exists());
}
