use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mkedit_core::eval::{
    ablate_kb_size, ablate_shots, measure_latency, run_matrix_with_progress, EvalConfig,
    LatencySetting, RetrievedFact,
};
use mkedit_core::kb::{
    deduplicate, ingest_mzsre, write_mzsre, EntryId, KnowledgeBase, KnowledgeEntry, Language,
    ParallelRecord,
};
use mkedit_core::pipeline::{answer_query, answer_unedited, Backends, PipelineConfig, StageTimings};
use mkedit_core::prompting::PromptMode;
use mkedit_core::retrieval::{retrieval_accuracy, AccuracyReport, Probe};
use mkedit_core::synthetic::{mirrored_fixture, mock_script, synthetic_dataset};

use crate::config::{sibling, RunConfig};
use crate::{backends, Command, DataArgs};

pub fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a, argv),
        Command::Edit(a) => edit(a, argv),
        Command::Query(a) => query(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::AblateKb(a) => ablate_kb(a, argv),
        Command::AblateShots(a) => ablate_shot_counts(a, argv),
        Command::RetrieverAcc(a) => retriever_acc(a, argv),
        Command::BenchLatency(a) => bench_latency(a, argv),
        Command::Serve(a) => crate::server::serve(a, argv),
        Command::Synth(a) => synth(a, argv),
        Command::Replay(a) => replay(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// Loads a dataset, dropping duplicates with a warning.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Vec<ParallelRecord>> {
    let records = ingest_mzsre(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let (mut kept, conflicts) = deduplicate(records);
    if !conflicts.is_empty() {
        eprintln!(
            "warning: {} duplicate records in {} ignored; run `mkedit ingest` first",
            conflicts.len(),
            path.display()
        );
    }
    if let Some(n) = limit {
        if n == 0 || n > kept.len() {
            bail!("--limit {n} must be between 1 and the dataset's {} records", kept.len());
        }
        kept.truncate(n);
    }
    Ok(kept)
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    if !path.exists() {
        bail!("knowledge base {} not found; add facts with `mkedit edit`", path.display());
    }
    KnowledgeBase::load(path).with_context(|| format!("reading knowledge base {}", path.display()))
}

fn load_or_new_kb(path: &Path) -> Result<KnowledgeBase> {
    if path.exists() {
        load_kb(path)
    } else {
        Ok(KnowledgeBase::new())
    }
}

fn load_pool(data: &DataArgs) -> Result<Option<Vec<ParallelRecord>>> {
    data.pool.as_deref().map(|p| load_dataset(p, None)).transpose()
}

fn ingest(a: crate::IngestArgs, argv: &[String]) -> Result<()> {
    let records = ingest_mzsre(&a.input).with_context(|| format!("ingesting {}", a.input.display()))?;
    let total = records.len();
    let (kept, conflicts) = deduplicate(records);
    write_mzsre(&a.out, &kept).with_context(|| format!("writing {}", a.out.display()))?;
    let conflicts_path = sibling(&a.out, "conflicts.json");
    write_json(&conflicts_path, &conflicts)?;
    println!("read {total} records: kept {}, conflicts {}", kept.len(), conflicts.len());
    for c in &conflicts {
        println!("  {} duplicates {} ({})", c.record_id, c.kept_record_id, serde_json::to_value(c.reason)?.as_str().unwrap_or("?"));
    }
    let mut snapshot = RunConfig::new("ingest", argv).input("input", a.input.display());
    let mut outputs: Vec<PathBuf> = vec![a.out.clone(), conflicts_path];
    if let Some(lang) = a.kb_lang {
        let mut kb = load_or_new_kb(&a.kb)?;
        for r in &kept {
            let b = r.get(lang);
            kb.upsert_fact(lang, &b.question, &b.answer)?;
        }
        kb.save(&a.kb)?;
        println!("knowledge base {} now holds {} facts", a.kb.display(), kb.len());
        outputs.push(a.kb.clone());
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    snapshot.write(&sibling(&a.out, "config.json"), &refs)?;
    Ok(())
}

fn edit(a: crate::EditArgs, argv: &[String]) -> Result<()> {
    let mut kb = load_or_new_kb(&a.kb)?;
    if let Some(id) = a.remove {
        let removed = kb
            .remove(EntryId(id))
            .with_context(|| format!("no fact with id {id}"))?;
        println!("removed #{} [{}] {}", removed.id, removed.lang, removed.question);
    } else {
        let (lang, q, ans) = match (a.lang, &a.question, &a.answer) {
            (Some(l), Some(q), Some(ans)) => (l, q, ans),
            _ => bail!("--lang, --q and --a are required"),
        };
        let (id, replaced) = kb.upsert_fact(lang, q, ans)?;
        println!("{} #{id} [{lang}] {q} -> {ans}", if replaced { "replaced" } else { "added" });
    }
    kb.save(&a.kb)?;
    RunConfig::new("edit", argv).write(&sibling(&a.kb, "edit.config.json"), &[&a.kb])?;
    Ok(())
}

/// What one probe of the knowledge base shows: the retrieved fact (if any),
/// the prompt, and the answers before and after editing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeView {
    pub query: String,
    pub test_lang: Language,
    pub mode: PromptMode,
    pub shots: usize,
    pub retrieved: Option<RetrievedFact>,
    pub prompt: String,
    pub pre_edit_answer: String,
    pub answer: String,
    pub timings: StageTimings,
}

pub fn probe(
    text: &str,
    test_lang: Language,
    edit_lang: Option<Language>,
    kb: &[KnowledgeEntry],
    pool: &[&ParallelRecord],
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<ProbeView, mkedit_core::pipeline::PipelineError> {
    let (pre_edit_answer, _) = answer_unedited(text, backends.generator.as_ref(), config.max_new_tokens)?;
    let run = answer_query(text, test_lang, edit_lang, kb, pool, config, backends)?;
    Ok(ProbeView {
        query: text.to_string(),
        test_lang,
        mode: config.mode,
        shots: config.shots,
        retrieved: run.retrieved.map(|r| RetrievedFact {
            id: r.entry.id,
            question: r.entry.question,
            answer: r.entry.answer,
            probability: r.decision.probability,
        }),
        prompt: run.prompt.text,
        pre_edit_answer,
        answer: run.answer,
        timings: run.timings,
    })
}

fn query(a: crate::QueryArgs, argv: &[String]) -> Result<()> {
    let kb = load_kb(&a.kb)?;
    let pool_records = match &a.pool {
        Some(p) => load_dataset(p, None)?,
        None => Vec::new(),
    };
    let config = a.prompt.resolve(a.pool.is_some());
    let mut snapshot = RunConfig::new("query", argv)
        .pipeline(&config)
        .backend(&a.backend)
        .input("kb", a.kb.display())
        .input("lang", a.lang)
        .input("text", &a.text);
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let pool: Vec<&ParallelRecord> = pool_records.iter().collect();
    let view = probe(&a.text, a.lang, a.edit_lang, kb.entries(), &pool, &config, &backends)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&view)?);
    } else {
        match &view.retrieved {
            Some(r) => println!(
                "retrieved: #{} {} -> {} (p={:.4})",
                r.id, r.question, r.answer, r.probability
            ),
            None => println!("retrieved: none (no knowledge retrieved)"),
        }
        println!("prompt:\n{}", view.prompt);
        println!("pre-edit answer: {}", view.pre_edit_answer);
        println!("answer: {}", view.answer);
    }
    snapshot.write(&sibling(&a.kb, "query.config.json"), &[])?;
    Ok(())
}

fn eval_config(config: PipelineConfig, backend: &crate::config::BackendArgs, concurrency: usize) -> EvalConfig {
    EvalConfig {
        pipeline: config,
        scorer: backend.scorer_config(),
        concurrency,
    }
}

fn eval(a: crate::EvalArgs, argv: &[String]) -> Result<()> {
    let dataset = load_dataset(&a.data.data, a.data.limit)?;
    let pool = load_pool(&a.data)?;
    let config = a.prompt.resolve(true);
    let mut snapshot = RunConfig::new("eval", argv)
        .pipeline(&config)
        .backend(&a.backend)
        .concurrency(a.data.concurrency)
        .input("data", a.data.data.display());
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let show = a.progress;
    let report = run_matrix_with_progress(
        &dataset,
        &a.edit_langs.0,
        &a.test_langs.0,
        pool.as_deref(),
        &eval_config(config, &a.backend, a.data.concurrency),
        &backends,
        &|p| {
            if show && (p.done == p.total || p.done % 50 == 0) {
                eprintln!("{}/{} cases", p.done, p.total);
            }
        },
    )?;

    let csv = sibling(&a.out, "csv");
    let timing = sibling(&a.out, "timing.json");
    write_text(&a.out, &report.without_timing().to_json())?;
    write_text(&csv, &report.to_csv())?;
    write_json(&timing, &report.timing)?;
    snapshot.write(&sibling(&a.out, "config.json"), &[&a.out, &csv, &timing])?;

    println!("{} cases, {} failed", report.case_count, report.failure_count);
    for c in &report.cells {
        println!(
            "{}->{}  reliability {:.4}  generality {:.4}  locality {:.4}  portability {:.4}  (EM, n={})",
            c.edit_lang, c.test_lang, c.reliability.em, c.generality.em, c.locality.em, c.portability.em, c.n
        );
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn ablate_kb(a: crate::AblateKbArgs, argv: &[String]) -> Result<()> {
    let dataset = load_dataset(&a.data.data, a.data.limit)?;
    let pool = load_pool(&a.data)?;
    let config = a.prompt.resolve(true);
    let mut snapshot = RunConfig::new("ablate-kb", argv)
        .pipeline(&config)
        .backend(&a.backend)
        .concurrency(a.data.concurrency)
        .input("data", a.data.data.display());
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let result = ablate_kb_size(
        &dataset,
        &a.sizes,
        a.test_size,
        a.edit_lang,
        a.test_lang,
        pool.as_deref(),
        &eval_config(config, &a.backend, a.data.concurrency),
        &backends,
    )?;
    write_json(&a.out, &result)?;
    snapshot.write(&sibling(&a.out, "config.json"), &[&a.out])?;
    println!("| KB size | Reliability | Generality | Locality | Portability | Retrieval acc. | Wall (ms) |");
    println!("|---:|---:|---:|---:|---:|---:|---:|");
    for r in &result.rows {
        println!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} |",
            r.kb_size, r.reliability.em, r.generality.em, r.locality.em, r.portability.em,
            r.retrieval_accuracy.question, r.wall_ms
        );
    }
    Ok(())
}

fn ablate_shot_counts(a: crate::AblateShotsArgs, argv: &[String]) -> Result<()> {
    let dataset = load_dataset(&a.data.data, a.data.limit)?;
    let pool = load_pool(&a.data)?;
    let config = a.prompt.resolve(true);
    let mut snapshot = RunConfig::new("ablate-shots", argv)
        .pipeline(&config)
        .backend(&a.backend)
        .concurrency(a.data.concurrency)
        .input("data", a.data.data.display());
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let result = ablate_shots(
        &dataset,
        &a.counts,
        a.edit_lang,
        a.test_lang,
        pool.as_deref(),
        &eval_config(config, &a.backend, a.data.concurrency),
        &backends,
    )?;
    write_json(&a.out, &result)?;
    snapshot.write(&sibling(&a.out, "config.json"), &[&a.out])?;
    println!("| Shots | Mode | Reliability | Generality | Locality | Portability |");
    println!("|---:|---|---:|---:|---:|---:|");
    for r in &result.rows {
        println!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.shots, r.mode, r.reliability.em, r.generality.em, r.locality.em, r.portability.em
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AccuracyRow {
    probe: Probe,
    #[serde(flatten)]
    report: AccuracyReport,
}

fn retriever_acc(a: crate::RetrieverAccArgs, argv: &[String]) -> Result<()> {
    let dataset = load_dataset(&a.data, a.limit)?;
    let probes: Vec<Probe> = if a.probes.trim().eq_ignore_ascii_case("all") {
        Probe::ALL.to_vec()
    } else {
        a.probes
            .split(',')
            .map(|p| p.parse::<Probe>())
            .collect::<Result<_, _>>()?
    };
    let mut snapshot = RunConfig::new("retriever-acc", argv)
        .backend(&a.backend)
        .input("data", a.data.display());
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let mut rows = Vec::new();
    for probe in probes {
        let report = retrieval_accuracy(&dataset, probe, a.edit_lang, a.test_lang, backends.scorer.as_ref())?;
        println!("{probe}: {}/{} = {:.4}", report.correct, report.total, report.accuracy);
        rows.push(AccuracyRow { probe, report });
    }
    write_json(&a.out, &rows)?;
    snapshot.write(&sibling(&a.out, "config.json"), &[&a.out])?;
    Ok(())
}

fn bench_latency(a: crate::BenchLatencyArgs, argv: &[String]) -> Result<()> {
    let dataset = load_dataset(&a.data.data, a.data.limit)?;
    let pool = load_pool(&a.data)?;
    let base = a.prompt.resolve(true);
    let few = if base.mode.is_few_shot() { base.mode } else { PromptMode::FewBi };
    let settings: Vec<LatencySetting> = a
        .counts
        .iter()
        .map(|&n| LatencySetting::new(if n == 0 { PromptMode::Zero } else { few }, n))
        .collect();
    let mut snapshot = RunConfig::new("bench-latency", argv)
        .pipeline(&base)
        .backend(&a.backend)
        .input("data", a.data.data.display())
        .input("n_edits", a.n_edits);
    snapshot.validate()?;
    let backends = backends::build(&a.backend)?;
    let table = measure_latency(
        &settings,
        a.n_edits,
        &dataset,
        a.edit_lang,
        a.test_lang,
        pool.as_deref(),
        &base,
        &backends,
    )?;
    let md = table.to_markdown();
    let json = sibling(&a.out, "json");
    write_text(&a.out, &md)?;
    write_text(&json, &table.to_json())?;
    snapshot.write(&sibling(&a.out, "config.json"), &[&a.out, &json])?;
    print!("{md}");
    Ok(())
}

fn synth(a: crate::SynthArgs, argv: &[String]) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let data = synthetic_dataset(a.n);
    let dataset = a.out_dir.join("dataset.json");
    let fixture = a.out_dir.join("fixture.json");
    let script = a.out_dir.join("script.json");
    write_mzsre(&dataset, &data)?;
    mirrored_fixture(&data, a.dim, a.seed)?.save(&fixture)?;
    mock_script(&data).save(&script)?;
    RunConfig::new("synth", argv).write(
        &a.out_dir.join("synth.config.json"),
        &[&dataset, &fixture, &script],
    )?;
    println!("wrote {} records to {}", a.n, a.out_dir.display());
    Ok(())
}

fn replay(a: crate::ReplayArgs) -> Result<()> {
    let snapshot = RunConfig::load(&a.snapshot)?;
    if snapshot.argv.first().map(String::as_str) == Some("replay") {
        bail!("refusing to replay a replay");
    }
    let mut argv = vec!["mkedit".to_string()];
    argv.extend(snapshot.argv.iter().cloned());
    let cli = <crate::Cli as clap::Parser>::try_parse_from(&argv)
        .with_context(|| format!("snapshot {} holds invalid arguments", a.snapshot.display()))?;
    dispatch(cli.command, &argv[1..])
}
