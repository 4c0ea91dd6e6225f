//! Editing evaluation: per-case protocol, language matrices, ablations and
//! timing.

mod ablation;
mod metrics;
mod report;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{normalize_text, KbError, KnowledgeBase, KnowledgeEntry, Language, ParallelRecord};
use crate::pipeline::{
    answer_query, answer_unedited, Backends, PipelineConfig, PipelineError, StageTimings,
};
use crate::retrieval::{retrieval_correct, Probe, ScorerConfig};

pub use ablation::{
    ablate_kb_size, ablate_shots, default_latency_settings, measure_latency, KbSizeAblation,
    KbSizeRow, LatencyRow, LatencySetting, LatencyTable, ShotAblation, ShotRow,
    DEFAULT_KB_SIZES, DEFAULT_SHOT_COUNTS,
};
pub use metrics::{exact_match, token_f1, tokenize, MetricSet, NORMALIZATION};
pub use report::{
    CaseSummary, CellReport, CellTiming, EvalReport, ProbeAccuracy, ProbeSummary, ReportConfig,
    TimingReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl EvalError {
    pub fn is_transport(&self) -> bool {
        matches!(self, EvalError::Pipeline(e) if e.transport)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub scorer: ScorerConfig,
    /// Cases evaluated at once within a cell.
    pub concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            scorer: ScorerConfig::default(),
            concurrency: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        self.pipeline.validate().map_err(EvalError::Config)?;
        self.scorer
            .validate()
            .map_err(|e| EvalError::Config(e.to_string()))?;
        if self.concurrency == 0 {
            return Err(EvalError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedFact {
    pub id: crate::kb::EntryId,
    pub question: String,
    pub answer: String,
    pub probability: f64,
}

/// Everything observed for one probe of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub probe: Probe,
    pub query: String,
    pub retrieved: Option<RetrievedFact>,
    pub retrieved_ok: bool,
    pub prompt: String,
    pub pre_edit_answer: String,
    pub answer: String,
    /// What the answer was scored against.
    pub expected: String,
    /// The dataset's answer for this probe, kept for diagnostics.
    pub dataset_answer: String,
    pub metrics: MetricSet,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub record_id: String,
    pub edit_lang: Language,
    pub test_lang: Language,
    pub reliability: MetricSet,
    pub generality: MetricSet,
    pub locality: MetricSet,
    pub portability: MetricSet,
    /// In [`Probe::ALL`] order.
    pub probes: Vec<ProbeTrace>,
}

impl CaseResult {
    pub fn probe(&self, probe: Probe) -> &ProbeTrace {
        self.probes
            .iter()
            .find(|p| p.probe == probe)
            .expect("every probe is traced")
    }

    pub fn metric(&self, probe: Probe) -> MetricSet {
        match probe {
            Probe::Question => self.reliability,
            Probe::Rephrase => self.generality,
            Probe::Locality => self.locality,
            Probe::Portability => self.portability,
        }
    }

    /// Time to answer the edited question itself.
    pub fn per_edit_time(&self) -> Duration {
        self.probe(Probe::Question).timings.total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub record_id: String,
    #[serde(flatten)]
    pub error: PipelineError,
}

fn dataset_answer(probe: Probe, r: &crate::kb::MzsreRecord) -> &str {
    match probe {
        Probe::Question | Probe::Rephrase => &r.answer,
        Probe::Locality => &r.locality_answer,
        Probe::Portability => &r.portability_answer,
    }
}

/// Runs the four probes of one record against `kb`.
///
/// Pre-edit answers come from passthrough prompts and so never see the KB.
/// Locality is scored against the pre-edit answer, the others against the
/// record's edit-consistent answers.
pub fn evaluate_case(
    record: &ParallelRecord,
    edit_lang: Language,
    test_lang: Language,
    kb: &[KnowledgeEntry],
    pool: &[&ParallelRecord],
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<CaseResult, CaseFailure> {
    let fail = |error| CaseFailure {
        record_id: record.record_id.clone(),
        error,
    };
    let test = record.get(test_lang);
    let edit_key = normalize_text(&record.get(edit_lang).question);
    let gold = kb
        .iter()
        .find(|e| e.lang == edit_lang && normalize_text(&e.question) == edit_key)
        .map(|e| e.id);

    let mut pre = Vec::with_capacity(4);
    for probe in Probe::ALL {
        let (answer, _) =
            answer_unedited(probe.text(test), backends.generator.as_ref(), config.max_new_tokens)
                .map_err(fail)?;
        pre.push(answer);
    }

    let mut probes = Vec::with_capacity(4);
    for (probe, pre_edit_answer) in Probe::ALL.into_iter().zip(pre) {
        let query = probe.text(test);
        let run = answer_query(query, test_lang, Some(edit_lang), kb, pool, config, backends)
            .map_err(fail)?;
        let expected = match probe {
            Probe::Locality => pre_edit_answer.clone(),
            other => dataset_answer(other, test).to_string(),
        };
        let hit = run.retrieved.as_ref().map(|r| r.entry.id);
        probes.push(ProbeTrace {
            probe,
            query: query.to_string(),
            retrieved: run.retrieved.as_ref().map(|r| RetrievedFact {
                id: r.entry.id,
                question: r.entry.question.clone(),
                answer: r.entry.answer.clone(),
                probability: r.decision.probability,
            }),
            retrieved_ok: retrieval_correct(probe, hit, gold),
            prompt: run.prompt.text,
            metrics: MetricSet::score(&run.answer, &expected, test_lang),
            pre_edit_answer,
            answer: run.answer,
            expected,
            dataset_answer: dataset_answer(probe, test).to_string(),
            timings: run.timings,
        });
    }
    Ok(CaseResult {
        record_id: record.record_id.clone(),
        edit_lang,
        test_lang,
        reliability: probes[0].metrics,
        generality: probes[1].metrics,
        locality: probes[2].metrics,
        portability: probes[3].metrics,
        probes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

pub(crate) struct CellOutcome {
    pub cases: Vec<CaseResult>,
    pub failures: Vec<CaseFailure>,
    pub wall: Duration,
}

pub(crate) fn thread_pool(concurrency: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))
}

/// Evaluates `records` against one KB. Results come back sorted by record id
/// whatever order the workers finish in.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_cell(
    threads: &rayon::ThreadPool,
    records: &[ParallelRecord],
    edit_lang: Language,
    test_lang: Language,
    kb: &[KnowledgeEntry],
    pool: &[&ParallelRecord],
    config: &PipelineConfig,
    backends: &Backends,
    on_case: &(dyn Fn() + Sync),
) -> CellOutcome {
    let start = Instant::now();
    let results: Vec<Result<CaseResult, CaseFailure>> = threads.install(|| {
        records
            .par_iter()
            .map(|record| {
                let own_pool: Vec<&ParallelRecord> = pool
                    .iter()
                    .copied()
                    .filter(|p| p.record_id != record.record_id)
                    .collect();
                let r = evaluate_case(record, edit_lang, test_lang, kb, &own_pool, config, backends);
                on_case();
                r
            })
            .collect()
    });
    let wall = start.elapsed();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => cases.push(c),
            Err(f) => failures.push(f),
        }
    }
    cases.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    failures.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    CellOutcome {
        cases,
        failures,
        wall,
    }
}

/// Largest shot count a leave-one-out pool can serve.
pub(crate) fn check_pool(
    config: &PipelineConfig,
    dataset: &[ParallelRecord],
    pool: &[&ParallelRecord],
) -> Result<(), EvalError> {
    if config.shots == 0 {
        return Ok(());
    }
    let overlaps = dataset
        .iter()
        .any(|r| pool.iter().any(|p| p.record_id == r.record_id));
    let available = pool.len() - usize::from(overlaps);
    if config.shots > available {
        return Err(EvalError::Config(format!(
            "{} shots requested but the example pool offers {available}",
            config.shots
        )));
    }
    Ok(())
}

/// Evaluates every (edit, test) language pair over the whole dataset.
///
/// Each cell's KB holds every edit-language fact. Demonstrations come from
/// `example_pool` (the dataset itself when `None`), always excluding the
/// record under test.
pub fn run_matrix(
    dataset: &[ParallelRecord],
    edit_langs: &[Language],
    test_langs: &[Language],
    example_pool: Option<&[ParallelRecord]>,
    config: &EvalConfig,
    backends: &Backends,
) -> Result<EvalReport, EvalError> {
    run_matrix_with_progress(dataset, edit_langs, test_langs, example_pool, config, backends, &|_| {})
}

pub fn run_matrix_with_progress(
    dataset: &[ParallelRecord],
    edit_langs: &[Language],
    test_langs: &[Language],
    example_pool: Option<&[ParallelRecord]>,
    config: &EvalConfig,
    backends: &Backends,
    progress: &(dyn Fn(Progress) + Sync),
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if edit_langs.is_empty() || test_langs.is_empty() {
        return Err(EvalError::Input("edit and test languages must be non-empty".into()));
    }
    if dataset.is_empty() {
        return Err(EvalError::Input("empty dataset".into()));
    }
    let pool: Vec<&ParallelRecord> = example_pool.unwrap_or(dataset).iter().collect();
    check_pool(&config.pipeline, dataset, &pool)?;
    let threads = thread_pool(config.concurrency)?;

    let total = edit_langs.len() * test_langs.len() * dataset.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let on_case = || {
        let d = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        progress(Progress { done: d, total });
    };

    let start = Instant::now();
    let mut cells = Vec::new();
    let mut timings = Vec::new();
    for &edit in edit_langs {
        let kb = KnowledgeBase::from_records(dataset, edit)?;
        for &test in test_langs {
            let outcome = run_cell(
                &threads,
                dataset,
                edit,
                test,
                kb.entries(),
                &pool,
                &config.pipeline,
                backends,
                &on_case,
            );
            timings.push(CellTiming::from_outcome(edit, test, &outcome));
            cells.push(CellReport::from_outcome(edit, test, outcome));
        }
    }
    Ok(EvalReport::new(
        ReportConfig {
            eval: config.clone(),
            generator: backends.generator.descriptor(),
            edit_langs: edit_langs.to_vec(),
            test_langs: test_langs.to_vec(),
            dataset_size: dataset.len(),
            pool_size: pool.len(),
        },
        cells,
        TimingReport::new(timings, start.elapsed()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{hashed_unit_vector, Embedder, FixtureEmbedder, MockGenerator, MockScript};
    use crate::kb::MzsreRecord;
    use crate::prompting::PromptMode;
    use crate::retrieval::CosineScorer;
    use std::sync::Arc;

    const ES_Q: &str = "¿Qué ciudad fue el lugar de nacimiento de Henning Löhlein?";
    const EN_Q: &str = "Which city was the birthplace of Henning Löhlein?";
    const EN_LOC: &str = "Who is the lead singer of Collective Soul?";

    fn table1_record() -> ParallelRecord {
        let blocks = Language::ALL.into_iter().map(|lang| {
            let (q, loc) = match lang {
                Language::En => (EN_Q.to_string(), EN_LOC.to_string()),
                Language::Es => (ES_Q.to_string(), format!("[{lang}] {EN_LOC}")),
                _ => (format!("[{lang}] {EN_Q}"), format!("[{lang}] {EN_LOC}")),
            };
            MzsreRecord {
                lang,
                question: q,
                answer: "Munich".into(),
                ground_truth: "Bonn".into(),
                rephrased_question: "In which city was Henning Löhlein born?".into(),
                locality_question: loc,
                locality_answer: "Ed Roland".into(),
                portability_question: "In which German state was Henning Löhlein born?".into(),
                portability_answer: "Bavaria".into(),
            }
        });
        ParallelRecord::new("t1", blocks).unwrap()
    }

    fn backends() -> Backends {
        let mut fx = FixtureEmbedder::new(64, 3);
        fx.insert_group(
            [ES_Q, EN_Q, "In which city was Henning Löhlein born?"],
            hashed_unit_vector("löhlein", 3, 64),
        )
        .unwrap();
        let embedder: Arc<dyn Embedder> = Arc::new(fx);
        let script = MockScript::default()
            .with_answer(Language::En, EN_Q, "Bonn")
            .with_answer(Language::En, EN_LOC, "Ed Roland");
        Backends {
            generator: Arc::new(MockGenerator::new(script).with_alignment(embedder.clone())),
            embedder: embedder.clone(),
            scorer: Arc::new(CosineScorer::new(embedder, 0.75)),
        }
    }

    #[test]
    fn table1_cross_lingual_case() {
        let record = table1_record();
        let kb = KnowledgeBase::from_records(std::slice::from_ref(&record), Language::Es).unwrap();
        let c = evaluate_case(
            &record,
            Language::Es,
            Language::En,
            kb.entries(),
            &[],
            &PipelineConfig::zero_shot(),
            &backends(),
        )
        .unwrap();
        assert_eq!(c.reliability.em, 1.0);
        assert_eq!(c.generality.em, 1.0);
        assert_eq!(c.locality.em, 1.0);
        assert_eq!(c.probe(Probe::Locality).pre_edit_answer, "Ed Roland");
        assert_eq!(c.probe(Probe::Locality).answer, "Ed Roland");
        assert_eq!(c.probe(Probe::Locality).prompt, EN_LOC);
        assert!(c.probe(Probe::Question).retrieved_ok);
        assert!(c.probe(Probe::Locality).retrieved_ok);
        assert_eq!(c.probe(Probe::Question).pre_edit_answer, "Bonn");
    }

    #[test]
    fn empty_kb_leaves_pre_edit_answers() {
        let record = table1_record();
        let c = evaluate_case(
            &record,
            Language::Es,
            Language::En,
            &[],
            &[],
            &PipelineConfig::zero_shot(),
            &backends(),
        )
        .unwrap();
        assert_eq!(c.reliability.em, 0.0);
        assert_eq!(c.probe(Probe::Question).answer, "Bonn");
        assert!(c.probes.iter().all(|p| p.prompt == p.query));
        assert!(!c.probe(Probe::Question).retrieved_ok);
    }

    #[test]
    fn pre_edit_answers_ignore_kb() {
        let record = table1_record();
        let b = backends();
        let full = KnowledgeBase::from_records(std::slice::from_ref(&record), Language::Es).unwrap();
        let run = |kb: &[KnowledgeEntry]| {
            evaluate_case(&record, Language::Es, Language::En, kb, &[], &PipelineConfig::zero_shot(), &b)
                .unwrap()
                .probes
                .into_iter()
                .map(|p| p.pre_edit_answer)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(full.entries()), run(&[]));
    }

    #[test]
    fn single_case_matrix_equals_case() {
        let record = table1_record();
        let config = EvalConfig {
            pipeline: PipelineConfig::zero_shot(),
            ..EvalConfig::default()
        };
        let data = vec![record];
        let report = run_matrix(&data, &[Language::Es], &[Language::En], None, &config, &backends()).unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = &report.cells[0];
        assert_eq!(cell.n, 1);
        assert_eq!(cell.reliability, MetricSet { em: 1.0, f1: 1.0 });
        assert_eq!(cell.locality.em, 1.0);
        assert_eq!(report.case_count, 1);
    }

    #[test]
    fn empty_languages_rejected() {
        let data = vec![table1_record()];
        let err = run_matrix(&data, &[Language::En], &[], None, &EvalConfig::default(), &backends());
        assert!(matches!(err, Err(EvalError::Input(_))));
    }

    #[test]
    fn too_many_shots_for_pool_rejected() {
        let data = vec![table1_record()];
        let config = EvalConfig {
            pipeline: PipelineConfig {
                mode: PromptMode::FewBi,
                shots: 1,
                ..PipelineConfig::default()
            },
            ..EvalConfig::default()
        };
        let err = run_matrix(&data, &[Language::En], &[Language::En], None, &config, &backends());
        assert!(matches!(err, Err(EvalError::Config(_))));
    }
}
