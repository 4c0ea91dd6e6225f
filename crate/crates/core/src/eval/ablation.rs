use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_pool, run_cell, thread_pool, EvalConfig, EvalError, MetricSet, ProbeAccuracy,
};
use crate::kb::{KnowledgeBase, Language, ParallelRecord};
use crate::pipeline::{answer_query, Backends, PipelineConfig, StageTimings};
use crate::prompting::PromptMode;
use crate::retrieval::Probe;

pub const DEFAULT_KB_SIZES: [usize; 6] = [10, 50, 100, 200, 400, 800];
pub const DEFAULT_SHOT_COUNTS: [usize; 5] = [0, 2, 4, 8, 16];

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbSizeRow {
    pub kb_size: usize,
    pub n: usize,
    pub failure_count: usize,
    pub reliability: MetricSet,
    pub generality: MetricSet,
    pub locality: MetricSet,
    pub portability: MetricSet,
    pub retrieval_accuracy: ProbeAccuracy,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbSizeAblation {
    pub config: EvalConfig,
    pub edit_lang: Language,
    pub test_lang: Language,
    pub test_size: usize,
    pub rows: Vec<KbSizeRow>,
}

fn means(cases: &[super::CaseResult]) -> [MetricSet; 4] {
    Probe::ALL.map(|p| {
        let v: Vec<MetricSet> = cases.iter().map(|c| c.metric(p)).collect();
        MetricSet::mean(v.iter())
    })
}

/// Evaluates a fixed test subset against growing KB prefixes.
///
/// The KB for size `s` holds the edit-language facts of the first `s`
/// records. The test subset is the first `test_size` records (the smallest
/// size when `None`), so every test fact is present at every size.
#[allow(clippy::too_many_arguments)]
pub fn ablate_kb_size(
    dataset: &[ParallelRecord],
    sizes: &[usize],
    test_size: Option<usize>,
    edit_lang: Language,
    test_lang: Language,
    example_pool: Option<&[ParallelRecord]>,
    config: &EvalConfig,
    backends: &Backends,
) -> Result<KbSizeAblation, EvalError> {
    config.validate()?;
    let smallest = *sizes
        .iter()
        .min()
        .ok_or_else(|| EvalError::Input("no KB sizes given".into()))?;
    if smallest == 0 {
        return Err(EvalError::Input("KB size must be at least 1".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > dataset.len()) {
        return Err(EvalError::Input(format!(
            "KB size {big} exceeds the dataset's {} records",
            dataset.len()
        )));
    }
    let test_size = test_size.unwrap_or(smallest);
    if test_size == 0 || test_size > smallest {
        return Err(EvalError::Input(format!(
            "test subset of {test_size} must be between 1 and the smallest KB size {smallest}"
        )));
    }
    let pool: Vec<&ParallelRecord> = example_pool.unwrap_or(dataset).iter().collect();
    let tests = &dataset[..test_size];
    check_pool(&config.pipeline, tests, &pool)?;
    let threads = thread_pool(config.concurrency)?;

    let mut rows = Vec::new();
    for &size in sizes {
        let kb = KnowledgeBase::from_records(&dataset[..size], edit_lang)?;
        let o = run_cell(
            &threads,
            tests,
            edit_lang,
            test_lang,
            kb.entries(),
            &pool,
            &config.pipeline,
            backends,
            &|| {},
        );
        let [reliability, generality, locality, portability] = means(&o.cases);
        rows.push(KbSizeRow {
            kb_size: size,
            n: o.cases.len(),
            failure_count: o.failures.len(),
            reliability,
            generality,
            locality,
            portability,
            retrieval_accuracy: ProbeAccuracy::from_cases(&o.cases),
            wall_ms: ms(o.wall),
        });
    }
    Ok(KbSizeAblation {
        config: config.clone(),
        edit_lang,
        test_lang,
        test_size,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub shots: usize,
    pub mode: PromptMode,
    pub n: usize,
    pub failure_count: usize,
    pub reliability: MetricSet,
    pub generality: MetricSet,
    pub locality: MetricSet,
    pub portability: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotAblation {
    pub config: EvalConfig,
    pub edit_lang: Language,
    pub test_lang: Language,
    pub rows: Vec<ShotRow>,
}

/// The shot count's mode: zero-shot at 0, otherwise the configured few-shot
/// mode (bilingual unless few-shot monolingual was asked for).
fn mode_for_shots(base: PromptMode, shots: usize) -> PromptMode {
    match (shots, base) {
        (0, _) => PromptMode::Zero,
        (_, PromptMode::FewMono) => PromptMode::FewMono,
        _ => PromptMode::FewBi,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ablate_shots(
    dataset: &[ParallelRecord],
    shot_counts: &[usize],
    edit_lang: Language,
    test_lang: Language,
    example_pool: Option<&[ParallelRecord]>,
    config: &EvalConfig,
    backends: &Backends,
) -> Result<ShotAblation, EvalError> {
    if shot_counts.is_empty() {
        return Err(EvalError::Input("no shot counts given".into()));
    }
    if dataset.is_empty() {
        return Err(EvalError::Input("empty dataset".into()));
    }
    let pool: Vec<&ParallelRecord> = example_pool.unwrap_or(dataset).iter().collect();
    let threads = thread_pool(config.concurrency)?;
    let kb = KnowledgeBase::from_records(dataset, edit_lang)?;
    let mut rows = Vec::new();
    for &shots in shot_counts {
        let mut cfg = config.clone();
        cfg.pipeline.shots = shots;
        cfg.pipeline.mode = mode_for_shots(config.pipeline.mode, shots);
        cfg.validate()?;
        check_pool(&cfg.pipeline, dataset, &pool)?;
        let o = run_cell(
            &threads,
            dataset,
            edit_lang,
            test_lang,
            kb.entries(),
            &pool,
            &cfg.pipeline,
            backends,
            &|| {},
        );
        let [reliability, generality, locality, portability] = means(&o.cases);
        rows.push(ShotRow {
            shots,
            mode: cfg.pipeline.mode,
            n: o.cases.len(),
            failure_count: o.failures.len(),
            reliability,
            generality,
            locality,
            portability,
        });
    }
    Ok(ShotAblation {
        config: config.clone(),
        edit_lang,
        test_lang,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySetting {
    pub label: String,
    pub mode: PromptMode,
    pub shots: usize,
}

impl LatencySetting {
    pub fn new(mode: PromptMode, shots: usize) -> Self {
        let label = if shots == 0 {
            mode.as_str().to_string()
        } else {
            format!("{}-{shots}", mode.as_str())
        };
        Self { label, mode, shots }
    }
}

/// Zero-shot, then bilingual few-shot with 4, 8 and 16 examples.
pub fn default_latency_settings() -> Vec<LatencySetting> {
    let mut v = vec![LatencySetting::new(PromptMode::Zero, 0)];
    v.extend([4, 8, 16].map(|n| LatencySetting::new(PromptMode::FewBi, n)));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub label: String,
    pub mode: PromptMode,
    pub shots: usize,
    pub n_edits: usize,
    pub mean_retrieval_ms: f64,
    pub mean_selection_ms: f64,
    pub mean_generation_ms: f64,
    pub mean_per_edit_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub generator: String,
    pub edit_lang: Language,
    pub test_lang: Language,
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Method | Retrieval (ms) | Selection (ms) | Generation (ms) | Per edit (ms) |\n\
             |---|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.label, r.mean_retrieval_ms, r.mean_selection_ms, r.mean_generation_ms, r.mean_per_edit_ms
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Mean per-edit time for each setting over the first `n_edits` records,
/// answering each record's edited question. Any backend error aborts.
#[allow(clippy::too_many_arguments)]
pub fn measure_latency(
    settings: &[LatencySetting],
    n_edits: usize,
    dataset: &[ParallelRecord],
    edit_lang: Language,
    test_lang: Language,
    example_pool: Option<&[ParallelRecord]>,
    base: &PipelineConfig,
    backends: &Backends,
) -> Result<LatencyTable, EvalError> {
    if n_edits == 0 {
        return Err(EvalError::Input("n_edits must be at least 1".into()));
    }
    if n_edits > dataset.len() {
        return Err(EvalError::Input(format!(
            "n_edits {n_edits} exceeds the dataset's {} records",
            dataset.len()
        )));
    }
    let kb = KnowledgeBase::from_records(dataset, edit_lang)?;
    let pool: Vec<&ParallelRecord> = example_pool.unwrap_or(dataset).iter().collect();
    let mut rows = Vec::new();
    for s in settings {
        let cfg = PipelineConfig {
            mode: s.mode,
            shots: s.shots,
            ..base.clone()
        };
        cfg.validate().map_err(EvalError::Config)?;
        check_pool(&cfg, &dataset[..n_edits], &pool)?;
        let mut sum = StageTimings::default();
        for record in &dataset[..n_edits] {
            let own: Vec<&ParallelRecord> = pool
                .iter()
                .copied()
                .filter(|p| p.record_id != record.record_id)
                .collect();
            let run = answer_query(
                Probe::Question.text(record.get(test_lang)),
                test_lang,
                Some(edit_lang),
                kb.entries(),
                &own,
                &cfg,
                backends,
            )?;
            sum = sum + run.timings;
        }
        let n = n_edits as f64;
        rows.push(LatencyRow {
            label: s.label.clone(),
            mode: s.mode,
            shots: s.shots,
            n_edits,
            mean_retrieval_ms: ms(sum.retrieval) / n,
            mean_selection_ms: ms(sum.selection) / n,
            mean_generation_ms: ms(sum.generation) / n,
            mean_per_edit_ms: ms(sum.total()) / n,
        });
    }
    Ok(LatencyTable {
        generator: backends.generator.descriptor(),
        edit_lang,
        test_lang,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shot_modes() {
        assert_eq!(mode_for_shots(PromptMode::FewBi, 0), PromptMode::Zero);
        assert_eq!(mode_for_shots(PromptMode::FewMono, 4), PromptMode::FewMono);
        assert_eq!(mode_for_shots(PromptMode::Zero, 4), PromptMode::FewBi);
    }

    #[test]
    fn default_settings_labels() {
        let labels: Vec<String> = default_latency_settings().into_iter().map(|s| s.label).collect();
        assert_eq!(labels, ["zero", "few_bi-4", "few_bi-8", "few_bi-16"]);
    }
}
