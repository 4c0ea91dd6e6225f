//! One edited query end to end: retrieve, select demonstrations, build and
//! render the prompt, generate.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, GenerationRequest, Generator};
use crate::kb::{KnowledgeEntry, Language, ParallelRecord};
use crate::prompting::{build_plan, render, PromptMode, PromptPlan, RenderedPrompt};
use crate::retrieval::{
    retrieve, select_examples, ExamplePair, RelevanceScorer, ScoredFact, SelectionStrategy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreEdit,
    Retrieval,
    Selection,
    Prompt,
    Generation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PreEdit => "pre_edit",
            Stage::Retrieval => "retrieval",
            Stage::Selection => "selection",
            Stage::Prompt => "prompt",
            Stage::Generation => "generation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage} failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    /// Backend unreachable or misbehaving, as opposed to bad input.
    pub transport: bool,
}

impl PipelineError {
    fn new(stage: Stage, message: impl ToString, transport: bool) -> Self {
        Self {
            stage,
            message: message.to_string(),
            transport,
        }
    }
}

/// Prompting settings shared by single queries and evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PromptMode,
    pub shots: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::FewBi,
            shots: 16,
            strategy: SelectionStrategy::Search,
            seed: 0,
            max_new_tokens: 32,
        }
    }
}

impl PipelineConfig {
    pub fn zero_shot() -> Self {
        Self {
            mode: PromptMode::Zero,
            shots: 0,
            ..Self::default()
        }
    }

    /// Retrieval modes use zero shots exactly when zero-shot; `ike_all`
    /// takes any number of demonstrations and passthrough none.
    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            PromptMode::Zero if self.shots != 0 => {
                Err(format!("zero-shot mode with {} shots", self.shots))
            }
            m if m.is_few_shot() && self.shots == 0 => Err(format!("{m} needs shots > 0")),
            PromptMode::Passthrough if self.shots != 0 => {
                Err("passthrough mode takes no shots".into())
            }
            _ => Ok(()),
        }
    }
}

/// The services a pipeline talks to.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Generator>,
    /// Embeds queries and pool questions for demonstration search.
    pub embedder: Arc<dyn Embedder>,
    pub scorer: Arc<dyn RelevanceScorer>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    #[serde(with = "crate::gateway::duration_micros")]
    pub retrieval: Duration,
    #[serde(with = "crate::gateway::duration_micros")]
    pub selection: Duration,
    #[serde(with = "crate::gateway::duration_micros")]
    pub generation: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.retrieval + self.selection + self.generation
    }
}

impl std::ops::Add for StageTimings {
    type Output = StageTimings;
    fn add(self, o: StageTimings) -> StageTimings {
        StageTimings {
            retrieval: self.retrieval + o.retrieval,
            selection: self.selection + o.selection,
            generation: self.generation + o.generation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    pub retrieved: Option<ScoredFact>,
    pub plan: PromptPlan,
    pub prompt: RenderedPrompt,
    pub answer: String,
    pub timings: StageTimings,
}

fn generate(
    generator: &dyn Generator,
    prompt: &str,
    max_new_tokens: usize,
    stage: Stage,
) -> Result<(String, Duration), PipelineError> {
    let resp = generator
        .generate(&GenerationRequest::greedy(prompt, max_new_tokens))
        .map_err(|e| PipelineError::new(stage, &e, e.is_transport()))?;
    Ok((resp.text.trim().to_string(), resp.latency))
}

/// The model's answer with no edit applied: the bare query, unchanged.
pub fn answer_unedited(
    query: &str,
    generator: &dyn Generator,
    max_new_tokens: usize,
) -> Result<(String, Duration), PipelineError> {
    generate(generator, query, max_new_tokens, Stage::PreEdit)
}

/// Answers `query` against `kb`.
///
/// Demonstrations are drawn from `pool` with the edit language taken from
/// `edit_lang`, or from the retrieved fact when not given. Selection is
/// skipped when a retrieval mode finds nothing, since the prompt degrades to
/// passthrough.
pub fn answer_query(
    query: &str,
    test_lang: Language,
    edit_lang: Option<Language>,
    kb: &[KnowledgeEntry],
    pool: &[&ParallelRecord],
    config: &PipelineConfig,
    backends: &Backends,
) -> Result<QueryRun, PipelineError> {
    config
        .validate()
        .map_err(|m| PipelineError::new(Stage::Prompt, m, false))?;
    let mut timings = StageTimings::default();

    let retrieved = if config.mode.is_retrieval() {
        let start = Instant::now();
        let hit = retrieve(query, kb, backends.scorer.as_ref())
            .map_err(|e| PipelineError::new(Stage::Retrieval, &e, e.is_transport()))?;
        timings.retrieval = start.elapsed();
        hit
    } else {
        None
    };

    let wants_examples = config.shots > 0
        && match config.mode {
            PromptMode::IkeAll => true,
            m if m.is_few_shot() => retrieved.is_some(),
            _ => false,
        };
    let examples: Vec<ExamplePair> = if wants_examples {
        let edit = edit_lang
            .or_else(|| retrieved.as_ref().map(|r| r.entry.lang))
            .or_else(|| kb.first().map(|e| e.lang))
            .unwrap_or(test_lang);
        let start = Instant::now();
        let ex = select_examples(
            query,
            pool,
            edit,
            test_lang,
            config.shots,
            backends.embedder.as_ref(),
            config.strategy,
            config.seed,
        )
        .map_err(|e| PipelineError::new(Stage::Selection, &e, e.is_transport()))?;
        timings.selection = start.elapsed();
        ex
    } else {
        Vec::new()
    };

    let plan = build_plan(config.mode, query, test_lang, retrieved.as_ref(), kb, examples)
        .map_err(|e| PipelineError::new(Stage::Prompt, e, false))?;
    let prompt = render(&plan).map_err(|e| PipelineError::new(Stage::Prompt, e, false))?;
    let (answer, latency) = generate(
        backends.generator.as_ref(),
        &prompt.text,
        config.max_new_tokens,
        Stage::Generation,
    )?;
    timings.generation = latency;
    Ok(QueryRun {
        retrieved,
        plan,
        prompt,
        answer,
        timings,
    })
}
