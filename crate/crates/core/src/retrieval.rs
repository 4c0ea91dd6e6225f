//! Relevance scoring over the knowledge base, scorer training pairs and
//! few-shot example selection.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{embed_one, Embedder, GatewayError, PairClassifier};
use crate::kb::{
    normalize_text, EntryId, KbError, KnowledgeBase, KnowledgeEntry, Language, MzsreRecord,
    PairLabel, ParallelRecord, TranslationPair,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("scoring failed{}: {source}", entry.map(|e| format!(" at entry {e}")).unwrap_or_default())]
    Scorer {
        entry: Option<EntryId>,
        #[source]
        source: GatewayError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

impl RetrievalError {
    fn scorer(entry: Option<EntryId>, source: GatewayError) -> Self {
        match source {
            GatewayError::DimensionMismatch { .. } => RetrievalError::Config(source.to_string()),
            source => RetrievalError::Scorer { entry, source },
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, RetrievalError::Scorer { source, .. } if source.is_transport())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDecision {
    pub probability: f64,
    pub related: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub entry: KnowledgeEntry,
    pub decision: RelevanceDecision,
    /// Position in the scanned entry list.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSide {
    pub lang: Language,
    pub question: String,
    pub answer: String,
}

/// A demonstration: the same QA in the edit and the test language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub record_id: String,
    pub edit_side: QaSide,
    pub test_side: QaSide,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    ReferenceCosine,
    RemoteClassifier,
}

impl FromStr for ScorerKind {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference-cosine" | "cosine" => Ok(ScorerKind::ReferenceCosine),
            "remote-classifier" | "classifier" => Ok(ScorerKind::RemoteClassifier),
            other => Err(RetrievalError::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub threshold: f64,
    pub pair_separator: String,
}

impl ScorerConfig {
    /// Defaults: τ = 0.75 for raw cosine, 0.5 for a two-class classifier.
    pub fn for_kind(kind: ScorerKind) -> Self {
        Self {
            kind,
            threshold: match kind {
                ScorerKind::ReferenceCosine => 0.75,
                ScorerKind::RemoteClassifier => 0.5,
            },
            pair_separator: "</s>".into(),
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(RetrievalError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.kind == ScorerKind::RemoteClassifier && self.pair_separator.trim().is_empty() {
            return Err(RetrievalError::Config("empty pair separator".into()));
        }
        Ok(())
    }
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self::for_kind(ScorerKind::ReferenceCosine)
    }
}

/// Probability that a candidate is related to a query.
pub trait RelevanceScorer: Send + Sync {
    fn threshold(&self) -> f64;

    fn probability(&self, query: &str, candidate: &str) -> Result<f64, GatewayError>;

    /// Scores every candidate; on failure reports the failing position.
    fn probabilities(
        &self,
        query: &str,
        candidates: &[&str],
    ) -> Result<Vec<f64>, (usize, GatewayError)> {
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| self.probability(query, c).map_err(|e| (i, e)))
            .collect()
    }

    fn decide(&self, probability: f64) -> RelevanceDecision {
        RelevanceDecision {
            probability,
            related: probability >= self.threshold(),
        }
    }
}

/// `(cos + 1) / 2` over a shared embedding space.
pub struct CosineScorer {
    embedder: Arc<dyn Embedder>,
    threshold: f64,
}

impl CosineScorer {
    pub fn new(embedder: Arc<dyn Embedder>, threshold: f64) -> Self {
        Self {
            embedder,
            threshold,
        }
    }
}

fn checked(p: f64) -> Result<f64, GatewayError> {
    if p.is_finite() {
        Ok(p.clamp(0.0, 1.0))
    } else {
        Err(GatewayError::MalformedResponse(format!("non-finite probability {p}")))
    }
}

impl RelevanceScorer for CosineScorer {
    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probability(&self, query: &str, candidate: &str) -> Result<f64, GatewayError> {
        let v = self.embedder.embed(&[query, candidate])?;
        checked((v[0].cosine(&v[1])? + 1.0) / 2.0)
    }

    fn probabilities(
        &self,
        query: &str,
        candidates: &[&str],
    ) -> Result<Vec<f64>, (usize, GatewayError)> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let q = embed_one(self.embedder.as_ref(), query).map_err(|e| (0, e))?;
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let v = embed_one(self.embedder.as_ref(), c).map_err(|e| (i, e))?;
                checked((q.cosine(&v).map_err(|e| (i, e))? + 1.0) / 2.0).map_err(|e| (i, e))
            })
            .collect()
    }
}

/// Related-class probability from a pair classifier.
pub struct ClassifierScorer {
    classifier: Arc<dyn PairClassifier>,
    threshold: f64,
}

impl ClassifierScorer {
    pub fn new(classifier: Arc<dyn PairClassifier>, threshold: f64) -> Self {
        Self {
            classifier,
            threshold,
        }
    }
}

impl RelevanceScorer for ClassifierScorer {
    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probability(&self, query: &str, candidate: &str) -> Result<f64, GatewayError> {
        let p = self.classifier.classify(&[(query, candidate)])?;
        checked(*p.first().ok_or_else(|| {
            GatewayError::MalformedResponse("no probability returned".into())
        })?)
    }
}

/// Builds the scorer a config asks for. The classifier is required for the
/// remote kind and ignored otherwise.
pub fn scorer_from_config(
    config: &ScorerConfig,
    embedder: Arc<dyn Embedder>,
    classifier: Option<Arc<dyn PairClassifier>>,
) -> Result<Arc<dyn RelevanceScorer>, RetrievalError> {
    config.validate()?;
    Ok(match config.kind {
        ScorerKind::ReferenceCosine => Arc::new(CosineScorer::new(embedder, config.threshold)),
        ScorerKind::RemoteClassifier => Arc::new(ClassifierScorer::new(
            classifier.ok_or_else(|| {
                RetrievalError::Config("remote-classifier scorer needs a classifier endpoint".into())
            })?,
            config.threshold,
        )),
    })
}

pub fn score_pair(
    query: &str,
    candidate: &str,
    scorer: &dyn RelevanceScorer,
) -> Result<RelevanceDecision, RetrievalError> {
    if query.trim().is_empty() || candidate.trim().is_empty() {
        return Err(RetrievalError::Input("empty text in score_pair".into()));
    }
    let p = scorer
        .probability(query, candidate)
        .map_err(|e| RetrievalError::scorer(None, e))?;
    Ok(scorer.decide(p))
}

/// Scans every entry and returns the most probable one if it is related.
/// Ties go to the lowest index.
pub fn retrieve(
    query: &str,
    entries: &[KnowledgeEntry],
    scorer: &dyn RelevanceScorer,
) -> Result<Option<ScoredFact>, RetrievalError> {
    if entries.is_empty() {
        return Ok(None);
    }
    let candidates: Vec<&str> = entries.iter().map(|e| e.question.as_str()).collect();
    let probs = scorer
        .probabilities(query, &candidates)
        .map_err(|(i, e)| RetrievalError::scorer(Some(entries[i].id), e))?;
    let mut best = 0;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > probs[best] {
            best = i;
        }
    }
    let decision = scorer.decide(probs[best]);
    Ok(decision.related.then(|| ScoredFact {
        entry: entries[best].clone(),
        decision,
        index: best,
    }))
}

/// Labelled scorer training data: each record's `l1` question with its own
/// `l2` question (related) plus `negative_ratio` pairings with other
/// records' `l2` questions (unrelated).
pub fn build_training_pairs(
    corpus: &[ParallelRecord],
    l1: Language,
    l2: Language,
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<TranslationPair>, RetrievalError> {
    let n = corpus.len();
    if negative_ratio >= 1 && n < 2 {
        return Err(RetrievalError::Input(
            "at least two records are needed to draw negatives".into(),
        ));
    }
    let keys: Vec<String> = corpus
        .iter()
        .map(|r| normalize_text(&r.get(l2).question))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * (1 + negative_ratio));
    for (i, record) in corpus.iter().enumerate() {
        let source = (l1, record.get(l1).question.clone());
        out.push(TranslationPair {
            source: source.clone(),
            target: (l2, record.get(l2).question.clone()),
            label: PairLabel::Related,
        });
        for _ in 0..negative_ratio {
            let j = draw_partner(&mut rng, i, &keys).ok_or_else(|| {
                RetrievalError::Input(format!(
                    "record `{}` has no partner with a different {l2} question",
                    record.record_id
                ))
            })?;
            out.push(TranslationPair {
                source: source.clone(),
                target: (l2, corpus[j].get(l2).question.clone()),
                label: PairLabel::Unrelated,
            });
        }
    }
    Ok(out)
}

/// Uniform draw over records other than `i` whose target text differs from
/// record `i`'s, so no negative duplicates a translation pair.
fn draw_partner(rng: &mut ChaCha8Rng, i: usize, keys: &[String]) -> Option<usize> {
    let n = keys.len();
    for _ in 0..64 {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if keys[j] != keys[i] {
            return Some(j);
        }
    }
    let valid: Vec<usize> = (0..n).filter(|&j| j != i && keys[j] != keys[i]).collect();
    (!valid.is_empty()).then(|| valid[rng.random_range(0..valid.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Search,
    Random,
}

impl FromStr for SelectionStrategy {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "search" => Ok(SelectionStrategy::Search),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(RetrievalError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

fn query_seed(seed: u64, query: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

fn example_pair(record: &ParallelRecord, edit: Language, test: Language, similarity: f64) -> ExamplePair {
    let side = |r: &MzsreRecord| QaSide {
        lang: r.lang,
        question: r.question.clone(),
        answer: r.answer.clone(),
    };
    ExamplePair {
        record_id: record.record_id.clone(),
        edit_side: side(record.get(edit)),
        test_side: side(record.get(test)),
        similarity,
    }
}

/// Picks `count` demonstrations from `pool`.
///
/// `Search` ranks the pool's test-language questions by cosine similarity to
/// the query and returns the top `count` in ascending order, so the closest
/// example sits next to the query. `Random` draws without replacement from a
/// generator seeded by `(seed, query)`.
#[allow(clippy::too_many_arguments)]
pub fn select_examples(
    query: &str,
    pool: &[&ParallelRecord],
    edit_lang: Language,
    test_lang: Language,
    count: usize,
    embedder: &dyn Embedder,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<ExamplePair>, RetrievalError> {
    if count > pool.len() {
        return Err(RetrievalError::Input(format!(
            "requested {count} examples from a pool of {}",
            pool.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let q = embed_one(embedder, query).map_err(|e| RetrievalError::scorer(None, e))?;
    let similarity = |r: &ParallelRecord| -> Result<f64, RetrievalError> {
        let v = embed_one(embedder, &r.get(test_lang).question)
            .map_err(|e| RetrievalError::scorer(None, e))?;
        q.cosine(&v).map_err(|e| RetrievalError::scorer(None, e))
    };
    match strategy {
        SelectionStrategy::Search => {
            let mut ranked = pool
                .iter()
                .enumerate()
                .map(|(i, r)| similarity(r).map(|s| (i, s)))
                .collect::<Result<Vec<_>, _>>()?;
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(count);
            ranked.reverse();
            Ok(ranked
                .into_iter()
                .map(|(i, s)| example_pair(pool[i], edit_lang, test_lang, s))
                .collect())
        }
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, query));
            sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|i| similarity(pool[i]).map(|s| example_pair(pool[i], edit_lang, test_lang, s)))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Question,
    Rephrase,
    Locality,
    Portability,
}

impl Probe {
    pub const ALL: [Probe; 4] = [
        Probe::Question,
        Probe::Rephrase,
        Probe::Locality,
        Probe::Portability,
    ];

    pub fn text(self, record: &MzsreRecord) -> &str {
        match self {
            Probe::Question => &record.question,
            Probe::Rephrase => &record.rephrased_question,
            Probe::Locality => &record.locality_question,
            Probe::Portability => &record.portability_question,
        }
    }

    /// Name of the editing metric the probe feeds.
    pub fn metric_name(self) -> &'static str {
        match self {
            Probe::Question => "reliability",
            Probe::Rephrase => "generality",
            Probe::Locality => "locality",
            Probe::Portability => "portability",
        }
    }
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Probe::Question => "question",
            Probe::Rephrase => "rephrase",
            Probe::Locality => "locality",
            Probe::Portability => "portability",
        })
    }
}

impl FromStr for Probe {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "question" | "reliability" => Ok(Probe::Question),
            "rephrase" | "generality" => Ok(Probe::Rephrase),
            "locality" => Ok(Probe::Locality),
            "portability" => Ok(Probe::Portability),
            other => Err(RetrievalError::Input(format!("unknown probe `{other}`"))),
        }
    }
}

/// Whether a retrieval outcome is correct for a probe: the record's own
/// fact for edit-related probes, nothing for locality probes.
pub fn retrieval_correct(probe: Probe, retrieved: Option<EntryId>, gold: Option<EntryId>) -> bool {
    match probe {
        Probe::Locality => retrieved.is_none(),
        _ => retrieved.is_some() && retrieved == gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Fraction of probes for which retrieval over the edit-language facts
/// returns the right outcome.
pub fn retrieval_accuracy(
    dataset: &[ParallelRecord],
    probe: Probe,
    edit_lang: Language,
    test_lang: Language,
    scorer: &dyn RelevanceScorer,
) -> Result<AccuracyReport, RetrievalError> {
    if dataset.is_empty() {
        return Err(RetrievalError::Input("empty dataset".into()));
    }
    let kb = KnowledgeBase::from_records(dataset, edit_lang)?;
    let mut correct = 0;
    for record in dataset {
        let gold = kb
            .find(edit_lang, &record.get(edit_lang).question)
            .map(|e| e.id);
        let hit = retrieve(probe.text(record.get(test_lang)), kb.entries(), scorer)?;
        if retrieval_correct(probe, hit.map(|h| h.entry.id), gold) {
            correct += 1;
        }
    }
    Ok(AccuracyReport {
        correct,
        total: dataset.len(),
        accuracy: correct as f64 / dataset.len() as f64,
    })
}
