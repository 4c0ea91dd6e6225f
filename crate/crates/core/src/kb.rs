//! Multilingual knowledge base and benchmark data model.
//!
//! Holds the edited facts the retriever scans, the 12-language parallel
//! benchmark records, ingestion of the interchange format, deduplication
//! and line-delimited persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("record `{record_id}`: invalid field `{field}`: {reason}")]
    Record {
        record_id: String,
        field: String,
        reason: String,
    },
    #[error("duplicate record_id `{0}`")]
    DuplicateRecord(String),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("malformed document: {0}")]
    Document(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The twelve benchmark languages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Language {
    En,
    Cs,
    De,
    Nl,
    Es,
    Fr,
    Pt,
    Ru,
    Th,
    Tr,
    Vi,
    Zh,
}

impl Language {
    pub const ALL: [Language; 12] = [
        Language::En,
        Language::Cs,
        Language::De,
        Language::Nl,
        Language::Es,
        Language::Fr,
        Language::Pt,
        Language::Ru,
        Language::Th,
        Language::Tr,
        Language::Vi,
        Language::Zh,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Language::En => "EN",
            Language::Cs => "CS",
            Language::De => "DE",
            Language::Nl => "NL",
            Language::Es => "ES",
            Language::Fr => "FR",
            Language::Pt => "PT",
            Language::Ru => "RU",
            Language::Th => "TH",
            Language::Tr => "TR",
            Language::Vi => "VI",
            Language::Zh => "ZH",
        }
    }

    /// Scripts written without spaces between words.
    pub fn is_unsegmented(self) -> bool {
        matches!(self, Language::Th | Language::Zh)
    }

    /// Parses a comma-separated list; `all` expands to every language.
    pub fn parse_list(s: &str) -> Result<Vec<Language>, KbError> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Language::ALL.to_vec());
        }
        s.split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        Language::ALL
            .iter()
            .copied()
            .find(|l| l.code() == upper)
            .ok_or_else(|| KbError::UnknownLanguage(s.to_string()))
    }
}

impl TryFrom<String> for Language {
    type Error = KbError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Language> for String {
    fn from(l: Language) -> Self {
        l.code().to_string()
    }
}

const TERMINAL_PUNCTUATION: [char; 6] = ['.', '!', '?', '。', '！', '？'];

/// Canonical text form used for equality, deduplication and EM.
///
/// Trims, collapses whitespace runs, lowercases and strips terminal
/// sentence punctuation. Internal punctuation is kept.
pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let trimmed = out.trim_end_matches(TERMINAL_PUNCTUATION).trim_end();
        if trimmed.len() == out.len() {
            break;
        }
        out.truncate(trimmed.len());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for EntryId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(EntryId)
    }
}

/// One edited fact in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: EntryId,
    pub lang: Language,
    pub question: String,
    pub answer: String,
    /// UTC milliseconds.
    pub created_at: i64,
}

/// Ordered store of edited facts, unique per (language, normalized question).
///
/// Single-writer: mutation goes through `&mut self`. Readers that need a
/// stable view take a [`KnowledgeBase::snapshot`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
    index: HashMap<(Language, String), usize>,
    version: u64,
    next_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbHeader {
    kb_version: u64,
    next_id: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a knowledge base from one language's side of a dataset, in dataset order.
    pub fn from_records(records: &[ParallelRecord], lang: Language) -> Result<Self, KbError> {
        let mut kb = Self::new();
        for record in records {
            let r = record.get(lang);
            kb.upsert_fact(lang, &r.question, &r.answer)?;
        }
        Ok(kb)
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, id: EntryId) -> Option<&KnowledgeEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn find(&self, lang: Language, question: &str) -> Option<&KnowledgeEntry> {
        self.index
            .get(&(lang, normalize_text(question)))
            .map(|&i| &self.entries[i])
    }

    pub fn by_language(&self, lang: Language) -> impl Iterator<Item = &KnowledgeEntry> {
        self.entries.iter().filter(move |e| e.lang == lang)
    }

    pub fn snapshot(&self) -> std::sync::Arc<KnowledgeBase> {
        std::sync::Arc::new(self.clone())
    }

    /// Inserts a fact or replaces the answer of the existing entry with the
    /// same (language, normalized question). Returns the entry id and
    /// whether an existing entry was replaced.
    pub fn upsert_fact(
        &mut self,
        lang: Language,
        question: &str,
        answer: &str,
    ) -> Result<(EntryId, bool), KbError> {
        let key = normalize_text(question);
        if key.is_empty() {
            return Err(KbError::Validation("question is empty".into()));
        }
        if normalize_text(answer).is_empty() {
            return Err(KbError::Validation("answer is empty".into()));
        }
        self.version += 1;
        if let Some(&i) = self.index.get(&(lang, key.clone())) {
            self.entries[i].answer = answer.trim().to_string();
            return Ok((self.entries[i].id, true));
        }
        let id = EntryId(self.next_id);
        self.next_id += 1;
        self.index.insert((lang, key), self.entries.len());
        self.entries.push(KnowledgeEntry {
            id,
            lang,
            question: question.trim().to_string(),
            answer: answer.trim().to_string(),
            created_at: chrono::Utc::now().timestamp_millis(),
        });
        Ok((id, false))
    }

    /// Removes an entry by id. Returns the removed entry, if any.
    pub fn remove(&mut self, id: EntryId) -> Option<KnowledgeEntry> {
        let pos = self.entries.iter().position(|e| e.id == id)?;
        let removed = self.entries.remove(pos);
        self.version += 1;
        self.rebuild_index();
        Some(removed)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.lang, normalize_text(&e.question)), i))
            .collect();
    }

    /// Writes a header line followed by one JSON object per entry.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            let header = KbHeader {
                kb_version: self.version,
                next_id: self.next_id,
            };
            serde_json::to_writer(&mut w, &header).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
            for e in &self.entries {
                serde_json::to_writer(&mut w, e).map_err(io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses the line-delimited KB format. The optional first-line header
    /// carries the version; files without one get version = entry count.
    pub fn parse(text: &str) -> Result<Self, KbError> {
        let mut kb = Self::new();
        let mut header: Option<KbHeader> = None;
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| KbError::Format {
                line: line_no,
                reason: e.to_string(),
            })?;
            if value.get("kb_version").is_some() {
                if line_no != 1 {
                    return Err(KbError::Format {
                        line: line_no,
                        reason: "header is only allowed on the first line".into(),
                    });
                }
                header = Some(serde_json::from_value(value).map_err(|e| KbError::Format {
                    line: line_no,
                    reason: e.to_string(),
                })?);
                continue;
            }
            let entry: KnowledgeEntry =
                serde_json::from_value(value).map_err(|e| KbError::Format {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let key = normalize_text(&entry.question);
            if key.is_empty() || normalize_text(&entry.answer).is_empty() {
                return Err(KbError::Format {
                    line: line_no,
                    reason: "empty question or answer".into(),
                });
            }
            if !ids.insert(entry.id) {
                return Err(KbError::Format {
                    line: line_no,
                    reason: format!("duplicate id {}", entry.id),
                });
            }
            if kb.index.contains_key(&(entry.lang, key.clone())) {
                return Err(KbError::Format {
                    line: line_no,
                    reason: format!("duplicate ({}, question) entry", entry.lang),
                });
            }
            kb.index.insert((entry.lang, key), kb.entries.len());
            kb.next_id = kb.next_id.max(entry.id.0 + 1);
            kb.entries.push(entry);
        }
        match header {
            Some(h) => {
                if h.next_id < kb.next_id {
                    return Err(KbError::Format {
                        line: 1,
                        reason: "header next_id is below an existing id".into(),
                    });
                }
                kb.version = h.kb_version;
                kb.next_id = h.next_id;
            }
            None => kb.version = kb.entries.len() as u64,
        }
        Ok(kb)
    }
}

/// One benchmark item in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MzsreRecord {
    pub lang: Language,
    pub question: String,
    /// Counterfactual edit target.
    pub answer: String,
    pub ground_truth: String,
    pub rephrased_question: String,
    pub locality_question: String,
    pub locality_answer: String,
    pub portability_question: String,
    pub portability_answer: String,
}

pub const RECORD_FIELDS: [&str; 8] = [
    "question",
    "answer",
    "ground_truth",
    "rephrased_question",
    "locality_question",
    "locality_answer",
    "portability_question",
    "portability_answer",
];

impl MzsreRecord {
    fn field(&self, name: &str) -> &str {
        match name {
            "question" => &self.question,
            "answer" => &self.answer,
            "ground_truth" => &self.ground_truth,
            "rephrased_question" => &self.rephrased_question,
            "locality_question" => &self.locality_question,
            "locality_answer" => &self.locality_answer,
            "portability_question" => &self.portability_question,
            "portability_answer" => &self.portability_answer,
            _ => unreachable!("unknown record field {name}"),
        }
    }

    fn validate(&self, record_id: &str) -> Result<(), KbError> {
        for name in RECORD_FIELDS {
            if normalize_text(self.field(name)).is_empty() {
                return Err(KbError::Record {
                    record_id: record_id.to_string(),
                    field: format!("{}.{name}", self.lang),
                    reason: "empty".into(),
                });
            }
        }
        if normalize_text(&self.answer) == normalize_text(&self.ground_truth) {
            return Err(KbError::Record {
                record_id: record_id.to_string(),
                field: format!("{}.answer", self.lang),
                reason: "counterfactual answer equals ground truth".into(),
            });
        }
        Ok(())
    }
}

/// The same fact across all twelve languages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelRecord {
    pub record_id: String,
    records: BTreeMap<Language, MzsreRecord>,
}

impl ParallelRecord {
    pub fn new(
        record_id: impl Into<String>,
        records: impl IntoIterator<Item = MzsreRecord>,
    ) -> Result<Self, KbError> {
        let record_id = record_id.into();
        let mut map = BTreeMap::new();
        for r in records {
            r.validate(&record_id)?;
            let lang = r.lang;
            if map.insert(lang, r).is_some() {
                return Err(KbError::Record {
                    record_id,
                    field: lang.to_string(),
                    reason: "language given twice".into(),
                });
            }
        }
        if let Some(missing) = Language::ALL.iter().find(|l| !map.contains_key(l)) {
            return Err(KbError::Record {
                record_id,
                field: missing.to_string(),
                reason: "missing language block".into(),
            });
        }
        Ok(Self {
            record_id,
            records: map,
        })
    }

    pub fn get(&self, lang: Language) -> &MzsreRecord {
        // Construction guarantees all twelve languages.
        &self.records[&lang]
    }

    pub fn languages(&self) -> impl Iterator<Item = &MzsreRecord> {
        self.records.values()
    }
}

#[derive(Serialize, Deserialize)]
struct InterchangeRecord {
    record_id: String,
    languages: BTreeMap<Language, InterchangeBlock>,
}

#[derive(Serialize, Deserialize)]
struct InterchangeBlock {
    question: String,
    answer: String,
    ground_truth: String,
    rephrased_question: String,
    locality_question: String,
    locality_answer: String,
    portability_question: String,
    portability_answer: String,
}

impl Serialize for ParallelRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let languages = self
            .records
            .iter()
            .map(|(l, r)| {
                (
                    *l,
                    InterchangeBlock {
                        question: r.question.clone(),
                        answer: r.answer.clone(),
                        ground_truth: r.ground_truth.clone(),
                        rephrased_question: r.rephrased_question.clone(),
                        locality_question: r.locality_question.clone(),
                        locality_answer: r.locality_answer.clone(),
                        portability_question: r.portability_question.clone(),
                        portability_answer: r.portability_answer.clone(),
                    },
                )
            })
            .collect();
        InterchangeRecord {
            record_id: self.record_id.clone(),
            languages,
        }
        .serialize(serializer)
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str, record_id: &str, ctx: &str) -> Result<String, KbError> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(KbError::Record {
            record_id: record_id.to_string(),
            field: format!("{ctx}{name}"),
            reason: "not a string".into(),
        }),
        None => Err(KbError::Record {
            record_id: record_id.to_string(),
            field: format!("{ctx}{name}"),
            reason: "missing".into(),
        }),
    }
}

/// Parses an interchange document (a JSON array of records).
pub fn parse_mzsre(text: &str) -> Result<Vec<ParallelRecord>, KbError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| KbError::Document(e.to_string()))?;
    let items = doc
        .as_array()
        .ok_or_else(|| KbError::Document("top level must be an array of records".into()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| KbError::Document(format!("item {i} is not an object")))?;
        let record_id = match obj.get("record_id") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(KbError::Record {
                    record_id: format!("#{i}"),
                    field: "record_id".into(),
                    reason: "missing or empty".into(),
                })
            }
        };
        if !seen.insert(record_id.clone()) {
            return Err(KbError::DuplicateRecord(record_id));
        }
        let langs = obj
            .get("languages")
            .and_then(Value::as_object)
            .ok_or_else(|| KbError::Record {
                record_id: record_id.clone(),
                field: "languages".into(),
                reason: "missing or not an object".into(),
            })?;
        let mut blocks = Vec::with_capacity(12);
        for (code, block) in langs {
            let lang: Language = code.parse().map_err(|_| KbError::Record {
                record_id: record_id.clone(),
                field: format!("languages.{code}"),
                reason: "unknown language code".into(),
            })?;
            let block = block.as_object().ok_or_else(|| KbError::Record {
                record_id: record_id.clone(),
                field: format!("languages.{code}"),
                reason: "not an object".into(),
            })?;
            let ctx = format!("{lang}.");
            let f = |name| string_field(block, name, &record_id, &ctx);
            blocks.push(MzsreRecord {
                lang,
                question: f("question")?,
                answer: f("answer")?,
                ground_truth: f("ground_truth")?,
                rephrased_question: f("rephrased_question")?,
                locality_question: f("locality_question")?,
                locality_answer: f("locality_answer")?,
                portability_question: f("portability_question")?,
                portability_answer: f("portability_answer")?,
            });
        }
        out.push(ParallelRecord::new(record_id, blocks)?);
    }
    Ok(out)
}

pub fn ingest_mzsre(path: impl AsRef<Path>) -> Result<Vec<ParallelRecord>, KbError> {
    parse_mzsre(&fs::read_to_string(path)?)
}

pub fn write_mzsre(path: impl AsRef<Path>, records: &[ParallelRecord]) -> Result<(), KbError> {
    let text = serde_json::to_string_pretty(records).map_err(io::Error::from)?;
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictReason {
    ExactDuplicate,
    ConflictingAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupConflict {
    pub record_id: String,
    pub kept_record_id: String,
    pub reason: ConflictReason,
}

/// Keeps the first record per English normalized question.
pub fn deduplicate(records: Vec<ParallelRecord>) -> (Vec<ParallelRecord>, Vec<DedupConflict>) {
    let mut first: HashMap<String, usize> = HashMap::new();
    let mut kept: Vec<ParallelRecord> = Vec::new();
    let mut conflicts = Vec::new();
    for record in records {
        let en = record.get(Language::En);
        let key = normalize_text(&en.question);
        match first.get(&key) {
            Some(&k) => {
                let original = &kept[k];
                let reason = if normalize_text(&original.get(Language::En).answer)
                    == normalize_text(&en.answer)
                {
                    ConflictReason::ExactDuplicate
                } else {
                    ConflictReason::ConflictingAnswer
                };
                conflicts.push(DedupConflict {
                    record_id: record.record_id.clone(),
                    kept_record_id: original.record_id.clone(),
                    reason,
                });
            }
            None => {
                first.insert(key, kept.len());
                kept.push(record);
            }
        }
    }
    (kept, conflicts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Related,
    Unrelated,
}

/// Scorer training pair: a sentence and a candidate translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub source: (Language, String),
    pub target: (Language, String),
    pub label: PairLabel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn block(lang: Language, q: &str, a: &str) -> MzsreRecord {
        MzsreRecord {
            lang,
            question: q.into(),
            answer: a.into(),
            ground_truth: "Bonn".into(),
            rephrased_question: format!("{q} (rephrased)"),
            locality_question: "Who is the lead singer of collective soul?".into(),
            locality_answer: "Ed Roland".into(),
            portability_question: format!("{q} (portable)"),
            portability_answer: "Bavaria".into(),
        }
    }

    fn record(id: &str, q: &str, a: &str) -> ParallelRecord {
        ParallelRecord::new(id, Language::ALL.iter().map(|&l| block(l, q, a))).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("  Munich "), "munich");
        assert_eq!(normalize_text("Ed  Roland"), "ed roland");
        assert_eq!(normalize_text("慕尼黑。"), "慕尼黑");
        assert_eq!(normalize_text("St. Louis!"), "st. louis");
        assert_eq!(normalize_text("what ?! "), "what");
        assert_eq!(normalize_text(""), "");
    }

    #[test]
    fn language_parsing() {
        assert_eq!("es".parse::<Language>().unwrap(), Language::Es);
        assert_eq!(" Zh ".parse::<Language>().unwrap(), Language::Zh);
        assert!("xx".parse::<Language>().is_err());
        assert_eq!(Language::parse_list("all").unwrap().len(), 12);
        assert_eq!(
            Language::parse_list("en, th").unwrap(),
            vec![Language::En, Language::Th]
        );
    }

    #[test]
    fn upsert_semantics() {
        let mut kb = KnowledgeBase::new();
        let q = "¿Qué ciudad fue el lugar de nacimiento de Henning Löhlein?";
        let (id, replaced) = kb.upsert_fact(Language::Es, q, "Munich").unwrap();
        assert!(!replaced);
        assert_eq!(kb.version(), 1);
        let (id2, replaced) = kb.upsert_fact(Language::Es, q, "Munich").unwrap();
        assert!(replaced);
        assert_eq!(id, id2);
        assert_eq!(kb.len(), 1);
        assert_eq!(kb.version(), 2);
        kb.upsert_fact(Language::En, q, "Munich").unwrap();
        assert_eq!(kb.len(), 2);
        // Normalized-equal question replaces.
        let (_, replaced) = kb
            .upsert_fact(Language::Es, &format!("  {}", q.to_uppercase()), "Berlin")
            .unwrap();
        assert!(replaced);
        assert_eq!(kb.get(id).unwrap().answer, "Berlin");
    }

    #[test]
    fn upsert_rejects_empty() {
        let mut kb = KnowledgeBase::new();
        assert!(matches!(
            kb.upsert_fact(Language::En, "  ", "x"),
            Err(KbError::Validation(_))
        ));
        assert!(matches!(
            kb.upsert_fact(Language::En, "q", "."),
            Err(KbError::Validation(_))
        ));
        assert_eq!(kb.version(), 0);
    }

    #[test]
    fn remove_reindexes() {
        let mut kb = KnowledgeBase::new();
        let (a, _) = kb.upsert_fact(Language::En, "a?", "1").unwrap();
        kb.upsert_fact(Language::En, "b?", "2").unwrap();
        assert!(kb.remove(a).is_some());
        assert!(kb.remove(a).is_none());
        assert_eq!(kb.find(Language::En, "b").unwrap().answer, "2");
        let (_, replaced) = kb.upsert_fact(Language::En, "a?", "3").unwrap();
        assert!(!replaced);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut kb = KnowledgeBase::new();
        kb.upsert_fact(Language::Es, "¿Dónde?", "Munich").unwrap();
        kb.upsert_fact(Language::En, "Where?", "Munich").unwrap();
        kb.upsert_fact(Language::Zh, "哪里？", "慕尼黑").unwrap();
        kb.upsert_fact(Language::En, "Where?", "Berlin").unwrap();
        kb.save(&path).unwrap();
        let loaded = KnowledgeBase::load(&path).unwrap();
        assert_eq!(loaded.entries(), kb.entries());
        assert_eq!(loaded.version(), 4);
        assert_eq!(loaded, kb);
    }

    #[test]
    fn load_empty_and_duplicates() {
        let kb = KnowledgeBase::parse("").unwrap();
        assert!(kb.is_empty());
        assert_eq!(kb.version(), 0);

        let text = concat!(
            r#"{"id":0,"lang":"EN","question":"Where?","answer":"a","created_at":1}"#,
            "\n",
            r#"{"id":1,"lang":"ES","question":"Where?","answer":"a","created_at":1}"#,
            "\n",
            r#"{"id":2,"lang":"EN","question":"where","answer":"b","created_at":1}"#,
            "\n"
        );
        match KnowledgeBase::parse(text) {
            Err(KbError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
        match KnowledgeBase::parse("{\"id\":0}\n") {
            Err(KbError::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dedup_reasons() {
        let (kept, conflicts) = deduplicate(vec![
            record("1", "Where was X born?", "Munich"),
            record("2", "where was x born", "Munich"),
            record("3", "Where was X born?", "Berlin"),
            record("4", "Who?", "Y"),
        ]);
        assert_eq!(kept.len(), 2);
        assert_eq!(
            conflicts
                .iter()
                .map(|c| (c.record_id.as_str(), c.reason))
                .collect::<Vec<_>>(),
            vec![
                ("2", ConflictReason::ExactDuplicate),
                ("3", ConflictReason::ConflictingAnswer)
            ]
        );
        let (again, none) = deduplicate(kept.clone());
        assert_eq!(again, kept);
        assert!(none.is_empty());
    }

    #[test]
    fn ingest_errors_name_record_and_field() {
        let rec = record("r1", "Q?", "A");
        let mut doc = serde_json::to_value(vec![&rec]).unwrap();
        let text = doc.to_string();
        assert_eq!(parse_mzsre(&text).unwrap(), vec![rec.clone()]);

        doc[0]["languages"].as_object_mut().unwrap().remove("TH");
        let err = parse_mzsre(&doc.to_string()).unwrap_err().to_string();
        assert!(err.contains("r1") && err.contains("TH"), "{err}");

        let mut doc = serde_json::to_value(vec![&rec]).unwrap();
        doc[0]["languages"]["DE"]
            .as_object_mut()
            .unwrap()
            .remove("locality_answer");
        let err = parse_mzsre(&doc.to_string()).unwrap_err().to_string();
        assert!(err.contains("DE.locality_answer"), "{err}");

        let dup = serde_json::to_string(&vec![&rec, &rec]).unwrap();
        assert!(matches!(
            parse_mzsre(&dup),
            Err(KbError::DuplicateRecord(id)) if id == "r1"
        ));
        assert!(parse_mzsre("").unwrap().is_empty());
        assert!(parse_mzsre("[]").unwrap().is_empty());
    }

    #[test]
    fn counterfactual_must_differ_from_ground_truth() {
        let mut b = block(Language::En, "Q?", "Bonn");
        b.ground_truth = "bonn.".into();
        let err = ParallelRecord::new("x", [b]).unwrap_err().to_string();
        assert!(err.contains("EN.answer"), "{err}");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_with_punctuation(s in "[ a-zA-ZİΣσß.!?。 \t\n]{0,30}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn upserts_keep_keys_unique(ops in proptest::collection::vec((0usize..3, "[a-c ]{1,4}[.?]?", "[x-z]{1,3}"), 0..40)) {
            let mut kb = KnowledgeBase::new();
            let mut version = 0;
            for (l, q, a) in ops {
                if kb.upsert_fact(Language::ALL[l], &q, &a).is_ok() {
                    version += 1;
                }
                prop_assert_eq!(kb.version(), version);
            }
            let mut keys = HashSet::new();
            for e in kb.entries() {
                prop_assert!(keys.insert((e.lang, normalize_text(&e.question))));
            }
        }
    }
}
