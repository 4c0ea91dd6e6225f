//! Prompt plans and their canonical text form.
//!
//! Grammar of a scaffolded prompt (LF line endings, no trailing newline):
//!
//! ```text
//! Q: <edit question> A: <edit answer>        \
//! Q: <test question> A: <test answer>        /  one block per example (second line only when bilingual)
//!                                            blank line between blocks and before the facts
//! New Fact: <question> <answer>              zero or more fact lines
//! Q: <query>
//! A:
//! ```
//!
//! A passthrough prompt is the bare query.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{KnowledgeEntry, Language};
use crate::retrieval::{ExamplePair, ScoredFact};

const FACT_PREFIX: &str = "New Fact: ";
const Q_PREFIX: &str = "Q: ";
const A_MARKER: &str = " A: ";
const ANSWER_TAIL: &str = "A:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("few-shot mode {0} requires at least one example")]
    MissingExamples(PromptMode),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("rendered prompt is {len} bytes, limit is {limit}")]
    TooLong { len: usize, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Zero,
    FewMono,
    FewBi,
    IkeAll,
    Passthrough,
}

impl PromptMode {
    pub fn is_few_shot(self) -> bool {
        matches!(self, PromptMode::FewMono | PromptMode::FewBi)
    }

    /// Modes that consult the retriever.
    pub fn is_retrieval(self) -> bool {
        matches!(self, PromptMode::Zero | PromptMode::FewMono | PromptMode::FewBi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Zero => "zero",
            PromptMode::FewMono => "few_mono",
            PromptMode::FewBi => "few_bi",
            PromptMode::IkeAll => "ike_all",
            PromptMode::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero" => Ok(PromptMode::Zero),
            "few_mono" => Ok(PromptMode::FewMono),
            "few_bi" => Ok(PromptMode::FewBi),
            "ike_all" | "ike" => Ok(PromptMode::IkeAll),
            "passthrough" => Ok(PromptMode::Passthrough),
            other => Err(PromptError::InvalidPlan(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub examples: Vec<ExamplePair>,
    pub knowledge: Option<Vec<KnowledgeEntry>>,
    pub query: String,
    pub query_lang: Language,
    pub mode: PromptMode,
}

impl PromptPlan {
    pub fn passthrough(query: impl Into<String>, query_lang: Language) -> Self {
        Self {
            examples: Vec::new(),
            knowledge: None,
            query: query.into(),
            query_lang,
            mode: PromptMode::Passthrough,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |m: &str| Err(PromptError::InvalidPlan(m.to_string()));
        match self.mode {
            PromptMode::Passthrough => {
                if !self.examples.is_empty() || self.knowledge.is_some() {
                    return invalid("passthrough carries no examples or knowledge");
                }
                return Ok(());
            }
            PromptMode::Zero if !self.examples.is_empty() => {
                return invalid("zero-shot plan carries examples")
            }
            m if m.is_few_shot() && self.examples.is_empty() => {
                return Err(PromptError::MissingExamples(m))
            }
            _ => {}
        }
        match (&self.knowledge, self.mode) {
            (None, _) => return invalid("knowledge block missing"),
            (Some(k), m) if m != PromptMode::IkeAll && k.len() != 1 => {
                return invalid("retrieval modes carry exactly one fact")
            }
            _ => {}
        }
        let mut fields: Vec<&str> = vec![&self.query];
        for ex in &self.examples {
            fields.extend([
                ex.edit_side.question.as_str(),
                &ex.edit_side.answer,
                &ex.test_side.question,
                &ex.test_side.answer,
            ]);
        }
        for k in self.knowledge.iter().flatten() {
            fields.extend([k.question.as_str(), &k.answer]);
        }
        if fields.iter().any(|f| f.contains(['\n', '\r'])) {
            return invalid("scaffolded prompt fields must be single-line");
        }
        if self.query.trim().is_empty() {
            return invalid("empty query");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub plan_digest: String,
}

/// Assembles the plan for one query. Retrieval modes without a retrieved
/// fact degrade to passthrough.
pub fn build_plan(
    mode: PromptMode,
    query: &str,
    query_lang: Language,
    retrieved: Option<&ScoredFact>,
    kb: &[KnowledgeEntry],
    examples: Vec<ExamplePair>,
) -> Result<PromptPlan, PromptError> {
    if mode.is_few_shot() && retrieved.is_some() && examples.is_empty() {
        return Err(PromptError::MissingExamples(mode));
    }
    let plan = match (mode, retrieved) {
        (PromptMode::Passthrough, _) => PromptPlan::passthrough(query, query_lang),
        (PromptMode::IkeAll, _) => PromptPlan {
            examples,
            knowledge: Some(kb.to_vec()),
            query: query.to_string(),
            query_lang,
            mode,
        },
        (_, None) => PromptPlan::passthrough(query, query_lang),
        (_, Some(fact)) => PromptPlan {
            examples: if mode == PromptMode::Zero { Vec::new() } else { examples },
            knowledge: Some(vec![fact.entry.clone()]),
            query: query.to_string(),
            query_lang,
            mode,
        },
    };
    plan.validate()?;
    Ok(plan)
}

pub fn render(plan: &PromptPlan) -> Result<RenderedPrompt, PromptError> {
    plan.validate()?;
    let text = if plan.mode == PromptMode::Passthrough {
        plan.query.clone()
    } else {
        let mut sections = Vec::new();
        if !plan.examples.is_empty() {
            let blocks: Vec<String> = plan
                .examples
                .iter()
                .map(|ex| {
                    let edit = format!("Q: {} A: {}", ex.edit_side.question, ex.edit_side.answer);
                    if plan.mode == PromptMode::FewBi {
                        format!(
                            "{edit}\nQ: {} A: {}",
                            ex.test_side.question, ex.test_side.answer
                        )
                    } else {
                        edit
                    }
                })
                .collect();
            sections.push(blocks.join("\n\n"));
        }
        let mut tail = String::new();
        for k in plan.knowledge.iter().flatten() {
            tail.push_str(&format!("{FACT_PREFIX}{} {}\n", k.question, k.answer));
        }
        tail.push_str(&format!("{Q_PREFIX}{}\n{ANSWER_TAIL}", plan.query));
        sections.push(tail);
        sections.join("\n\n")
    };
    Ok(RenderedPrompt {
        text,
        plan_digest: plan.digest(),
    })
}

/// Renders and enforces a maximum length in bytes.
pub fn render_bounded(plan: &PromptPlan, limit: usize) -> Result<RenderedPrompt, PromptError> {
    let r = render(plan)?;
    if r.text.len() > limit {
        return Err(PromptError::TooLong {
            len: r.text.len(),
            limit,
        });
    }
    Ok(r)
}

/// Pair text as sent to a relevance classifier.
pub fn encode_pair(a: &str, b: &str, separator: &str) -> String {
    format!("{a} {separator} {b}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaLine {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleBlock {
    pub lines: Vec<QaLine>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactLine {
    pub text: String,
}

impl FactLine {
    /// Splits `"<question> <answer>"` after the last question mark that is
    /// followed by a space; without one, the last word is the answer.
    pub fn split(&self) -> (&str, &str) {
        let t = self.text.as_str();
        let cut = t
            .char_indices()
            .filter(|&(i, c)| matches!(c, '?' | '？' | '؟') && t[i + c.len_utf8()..].starts_with(' '))
            .map(|(i, c)| i + c.len_utf8())
            .next_back();
        match cut {
            Some(i) => (&t[..i], t[i..].trim_start()),
            None => match t.rfind(' ') {
                Some(i) => (&t[..i], &t[i + 1..]),
                None => (t, ""),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub examples: Vec<ExampleBlock>,
    pub facts: Vec<FactLine>,
    pub query: String,
    /// False for a bare (passthrough) query.
    pub scaffolded: bool,
}

impl ParsedPrompt {
    pub fn bare(query: &str) -> Self {
        Self {
            examples: Vec::new(),
            facts: Vec::new(),
            query: query.to_string(),
            scaffolded: false,
        }
    }
}

fn parse_qa(line: &str, offset: usize) -> Result<QaLine, PromptError> {
    let body = line.strip_prefix(Q_PREFIX).ok_or_else(|| PromptError::Parse {
        offset,
        reason: "example line must start with `Q: `".into(),
    })?;
    let (q, a) = body.split_once(A_MARKER).ok_or_else(|| PromptError::Parse {
        offset,
        reason: "example line lacks ` A: `".into(),
    })?;
    Ok(QaLine {
        question: q.to_string(),
        answer: a.to_string(),
    })
}

/// Recovers the block structure of a rendered prompt. Text that does not
/// end in the `A:` tail is a bare query.
pub fn parse_blocks(text: &str) -> Result<ParsedPrompt, PromptError> {
    if !text.ends_with(&format!("\n{ANSWER_TAIL}")) {
        return Ok(ParsedPrompt::bare(text));
    }
    let mut lines = Vec::new();
    let mut offset = 0;
    for line in text.split('\n') {
        lines.push((offset, line));
        offset += line.len() + 1;
    }
    let n = lines.len();
    let (q_off, q_line) = lines[n - 2];
    let query = q_line.strip_prefix(Q_PREFIX).ok_or_else(|| PromptError::Parse {
        offset: q_off,
        reason: "query line must start with `Q: `".into(),
    })?;

    let mut k = n - 2;
    let mut facts = Vec::new();
    while k > 0 {
        match lines[k - 1].1.strip_prefix(FACT_PREFIX) {
            Some(rest) => {
                facts.push(FactLine {
                    text: rest.to_string(),
                });
                k -= 1;
            }
            None => break,
        }
    }
    facts.reverse();

    let mut examples = Vec::new();
    if k > 0 {
        let (sep_off, sep) = lines[k - 1];
        if !sep.is_empty() {
            return Err(PromptError::Parse {
                offset: sep_off,
                reason: "expected a blank line before facts and query".into(),
            });
        }
        let mut block: Vec<QaLine> = Vec::new();
        let mut block_off = 0;
        for &(off, line) in &lines[..k - 1] {
            if line.is_empty() {
                if block.is_empty() {
                    return Err(PromptError::Parse {
                        offset: off,
                        reason: "empty example block".into(),
                    });
                }
                examples.push(ExampleBlock {
                    lines: std::mem::take(&mut block),
                });
                continue;
            }
            if block.is_empty() {
                block_off = off;
            }
            if block.len() == 2 {
                return Err(PromptError::Parse {
                    offset: block_off,
                    reason: "example block has more than two lines".into(),
                });
            }
            block.push(parse_qa(line, off)?);
        }
        if block.is_empty() {
            return Err(PromptError::Parse {
                offset: lines[k - 1].0,
                reason: "empty example block".into(),
            });
        }
        examples.push(ExampleBlock { lines: block });
    }
    Ok(ParsedPrompt {
        examples,
        facts,
        query: query.to_string(),
        scaffolded: true,
    })
}
