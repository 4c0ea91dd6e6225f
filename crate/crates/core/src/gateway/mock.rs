//! Scripted stand-ins for the generation and classification services.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    apply_stop_sequences, embed_one, Embedder, GatewayError, GenerationRequest,
    GenerationResponse, Generator, PairClassifier,
};
use crate::kb::{normalize_text, Language};
use crate::prompting::{encode_pair, parse_blocks};

fn is_unsegmented_char(c: char) -> bool {
    matches!(c as u32,
        0x0E00..=0x0E7F        // Thai
        | 0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF)
}

fn overlap_tokens(s: &str) -> HashSet<String> {
    let mut out = HashSet::new();
    for tok in normalize_text(s).split_whitespace() {
        if tok.chars().any(is_unsegmented_char) {
            out.extend(tok.chars().map(String::from));
        } else {
            out.insert(tok.to_string());
        }
    }
    out
}

/// Fraction of the query's distinct normalized tokens that also occur in
/// `text`. Thai and CJK runs count per character.
pub fn token_overlap(text: &str, query: &str) -> f64 {
    let q = overlap_tokens(query);
    if q.is_empty() {
        return 0.0;
    }
    let t = overlap_tokens(text);
    q.intersection(&t).count() as f64 / q.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseAnswer {
    pub lang: Language,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScriptFile {
    base_answers: Vec<BaseAnswer>,
    overlap_floor: f64,
    default_answer: String,
}

/// Pre-edit behaviour of the scripted model.
#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    base_answers: BTreeMap<(Language, String), String>,
    overlap_floor: f64,
    default_answer: String,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            base_answers: BTreeMap::new(),
            overlap_floor: 0.5,
            default_answer: "unknown".into(),
        }
    }
}

impl MockScript {
    pub fn new(overlap_floor: f64, default_answer: impl Into<String>) -> Result<Self, GatewayError> {
        if !(0.0..=1.0).contains(&overlap_floor) {
            return Err(GatewayError::Script(format!(
                "overlap_floor {overlap_floor} outside [0, 1]"
            )));
        }
        Ok(Self {
            base_answers: BTreeMap::new(),
            overlap_floor,
            default_answer: default_answer.into(),
        })
    }

    pub fn with_answer(mut self, lang: Language, question: &str, answer: &str) -> Self {
        self.add_answer(lang, question, answer);
        self
    }

    pub fn add_answer(&mut self, lang: Language, question: &str, answer: &str) {
        self.base_answers
            .insert((lang, normalize_text(question)), answer.to_string());
    }

    pub fn overlap_floor(&self) -> f64 {
        self.overlap_floor
    }

    pub fn default_answer(&self) -> &str {
        &self.default_answer
    }

    /// Base answer for a question in any language; the lowest language
    /// code wins when several languages share the text.
    pub fn base_answer(&self, question: &str) -> Option<&str> {
        let key = normalize_text(question);
        Language::ALL
            .iter()
            .find_map(|&l| self.base_answers.get(&(l, key.clone())))
            .map(String::as_str)
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        let mut script = Self::new(file.overlap_floor, file.default_answer)?;
        for b in file.base_answers {
            script.add_answer(b.lang, &b.question, &b.answer);
        }
        Ok(script)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Script(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            base_answers: self
                .base_answers
                .iter()
                .map(|((lang, question), answer)| BaseAnswer {
                    lang: *lang,
                    question: question.clone(),
                    answer: answer.clone(),
                })
                .collect(),
            overlap_floor: self.overlap_floor,
            default_answer: self.default_answer.clone(),
        };
        serde_json::to_string_pretty(&file).expect("script serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        fs::write(path, self.to_json()).map_err(|e| GatewayError::Script(e.to_string()))
    }
}

/// Deterministic model: answers from a fact in the prompt when one matches
/// the final query, otherwise from its base table.
///
/// A fact matches when its question's token overlap with the query reaches
/// the script's floor. With an alignment embedder attached, a fact whose
/// question embeds to exactly the query's vector counts as full overlap,
/// which is how translated questions are recognised.
pub struct MockGenerator {
    script: MockScript,
    alignment: Option<Arc<dyn Embedder>>,
    latency_per_byte: Duration,
}

impl MockGenerator {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            alignment: None,
            latency_per_byte: Duration::from_micros(20),
        }
    }

    pub fn with_alignment(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.alignment = Some(embedder);
        self
    }

    pub fn with_latency_per_byte(mut self, per_byte: Duration) -> Self {
        self.latency_per_byte = per_byte;
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn overlap(&self, fact_question: &str, query: &str) -> Result<f64, GatewayError> {
        if let Some(embedder) = &self.alignment {
            let v = embedder.embed(&[fact_question, query])?;
            if v[0].cosine(&v[1])? >= 1.0 - 1e-9 {
                return Ok(1.0);
            }
        }
        Ok(token_overlap(fact_question, query))
    }

    /// The answer the model gives for `prompt`, before stop sequences.
    pub fn answer(&self, prompt: &str) -> Result<String, GatewayError> {
        let parsed = match parse_blocks(prompt) {
            Ok(p) => p,
            Err(_) => return Ok(self.fallback(prompt)),
        };
        let mut best: Option<(f64, &str)> = None;
        for fact in &parsed.facts {
            let (question, answer) = fact.split();
            let score = self.overlap(question, &parsed.query)?;
            if score >= self.script.overlap_floor && best.is_none_or(|(b, _)| score > b) {
                best = Some((score, answer));
            }
        }
        Ok(match best {
            Some((_, answer)) => answer.to_string(),
            None => self.fallback(&parsed.query),
        })
    }

    fn fallback(&self, query: &str) -> String {
        self.script
            .base_answer(query)
            .unwrap_or(&self.script.default_answer)
            .to_string()
    }
}

impl Generator for MockGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        request.validate()?;
        let text = self.answer(&request.prompt)?;
        Ok(GenerationResponse {
            text: apply_stop_sequences(&text, &request.stop_sequences),
            latency: self.latency_per_byte * request.prompt.len() as u32,
            backend: self.descriptor(),
        })
    }

    fn descriptor(&self) -> String {
        "mock".into()
    }
}

/// Local pair classifier honouring the wire encoding: each pair is joined
/// as `a {separator} b`, split back, and scored as `(cos + 1) / 2`.
pub struct MockClassifier {
    embedder: Arc<dyn Embedder>,
    separator: String,
    cache: std::sync::Mutex<HashMap<String, f64>>,
}

impl MockClassifier {
    pub fn new(embedder: Arc<dyn Embedder>, separator: impl Into<String>) -> Self {
        Self {
            embedder,
            separator: separator.into(),
            cache: Default::default(),
        }
    }
}

impl PairClassifier for MockClassifier {
    fn classify(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, GatewayError> {
        let marker = format!(" {} ", self.separator);
        pairs
            .iter()
            .map(|&(a, b)| {
                let encoded = encode_pair(a, b, &self.separator);
                if let Some(p) = self.cache.lock().unwrap().get(&encoded) {
                    return Ok(*p);
                }
                let (left, right) = encoded.split_once(&marker).ok_or_else(|| {
                    GatewayError::InvalidRequest("pair encoding lost its separator".into())
                })?;
                let cos = embed_one(self.embedder.as_ref(), left)?
                    .cosine(&embed_one(self.embedder.as_ref(), right)?)?;
                let p = (cos + 1.0) / 2.0;
                self.cache.lock().unwrap().insert(encoded, p);
                Ok(p)
            })
            .collect()
    }
}
