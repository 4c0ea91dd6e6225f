use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::kb::{normalize_text, Language};

/// How predictions are compared, recorded in every report.
pub const NORMALIZATION: &str = "lowercase, whitespace collapsed, terminal . ! ? 。 ！ ？ stripped; \
F1 tokens are characters for TH and ZH, whitespace-separated words otherwise";

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize_text(pred) == normalize_text(gold) {
        1.0
    } else {
        0.0
    }
}

pub fn tokenize(text: &str, lang: Language) -> Vec<String> {
    let norm = normalize_text(text);
    if lang.is_unsegmented() {
        norm.chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect()
    } else {
        norm.split_whitespace().map(String::from).collect()
    }
}

/// Harmonic mean of token precision and recall over the multiset overlap.
pub fn token_f1(pred: &str, gold: &str, lang: Language) -> f64 {
    let p = tokenize(pred, lang);
    let g = tokenize(gold, lang);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub em: f64,
    pub f1: f64,
}

impl MetricSet {
    pub fn score(pred: &str, gold: &str, lang: Language) -> Self {
        let em = exact_match(pred, gold);
        // Normalized equality implies identical token lists.
        let f1 = if em == 1.0 { 1.0 } else { token_f1(pred, gold, lang) };
        Self { em, f1 }
    }

    /// Arithmetic mean, summed in iteration order. Empty input gives zeros.
    pub fn mean<'a>(sets: impl IntoIterator<Item = &'a MetricSet>) -> Self {
        let (mut em, mut f1, mut n) = (0.0, 0.0, 0usize);
        for s in sets {
            em += s.em;
            f1 += s.f1;
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            em: em / n as f64,
            f1: f1 / n as f64,
        }
    }
}
