//! Plans behind the golden prompt files: the Löhlein edit in Spanish probed
//! in English, with zero to sixteen Spanish/English demonstrations.

use std::path::Path;

use mkedit_core::kb::{EntryId, KnowledgeEntry, Language};
use mkedit_core::prompting::{PromptMode, PromptPlan};
use mkedit_core::retrieval::{ExamplePair, QaSide};
use mkedit_core::synthetic::synthetic_dataset;

pub const SHOT_SERIES: [usize; 4] = [2, 4, 8, 16];

fn fact() -> KnowledgeEntry {
    KnowledgeEntry {
        id: EntryId(0),
        lang: Language::Es,
        question: "¿Qué ciudad fue el lugar de nacimiento de Henning Löhlein?".into(),
        answer: "Munich".into(),
        created_at: 0,
    }
}

fn examples(n: usize) -> Vec<ExamplePair> {
    synthetic_dataset(n)
        .iter()
        .map(|r| {
            let side = |lang| {
                let b = r.get(lang);
                QaSide {
                    lang,
                    question: b.question.clone(),
                    answer: b.answer.clone(),
                }
            };
            ExamplePair {
                record_id: r.record_id.clone(),
                edit_side: side(Language::Es),
                test_side: side(Language::En),
                similarity: 0.0,
            }
        })
        .collect()
}

fn plan(mode: PromptMode, shots: usize) -> PromptPlan {
    PromptPlan {
        examples: examples(shots),
        knowledge: Some(vec![fact()]),
        query: "Which city was the birthplace of Henning Löhlein?".into(),
        query_lang: Language::En,
        mode,
    }
}

/// `(file name, plan)` for every golden prompt.
pub fn golden_plans() -> Vec<(String, PromptPlan)> {
    let mut out = vec![("zero.txt".to_string(), plan(PromptMode::Zero, 0))];
    for (tag, mode) in [("mono", PromptMode::FewMono), ("bi", PromptMode::FewBi)] {
        for n in SHOT_SERIES {
            out.push((format!("{tag}-{n}.txt"), plan(mode, n)));
        }
    }
    out
}

/// Names of golden files whose bytes differ from the rendered plan.
pub fn mismatches(dir: &Path) -> Vec<String> {
    golden_plans()
        .into_iter()
        .filter(|(name, plan)| {
            let rendered = mkedit_core::prompting::render(plan).unwrap().text;
            std::fs::read(dir.join(name)).ok().as_deref() != Some(rendered.as_bytes())
        })
        .map(|(name, _)| name)
        .collect()
}
