//! Deterministic synthetic benchmark data and the matching mock fixtures.
//!
//! Record `i` edits the home city of `entity{i}`. Its locality question asks
//! about `company{i}` with the same wording, so it is lexically close to the
//! edited fact and only the embedding keeps it apart. Non-English blocks are
//! the English text tagged with the language code.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gateway::{hashed_unit_vector, Embedder, FixtureEmbedder, GatewayError, MockScript};
use crate::kb::{Language, MzsreRecord, ParallelRecord};

pub const DEFAULT_DIM: usize = 256;

fn tag(lang: Language, text: String) -> String {
    if lang == Language::En {
        text
    } else {
        format!("[{lang}] {text}")
    }
}

fn block(i: usize, lang: Language) -> MzsreRecord {
    let t = |s: String| tag(lang, s);
    MzsreRecord {
        lang,
        question: t(format!("What is the home city of entity{i}?")),
        answer: format!("Newtown {i}"),
        ground_truth: format!("Oldtown {i}"),
        rephrased_question: t(format!("Entity{i} has which home city?")),
        locality_question: t(format!("What is the home city of company{i}?")),
        locality_answer: format!("Harbor {i}"),
        portability_question: t(format!("Which country contains the home city of entity{i}?")),
        portability_answer: format!("Newland {i}"),
    }
}

pub fn record_id(i: usize) -> String {
    format!("syn-{i:05}")
}

pub fn synthetic_dataset(n: usize) -> Vec<ParallelRecord> {
    (0..n)
        .map(|i| {
            ParallelRecord::new(record_id(i), Language::ALL.map(|l| block(i, l)))
                .expect("synthetic records are valid")
        })
        .collect()
}

fn fact_key(record: &ParallelRecord) -> String {
    format!("{}/fact", record.record_id)
}

/// Embedder under which each record's question, paraphrase and portability
/// question share one vector in every language, and its locality question
/// has an independent one. Anything else falls back to hashed vectors.
pub fn mirrored_fixture(
    dataset: &[ParallelRecord],
    dim: usize,
    seed: u64,
) -> Result<FixtureEmbedder, GatewayError> {
    let mut fx = FixtureEmbedder::new(dim, seed);
    for r in dataset {
        let fact = hashed_unit_vector(&fact_key(r), seed, dim);
        let local = hashed_unit_vector(&format!("{}/locality", r.record_id), seed, dim);
        for b in r.languages() {
            fx.insert_group(
                [
                    b.question.as_str(),
                    b.rephrased_question.as_str(),
                    b.portability_question.as_str(),
                ],
                fact.clone(),
            )?;
            fx.insert(&b.locality_question, local.clone())?;
        }
    }
    Ok(fx)
}

/// Gives `round(fraction * n)` records a fresh random vector for their
/// `lang` question, breaking its link to the other languages and to the
/// paraphrase. Returns the affected record ids in dataset order.
pub fn corrupt_fixture(
    fixture: &mut FixtureEmbedder,
    dataset: &[ParallelRecord],
    lang: Language,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>, GatewayError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(GatewayError::InvalidRequest(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let count = (fraction * dataset.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, dataset.len(), count).into_vec();
    picked.sort_unstable();
    let dim = Embedder::dim(fixture).expect("fixtures have a fixed dimension");
    let mut ids = Vec::with_capacity(count);
    for i in picked {
        let r = &dataset[i];
        let noise = hashed_unit_vector(&format!("{}/corrupt", r.record_id), seed, dim);
        fixture.insert(&r.get(lang).question, noise)?;
        ids.push(r.record_id.clone());
    }
    Ok(ids)
}

/// Pre-edit answers of the scripted model: the real-world answer for the
/// edited question and its paraphrase, the gold answer for locality, and a
/// pre-edit guess for portability.
pub fn mock_script(dataset: &[ParallelRecord]) -> MockScript {
    let mut script = MockScript::default();
    for r in dataset {
        for b in r.languages() {
            script.add_answer(b.lang, &b.question, &b.ground_truth);
            script.add_answer(b.lang, &b.rephrased_question, &b.ground_truth);
            script.add_answer(b.lang, &b.locality_question, &b.locality_answer);
            script.add_answer(b.lang, &b.portability_question, &format!("Oldland of {}", r.record_id));
        }
    }
    script
}
