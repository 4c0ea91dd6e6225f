use std::sync::Arc;
use std::time::Duration;

use mkedit_core::eval::{
    ablate_kb_size, ablate_shots, default_latency_settings, measure_latency, run_matrix,
    EvalConfig, MetricSet,
};
use mkedit_core::gateway::{ConstantEmbedder, Embedder, MockGenerator};
use mkedit_core::kb::{Language, ParallelRecord};
use mkedit_core::pipeline::{Backends, PipelineConfig};
use mkedit_core::prompting::PromptMode;
use mkedit_core::retrieval::{CosineScorer, Probe};
use mkedit_core::synthetic::{mirrored_fixture, mock_script, synthetic_dataset, DEFAULT_DIM};

fn backends_with(data: &[ParallelRecord], embedder: Arc<dyn Embedder>) -> Backends {
    Backends {
        generator: Arc::new(
            MockGenerator::new(mock_script(data))
                .with_alignment(embedder.clone())
                .with_latency_per_byte(Duration::from_micros(20)),
        ),
        embedder: embedder.clone(),
        scorer: Arc::new(CosineScorer::new(embedder, 0.75)),
    }
}

fn mirrored(data: &[ParallelRecord]) -> Backends {
    backends_with(data, Arc::new(mirrored_fixture(data, DEFAULT_DIM, 11).unwrap()))
}

fn few_bi(shots: usize) -> EvalConfig {
    EvalConfig {
        pipeline: PipelineConfig {
            mode: PromptMode::FewBi,
            shots,
            ..PipelineConfig::default()
        },
        ..EvalConfig::default()
    }
}

#[test]
fn english_matrix_is_perfect_under_mirrored_fixture() {
    let data = synthetic_dataset(100);
    let report = run_matrix(&data, &[Language::En], &[Language::En], None, &few_bi(16), &mirrored(&data)).unwrap();
    let cell = &report.cells[0];
    assert_eq!(cell.n, 100);
    assert_eq!(cell.failure_count, 0);
    assert_eq!(cell.reliability.em, 1.0);
    assert_eq!(cell.generality.em, 1.0);
    assert_eq!(cell.locality.em, 1.0);
    assert_eq!(cell.retrieval_accuracy.locality, 1.0);
    for m in [cell.reliability, cell.generality, cell.locality, cell.portability] {
        assert!((0.0..=1.0).contains(&m.em) && (0.0..=1.0).contains(&m.f1));
    }
    let mean = MetricSet::mean(cell.cases.iter().map(|c| &c.portability));
    assert!((mean.f1 - cell.portability.f1).abs() < 1e-12);
}

#[test]
fn cross_lingual_cells_are_perfect_too() {
    let data = synthetic_dataset(30);
    let report = run_matrix(
        &data,
        &[Language::Es, Language::Zh],
        &[Language::En, Language::Th],
        None,
        &few_bi(4),
        &mirrored(&data),
    )
    .unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert_eq!((c.reliability.em, c.generality.em, c.locality.em), (1.0, 1.0, 1.0), "{}->{}", c.edit_lang, c.test_lang);
    }
}

#[test]
fn constant_embedder_breaks_locality() {
    let data = synthetic_dataset(100);
    let b = backends_with(&data, Arc::new(ConstantEmbedder::new(8)));
    let report = run_matrix(&data, &[Language::En], &[Language::En], None, &few_bi(16), &b).unwrap();
    assert!(report.cells[0].locality.em < 1.0);
}

#[test]
fn reports_are_reproducible_without_timing() {
    let data = synthetic_dataset(40);
    let config = EvalConfig {
        concurrency: 8,
        ..few_bi(4)
    };
    let a = run_matrix(&data, &[Language::En], &[Language::De], None, &config, &mirrored(&data)).unwrap();
    let b = run_matrix(&data, &[Language::En], &[Language::De], None, &config, &mirrored(&data)).unwrap();
    assert_eq!(a.without_timing().to_json(), b.without_timing().to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    let ids: Vec<&str> = a.cells[0].cases.iter().map(|c| c.record_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn kb_size_does_not_change_mock_metrics() {
    let data = synthetic_dataset(100);
    let ab = ablate_kb_size(
        &data,
        &[10, 100],
        None,
        Language::En,
        Language::En,
        None,
        &few_bi(2),
        &mirrored(&data),
    )
    .unwrap();
    assert_eq!(ab.rows.len(), 2);
    assert_eq!(ab.test_size, 10);
    let (a, b) = (&ab.rows[0], &ab.rows[1]);
    assert_eq!(
        (a.reliability, a.generality, a.locality, a.portability),
        (b.reliability, b.generality, b.locality, b.portability)
    );
    assert_eq!(a.retrieval_accuracy, b.retrieval_accuracy);

    let err = ablate_kb_size(&data, &[0, 10], None, Language::En, Language::En, None, &few_bi(2), &mirrored(&data));
    assert!(err.is_err());
    let err = ablate_kb_size(&data, &[10, 101], None, Language::En, Language::En, None, &few_bi(2), &mirrored(&data));
    assert!(err.is_err());
}

#[test]
fn shot_ablation_rows() {
    let data = synthetic_dataset(20);
    let ab = ablate_shots(&data, &[0, 2, 4], Language::En, Language::Fr, None, &few_bi(16), &mirrored(&data)).unwrap();
    let modes: Vec<PromptMode> = ab.rows.iter().map(|r| r.mode).collect();
    assert_eq!(modes, [PromptMode::Zero, PromptMode::FewBi, PromptMode::FewBi]);
    assert!(ab.rows.iter().all(|r| r.reliability.em == 1.0));
    assert!(ablate_shots(&data, &[20], Language::En, Language::Fr, None, &few_bi(16), &mirrored(&data)).is_err());
}

#[test]
fn latency_grows_with_shots() {
    let data = synthetic_dataset(30);
    let table = measure_latency(
        &default_latency_settings(),
        5,
        &data,
        Language::En,
        Language::En,
        None,
        &PipelineConfig::default(),
        &mirrored(&data),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 4);
    for w in table.rows.windows(2) {
        assert!(w[1].mean_generation_ms >= w[0].mean_generation_ms);
        assert!(w[1].mean_per_edit_ms >= w[0].mean_per_edit_ms);
    }
    assert!(table.to_markdown().lines().count() == 6);

    let one = measure_latency(&default_latency_settings()[..1], 1, &data, Language::En, Language::En, None, &PipelineConfig::default(), &mirrored(&data)).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.rows[0].n_edits, 1);
}

#[test]
fn green_path_locality_probes_pass_through() {
    let data = synthetic_dataset(100);
    let b = mirrored(&data);
    let kb = mkedit_core::kb::KnowledgeBase::from_records(&data, Language::En).unwrap();
    let pool: Vec<&ParallelRecord> = data.iter().collect();
    for r in &data {
        let own: Vec<&ParallelRecord> = pool.iter().copied().filter(|p| p.record_id != r.record_id).collect();
        let c = mkedit_core::eval::evaluate_case(r, Language::En, Language::En, kb.entries(), &own, &few_bi(16).pipeline, &b).unwrap();
        let loc = c.probe(Probe::Locality);
        if loc.retrieved.is_none() {
            assert_eq!(loc.prompt, loc.query);
            assert_eq!(c.locality.em, 1.0);
        }
    }
}
