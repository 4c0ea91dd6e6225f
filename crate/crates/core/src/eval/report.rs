use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CaseFailure, CaseResult, CellOutcome, EvalConfig, MetricSet, NORMALIZATION};
use crate::kb::Language;
use crate::retrieval::Probe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub eval: EvalConfig,
    pub generator: String,
    pub edit_langs: Vec<Language>,
    pub test_langs: Vec<Language>,
    pub dataset_size: usize,
    pub pool_size: usize,
}

/// Fraction of cases whose retrieval outcome was right, per probe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeAccuracy {
    pub question: f64,
    pub rephrase: f64,
    pub locality: f64,
    pub portability: f64,
}

impl ProbeAccuracy {
    pub fn from_cases(cases: &[CaseResult]) -> Self {
        if cases.is_empty() {
            return Self::default();
        }
        let frac = |p: Probe| {
            cases.iter().filter(|c| c.probe(p).retrieved_ok).count() as f64 / cases.len() as f64
        };
        Self {
            question: frac(Probe::Question),
            rephrase: frac(Probe::Rephrase),
            locality: frac(Probe::Locality),
            portability: frac(Probe::Portability),
        }
    }

    pub fn get(&self, probe: Probe) -> f64 {
        match probe {
            Probe::Question => self.question,
            Probe::Rephrase => self.rephrase,
            Probe::Locality => self.locality,
            Probe::Portability => self.portability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe: Probe,
    pub retrieved_ok: bool,
    pub pre_edit_answer: String,
    pub answer: String,
    pub expected: String,
    pub dataset_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub record_id: String,
    pub reliability: MetricSet,
    pub generality: MetricSet,
    pub locality: MetricSet,
    pub portability: MetricSet,
    pub probes: Vec<ProbeSummary>,
}

impl From<&CaseResult> for CaseSummary {
    fn from(c: &CaseResult) -> Self {
        Self {
            record_id: c.record_id.clone(),
            reliability: c.reliability,
            generality: c.generality,
            locality: c.locality,
            portability: c.portability,
            probes: c
                .probes
                .iter()
                .map(|p| ProbeSummary {
                    probe: p.probe,
                    retrieved_ok: p.retrieved_ok,
                    pre_edit_answer: p.pre_edit_answer.clone(),
                    answer: p.answer.clone(),
                    expected: p.expected.clone(),
                    dataset_answer: p.dataset_answer.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub edit_lang: Language,
    pub test_lang: Language,
    /// Cases that completed; failures are excluded from the means.
    pub n: usize,
    pub failure_count: usize,
    pub reliability: MetricSet,
    pub generality: MetricSet,
    pub locality: MetricSet,
    pub portability: MetricSet,
    pub retrieval_accuracy: ProbeAccuracy,
    pub failures: Vec<CaseFailure>,
    pub cases: Vec<CaseSummary>,
}

impl CellReport {
    pub(crate) fn from_outcome(edit_lang: Language, test_lang: Language, o: CellOutcome) -> Self {
        let mean = |p: Probe| MetricSet::mean(o.cases.iter().map(|c| c.metric(p)).collect::<Vec<_>>().iter());
        Self {
            edit_lang,
            test_lang,
            n: o.cases.len(),
            failure_count: o.failures.len(),
            reliability: mean(Probe::Question),
            generality: mean(Probe::Rephrase),
            locality: mean(Probe::Locality),
            portability: mean(Probe::Portability),
            retrieval_accuracy: ProbeAccuracy::from_cases(&o.cases),
            cases: o.cases.iter().map(CaseSummary::from).collect(),
            failures: o.failures,
        }
    }

    pub fn metric(&self, name: &str) -> Option<MetricSet> {
        match name {
            "reliability" => Some(self.reliability),
            "generality" => Some(self.generality),
            "locality" => Some(self.locality),
            "portability" => Some(self.portability),
            _ => None,
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub edit_lang: Language,
    pub test_lang: Language,
    pub mean_retrieval_ms: f64,
    pub mean_selection_ms: f64,
    pub mean_generation_ms: f64,
    pub mean_per_edit_ms: f64,
    pub wall_ms: f64,
}

impl CellTiming {
    pub(crate) fn from_outcome(edit_lang: Language, test_lang: Language, o: &CellOutcome) -> Self {
        let n = o.cases.len().max(1) as f64;
        let sum = o
            .cases
            .iter()
            .map(|c| c.probe(Probe::Question).timings)
            .fold(Default::default(), |a: crate::pipeline::StageTimings, t| a + t);
        Self {
            edit_lang,
            test_lang,
            mean_retrieval_ms: ms(sum.retrieval) / n,
            mean_selection_ms: ms(sum.selection) / n,
            mean_generation_ms: ms(sum.generation) / n,
            mean_per_edit_ms: ms(sum.total()) / n,
            wall_ms: ms(o.wall),
        }
    }
}

/// Wall-clock measurements, kept apart so reports can be compared without them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_per_edit_ms: f64,
    pub total_wall_ms: f64,
    pub cells: Vec<CellTiming>,
}

impl TimingReport {
    pub(crate) fn new(cells: Vec<CellTiming>, wall: Duration) -> Self {
        let mean = if cells.is_empty() {
            0.0
        } else {
            cells.iter().map(|c| c.mean_per_edit_ms).sum::<f64>() / cells.len() as f64
        };
        Self {
            mean_per_edit_ms: mean,
            total_wall_ms: ms(wall),
            cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub normalization: String,
    pub case_count: usize,
    pub failure_count: usize,
    pub cells: Vec<CellReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

pub const CSV_HEADER: &str = "edit_lang,test_lang,metric,em,f1,n";

impl EvalReport {
    pub(crate) fn new(config: ReportConfig, cells: Vec<CellReport>, timing: TimingReport) -> Self {
        Self {
            config,
            normalization: NORMALIZATION.to_string(),
            case_count: cells.iter().map(|c| c.n).sum(),
            failure_count: cells.iter().map(|c| c.failure_count).sum(),
            cells,
            timing: Some(timing),
        }
    }

    pub fn cell(&self, edit: Language, test: Language) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.edit_lang == edit && c.test_lang == test)
    }

    /// The report with wall-clock fields removed.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            timing: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per cell and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            for p in Probe::ALL {
                let name = p.metric_name();
                let m = c.metric(name).expect("known metric");
                let _ = writeln!(out, "{},{},{name},{},{},{}", c.edit_lang, c.test_lang, m.em, m.f1, c.n);
            }
        }
        out
    }
}
