use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mkedit_core::gateway::HttpOptions;
use mkedit_core::kb::Language;
use mkedit_core::pipeline::PipelineConfig;
use mkedit_core::prompting::PromptMode;
use mkedit_core::retrieval::{ScorerConfig, ScorerKind, SelectionStrategy};

/// Comma-separated language codes, or `all`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LangList(pub Vec<Language>);

impl FromStr for LangList {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let langs = Language::parse_list(s).map_err(|e| e.to_string())?;
        if langs.is_empty() {
            return Err("expected at least one language code".into());
        }
        Ok(LangList(langs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerArg {
    Cosine,
    Classifier,
}

/// Where the model, embedder and relevance classifier live.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Embedding fixture for the mock backend (JSON).
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Scripted answers for the mock model (JSON).
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Synthetic mock latency per prompt byte.
    #[arg(long, default_value_t = 20)]
    pub latency_per_byte_us: u64,
    #[arg(long, env = "MKEDIT_GENERATOR_URL")]
    pub generator_url: Option<String>,
    #[arg(long, env = "MKEDIT_EMBEDDER_URL")]
    pub embedder_url: Option<String>,
    #[arg(long, env = "MKEDIT_CLASSIFIER_URL")]
    pub classifier_url: Option<String>,
    #[serde(skip)]
    #[arg(long, env = "MKEDIT_API_TOKEN", hide_env_values = true)]
    pub api_token: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    pub scorer: ScorerArg,
    /// Relevance threshold [default: 0.75 for cosine, 0.5 for classifier]
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "</s>")]
    pub pair_separator: String,
}

impl BackendArgs {
    pub fn scorer_config(&self) -> ScorerConfig {
        let kind = match self.scorer {
            ScorerArg::Cosine => ScorerKind::ReferenceCosine,
            ScorerArg::Classifier => ScorerKind::RemoteClassifier,
        };
        let mut c = ScorerConfig::for_kind(kind);
        if let Some(t) = self.threshold {
            c.threshold = t;
        }
        c.pair_separator = self.pair_separator.clone();
        c
    }

    pub fn http_options(&self) -> HttpOptions {
        HttpOptions {
            timeout: Duration::from_millis(self.timeout_ms),
            max_in_flight: self.max_in_flight,
            bearer_token: self.api_token.clone(),
            ..HttpOptions::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PromptArgs {
    /// zero, few_mono, few_bi, ike_all or passthrough [default: few_bi, or zero without an example pool]
    #[arg(long)]
    pub mode: Option<PromptMode>,
    /// Demonstrations per prompt [default: 16 for few-shot modes, else 0]
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long, default_value = "search")]
    pub strategy: SelectionStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
}

impl PromptArgs {
    pub fn resolve(&self, have_pool: bool) -> PipelineConfig {
        let mode = self
            .mode
            .unwrap_or(if have_pool { PromptMode::FewBi } else { PromptMode::Zero });
        let shots = self.shots.unwrap_or(if mode.is_few_shot() { 16 } else { 0 });
        PipelineConfig {
            mode,
            shots,
            strategy: self.strategy,
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

/// Snapshot written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    /// Arguments after the program name; `replay` re-runs them.
    pub argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<PromptMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example_strategy: Option<SelectionStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concurrency: Option<usize>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

impl RunConfig {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            mode: None,
            shots: None,
            example_strategy: None,
            seed: None,
            scorer: None,
            backend: None,
            concurrency: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn pipeline(mut self, p: &PipelineConfig) -> Self {
        self.mode = Some(p.mode);
        self.shots = Some(p.shots);
        self.example_strategy = Some(p.strategy);
        self.seed = Some(p.seed);
        self
    }

    pub fn backend(mut self, b: &BackendArgs) -> Self {
        self.scorer = Some(b.scorer_config());
        self.backend = Some(serde_json::to_value(b).expect("backend args serialize"));
        self
    }

    pub fn concurrency(mut self, n: usize) -> Self {
        self.concurrency = Some(n);
        self
    }

    pub fn input(mut self, key: &str, value: impl ToString) -> Self {
        self.inputs.insert(key.to_string(), value.to_string());
        self
    }

    /// Zero shots exactly for zero-shot; demonstrations only for the
    /// few-shot modes and the all-knowledge baseline.
    pub fn validate(&self) -> Result<()> {
        if let (Some(mode), Some(shots)) = (self.mode, self.shots) {
            match (mode, shots) {
                (PromptMode::Zero, s) if s != 0 => bail!("--shots {s} conflicts with zero-shot mode"),
                (m, 0) if m.is_few_shot() => bail!("mode {m} needs --shots > 0"),
                (PromptMode::Passthrough, s) if s != 0 => bail!("passthrough mode takes no shots"),
                _ => {}
            }
        }
        if self.concurrency == Some(0) {
            bail!("--concurrency must be at least 1");
        }
        if let Some(s) = &self.scorer {
            s.validate().context("invalid scorer settings")?;
        }
        Ok(())
    }

    /// Writes the snapshot to `path`, recording `outputs` first.
    pub fn write(&mut self, path: &Path, outputs: &[&Path]) -> Result<PathBuf> {
        for o in outputs {
            if !self.outputs.iter().any(|p| p == o) {
                self.outputs.push(o.to_path_buf());
            }
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// `dir/name.ext` → `dir/name.<suffix>`.
pub fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.{suffix}"))
}
