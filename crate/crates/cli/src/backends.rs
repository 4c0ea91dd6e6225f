use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};

use mkedit_core::gateway::{
    CachingEmbedder, Embedder, FixtureEmbedder, Generator, HttpClassifier, HttpEmbedder,
    HttpGenerator, MockClassifier, MockGenerator, MockScript, PairClassifier,
};
use mkedit_core::pipeline::Backends;
use mkedit_core::retrieval::scorer_from_config;
use mkedit_core::synthetic::DEFAULT_DIM;

use crate::config::{BackendArgs, BackendKind};

fn required<'a>(value: &'a Option<String>, flag: &str, env: &str) -> Result<&'a str> {
    value
        .as_deref()
        .with_context(|| format!("the http backend needs --{flag} or {env}"))
}

pub fn build(args: &BackendArgs) -> Result<Backends> {
    let scorer_config = args.scorer_config();
    scorer_config.validate()?;
    let (generator, embedder, classifier): (Arc<dyn Generator>, Arc<dyn Embedder>, Option<Arc<dyn PairClassifier>>) =
        match args.backend {
            BackendKind::Mock => {
                let fixture = match &args.fixture {
                    Some(p) => FixtureEmbedder::load(p)
                        .with_context(|| format!("loading fixture {}", p.display()))?,
                    None => FixtureEmbedder::new(DEFAULT_DIM, 0),
                };
                let script = match &args.script {
                    Some(p) => MockScript::load(p)
                        .with_context(|| format!("loading script {}", p.display()))?,
                    None => MockScript::default(),
                };
                let embedder: Arc<dyn Embedder> = Arc::new(fixture);
                let generator = MockGenerator::new(script)
                    .with_alignment(embedder.clone())
                    .with_latency_per_byte(Duration::from_micros(args.latency_per_byte_us));
                let classifier: Arc<dyn PairClassifier> =
                    Arc::new(MockClassifier::new(embedder.clone(), args.pair_separator.clone()));
                (Arc::new(generator), embedder, Some(classifier))
            }
            BackendKind::Http => {
                let opts = args.http_options();
                let gen_url = required(&args.generator_url, "generator-url", "MKEDIT_GENERATOR_URL")?;
                let emb_url = required(&args.embedder_url, "embedder-url", "MKEDIT_EMBEDDER_URL")?;
                let generator = HttpGenerator::new(gen_url, opts.clone())?;
                let embedder: Arc<dyn Embedder> =
                    Arc::new(CachingEmbedder::new(HttpEmbedder::new(emb_url, opts.clone(), None)?));
                let classifier = match &args.classifier_url {
                    Some(url) => Some(Arc::new(HttpClassifier::new(url, opts)?) as Arc<dyn PairClassifier>),
                    None => None,
                };
                (Arc::new(generator), embedder, classifier)
            }
        };
    let scorer = scorer_from_config(&scorer_config, embedder.clone(), classifier)?;
    Ok(Backends {
        generator,
        embedder,
        scorer,
    })
}
