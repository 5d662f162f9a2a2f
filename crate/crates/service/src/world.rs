//! How a run's models are built from its configuration.

use std::collections::BTreeMap;
use std::sync::Arc;

use codebook_forge::corpus::Corpus;
use codebook_forge::embed::{embedder_from_config, HashEmbedder};
use codebook_forge::engine::RunConfig;
use codebook_forge::gateway::HttpChatClient;
use codebook_forge::synth::{StubLm, StubSynthesizer};
use codebook_forge::transport::ReqwestTransport;
use codebook_forge::World;

pub trait WorldFactory: Send + Sync {
    /// Called on a blocking thread; implementations may open connections.
    fn build(&self, config: &RunConfig, corpus: &Corpus) -> Result<World, String>;
}

/// Offline models: the rule-following stub LM and stub synthesizer.
///
/// The stub's fallback label is the most frequent reference label for the
/// variable in the corpus, or the first response option without labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubWorldFactory;

impl WorldFactory for StubWorldFactory {
    fn build(&self, config: &RunConfig, corpus: &Corpus) -> Result<World, String> {
        let options = config.variable.response_options.clone();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for n in corpus.iter() {
            if let Some(label) = n.labels.get(&config.variable.name) {
                *counts.entry(label.as_str()).or_default() += 1;
            }
        }
        let prior = options
            .iter()
            .max_by_key(|o| (counts.get(o.as_str()).copied().unwrap_or(0), std::cmp::Reverse(o.as_str())))
            .cloned()
            .ok_or("variable has no response options")?;
        Ok(World {
            model: Arc::new(StubLm::new(options, prior)),
            synthesizer: Arc::new(StubSynthesizer),
            embedder: Arc::new(HashEmbedder::new(config.embedder.dimension)),
        })
    }
}

/// Chat-completions endpoints and the configured embedder.
#[derive(Clone, Copy, Debug, Default)]
pub struct HttpWorldFactory;

impl WorldFactory for HttpWorldFactory {
    fn build(&self, config: &RunConfig, _corpus: &Corpus) -> Result<World, String> {
        let transport = Arc::new(ReqwestTransport::new());
        let model = HttpChatClient::new(config.model.clone(), transport.clone()).map_err(|e| e.to_string())?;
        let synthesizer =
            HttpChatClient::new(config.synthesizer_endpoint().clone(), transport.clone()).map_err(|e| e.to_string())?;
        let embedder = embedder_from_config(&config.embedder, transport).map_err(|e| e.to_string())?;
        Ok(World {
            model: Arc::new(model),
            synthesizer: Arc::new(synthesizer),
            embedder,
        })
    }
}

/// Stubs for `stub://` model endpoints, HTTP clients otherwise.
#[derive(Clone, Copy, Debug, Default)]
pub struct AutoWorldFactory;

pub const STUB_SCHEME: &str = "stub://";

impl WorldFactory for AutoWorldFactory {
    fn build(&self, config: &RunConfig, corpus: &Corpus) -> Result<World, String> {
        if config.model.base_url.starts_with(STUB_SCHEME) {
            StubWorldFactory.build(config, corpus)
        } else {
            HttpWorldFactory.build(config, corpus)
        }
    }
}
