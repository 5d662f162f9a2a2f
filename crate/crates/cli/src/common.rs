use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};


use anyhow::Context;
use clap::{Args, ValueEnum};
use codebook_forge::codebook::PromptTemplates;
use codebook_forge::corpus::{ingest_corpus, Corpus, Variable};
use codebook_forge::embed::EmbedderConfig;
use codebook_forge::engine::RunConfig;
use codebook_forge::gateway::ModelEndpoint;
use codebook_forge::World;
use codebook_forge_service::{AutoWorldFactory, WorldFactory, STUB_SCHEME};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing arguments; exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 1.
    Failed(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Failed(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Jsonl,
}

/// Flags every command understands.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Line-delimited corpus records
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// JSON file with one variable or a list of variables
    #[arg(long, global = true)]
    pub variable_spec: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Chat-completions base URL; `stub://` selects the offline stub models
    #[arg(long, global = true, env = "CODEBOOK_FORGE_ENDPOINT_URL")]
    pub endpoint_url: Option<String>,
    #[arg(long, global = true, env = "CODEBOOK_FORGE_MODEL")]
    pub model: Option<String>,
    #[arg(long, global = true, env = "CODEBOOK_FORGE_EMBED_URL")]
    pub embed_url: Option<String>,
    #[arg(long, global = true, env = "CODEBOOK_FORGE_EMBED_MODEL")]
    pub embed_model: Option<String>,
    /// TOML file with endpoint defaults, used below flags and environment
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Endpoint settings from `--config`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint_url: Option<String>,
    pub model: Option<String>,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dimension: Option<usize>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
    pub parallelism: Option<usize>,
}

impl Common {
    pub fn file_config(&self) -> CliResult<FileConfig> {
        let Some(path) = &self.config else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn corpus_path(&self) -> CliResult<&Path> {
        self.corpus.as_deref().ok_or_else(|| usage("--corpus is required"))
    }

    pub fn out_path(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| usage("--out is required"))
    }

    /// Reads the corpus, reporting rejected lines on standard error.
    pub fn load_corpus(&self) -> CliResult<Corpus> {
        let path = self.corpus_path()?;
        let file = File::open(path).map_err(|e| usage(format!("cannot open corpus {}: {e}", path.display())))?;
        let ingested = ingest_corpus(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        for r in &ingested.rejects {
            eprintln!("warning: {}:{}: {}", path.display(), r.line, r.reason);
        }
        Ok(ingested.corpus)
    }

    pub fn variables(&self) -> CliResult<Vec<Variable>> {
        let Some(path) = &self.variable_spec else {
            return Ok(vec![Variable::legal_interaction()]);
        };
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Spec {
            One(Variable),
            Many(Vec<Variable>),
            Wrapped { variables: Vec<Variable> },
        }
        let vars = match serde_json::from_str::<Spec>(&text)
            .map_err(|e| usage(format!("{} is not a variable spec: {e}", path.display())))?
        {
            Spec::One(v) => vec![v],
            Spec::Many(v) | Spec::Wrapped { variables: v } => v,
        };
        for v in &vars {
            v.validate().map_err(|e| usage(e.to_string()))?;
        }
        Ok(vars)
    }

    pub fn variable(&self, name: &str) -> CliResult<Variable> {
        let vars = self.variables()?;
        let known: Vec<String> = vars.iter().map(|v| v.name.clone()).collect();
        vars.into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| usage(format!("unknown variable {name:?}; known: {}", known.join(", "))))
    }

    /// Flag, then environment (handled by clap), then config file.
    pub fn endpoint(&self) -> CliResult<ModelEndpoint> {
        let file = self.file_config()?;
        let url = self
            .endpoint_url
            .clone()
            .or(file.endpoint_url)
            .ok_or_else(|| usage("no model endpoint: pass --endpoint-url or set CODEBOOK_FORGE_ENDPOINT_URL"))?;
        let model = match self.model.clone().or(file.model) {
            Some(m) => m,
            None if url.starts_with(STUB_SCHEME) => "stub".to_string(),
            None => return Err(usage("no model id: pass --model or set CODEBOOK_FORGE_MODEL")),
        };
        let mut ep = ModelEndpoint::new(url, model);
        if let Some(t) = file.temperature {
            ep.temperature = t;
        }
        if let Some(t) = file.max_tokens {
            ep.max_tokens = t;
        }
        if let Some(t) = file.timeout_secs {
            ep.timeout = std::time::Duration::try_from_secs_f64(t).map_err(|e| usage(format!("timeout_secs: {e}")))?;
        }
        if let Some(r) = file.max_retries {
            ep.max_retries = r;
        }
        if let Some(p) = file.parallelism {
            ep.parallelism_cap = p;
        }
        if ep.base_url.starts_with(STUB_SCHEME) {
            // the stub answers instantly; a single lane keeps runs reproducible
            ep.parallelism_cap = 1;
        }
        ep.validate().map_err(|e| usage(e.to_string()))?;
        Ok(ep)
    }

    pub fn embedder(&self) -> CliResult<EmbedderConfig> {
        let file = self.file_config()?;
        let dim = file.embed_dimension.unwrap_or(384);
        Ok(match self.embed_url.clone().or(file.embed_url) {
            Some(url) => {
                let model = self
                    .embed_model
                    .clone()
                    .or(file.embed_model)
                    .ok_or_else(|| usage("--embed-url needs --embed-model"))?;
                EmbedderConfig::remote(url, model, dim)
            }
            None => EmbedderConfig::deterministic(dim),
        })
    }
}

pub fn load_templates(path: Option<&Path>, variable: &Variable) -> CliResult<PromptTemplates> {
    match path {
        Some(p) => PromptTemplates::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => Ok(PromptTemplates::for_variable(variable)),
    }
}

/// Models for `config`, built through the same factory the service uses.
pub fn build_world(config: &RunConfig, corpus: &Corpus) -> CliResult<World> {
    AutoWorldFactory
        .build(config, corpus)
        .map_err(|e| CliError::Failed(anyhow::anyhow!(e)))
}

/// Standard output in the selected format.
pub struct Output {
    pub format: Format,
    out: std::io::Stdout,
}

impl Output {
    pub fn new(format: Format) -> Self {
        Self {
            format,
            out: std::io::stdout(),
        }
    }

    pub fn jsonl(&self) -> bool {
        self.format == Format::Jsonl
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> CliResult {
        let line = serde_json::to_string(value)?;
        writeln!(self.out.lock(), "{line}")?;
        Ok(())
    }

    pub fn text(&mut self, line: impl AsRef<str>) -> CliResult {
        writeln!(self.out.lock(), "{}", line.as_ref())?;
        Ok(())
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionLine {
    pub narrative_id: String,
    #[serde(default)]
    pub variable: Option<String>,
    pub label: Option<String>,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub span: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Label by variable, then by narrative id. Lines without a variable are
/// filed under `default_variable`.
pub fn read_predictions(
    path: &Path,
    default_variable: Option<&str>,
) -> CliResult<BTreeMap<String, BTreeMap<String, Option<String>>>> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let mut out: BTreeMap<String, BTreeMap<String, Option<String>>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let var = p
            .variable
            .or_else(|| default_variable.map(str::to_string))
            .ok_or_else(|| usage(format!("{}:{}: no variable; pass --variable", path.display(), i + 1)))?;
        out.entry(var).or_default().insert(p.narrative_id, p.label);
    }
    Ok(out)
}

pub fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

