//! Chat-completion client and structured-output parsing of model replies.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{render_annotation_prompt, render_update_prompt, Codebook, PromptTemplates, UpdateError};
use crate::corpus::Variable;
use crate::transport::{post_with_retry, HttpTransport, RequestError, RetryPolicy, Sleeper, ThreadSleeper};

pub const API_KEY_ENV: &str = "CODEBOOK_FORGE_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Request(#[from] RequestError),
    #[error("malformed chat response: {0}")]
    Decode(String),
    #[error("no label recoverable from model output: {raw:?}")]
    Unparseable { raw: String },
    #[error("label {label:?} is not a response option (raw output {raw:?})")]
    InvalidLabel { label: String, raw: String },
    #[error("guideline synthesis returned an empty reply")]
    EmptyReply,
    #[error("guideline synthesis needs at least one error item")]
    NoErrors,
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
}

impl GatewayError {
    /// The raw model text behind a parse failure, if this is one.
    pub fn raw_output(&self) -> Option<&str> {
        match self {
            GatewayError::Unparseable { raw } | GatewayError::InvalidLabel { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    #[serde(with = "secs", default = "defaults::timeout")]
    pub timeout: Duration,
    #[serde(default = "defaults::max_retries")]
    pub max_retries: u32,
    #[serde(default = "defaults::parallelism_cap")]
    pub parallelism_cap: usize,
}

mod defaults {
    use std::time::Duration;

    pub fn temperature() -> f64 {
        0.2
    }
    pub fn max_tokens() -> u32 {
        1024
    }
    pub fn timeout() -> Duration {
        Duration::from_secs(120)
    }
    pub fn max_retries() -> u32 {
        3
    }
    pub fn parallelism_cap() -> usize {
        4
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            temperature: defaults::temperature(),
            max_tokens: defaults::max_tokens(),
            timeout: defaults::timeout(),
            max_retries: defaults::max_retries(),
            parallelism_cap: defaults::parallelism_cap(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidEndpoint(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidEndpoint("max_tokens must be positive".into()));
        }
        if self.parallelism_cap == 0 {
            return Err(GatewayError::InvalidEndpoint("parallelism_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that turns a (system, user) prompt pair into assistant text.
pub trait ChatModel: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, GatewayError>;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Client for `POST {base_url}/v1/chat/completions`.
pub struct HttpChatClient {
    endpoint: ModelEndpoint,
    transport: Arc<dyn HttpTransport>,
    sleeper: Arc<dyn Sleeper>,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(endpoint: ModelEndpoint, transport: Arc<dyn HttpTransport>) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        Ok(Self {
            endpoint,
            transport,
            sleeper: Arc::new(ThreadSleeper),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Arc<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn request_body(&self, system: &str, user: &str) -> String {
        serde_json::to_string(&ChatRequest {
            model: &self.endpoint.model_id,
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_tokens,
            messages: [
                ChatMessage { role: "system", content: system },
                ChatMessage { role: "user", content: user },
            ],
        })
        .expect("chat request serializes")
    }
}

impl ChatModel for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String, GatewayError> {
        let url = format!("{}/v1/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let policy = RetryPolicy {
            max_retries: self.endpoint.max_retries,
            ..RetryPolicy::default()
        };
        let raw = post_with_retry(
            self.transport.as_ref(),
            self.sleeper.as_ref(),
            &policy,
            &url,
            self.api_key.as_deref(),
            &self.request_body(system, user),
            self.endpoint.timeout,
        )?;
        let resp: ChatResponse = serde_json::from_str(&raw).map_err(|e| GatewayError::Decode(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("response has no choices".into()))
    }
}

/// Returns the same reply to every request and remembers what it was asked.
#[derive(Default)]
pub struct CannedChat {
    reply: String,
    calls: Mutex<Vec<(String, String)>>,
}

impl CannedChat {
    pub fn new(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<(String, String)> {
        self.calls.lock().expect("calls lock").clone()
    }
}

impl ChatModel for CannedChat {
    fn complete(&self, system: &str, user: &str) -> Result<String, GatewayError> {
        self.calls
            .lock()
            .expect("calls lock")
            .push((system.to_string(), user.to_string()));
        Ok(self.reply.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsePath {
    Strict,
    Lenient,
    Regex,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub label: String,
    pub reason: String,
    pub span: String,
    pub parse_path: ParsePath,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub narrative_id: String,
    pub label: String,
    pub reason: String,
    pub span: String,
    pub raw_output: String,
    pub parse_path: ParsePath,
    pub span_verbatim: bool,
}

fn is_binary(options: &[String]) -> bool {
    options.iter().any(|o| o == "1.0") && options.iter().any(|o| o == "0.0")
}

fn fold(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_whitespace() || c == '-' { '_' } else { c })
        .collect()
}

/// Maps a raw label onto a response option.
///
/// Binary variables accept `1`, `1.0`, `yes`, `true` and `0`, `0.0`, `no`,
/// `false`. Option names otherwise match case-insensitively, with spaces and
/// hyphens read as underscores.
pub fn normalize_label(raw: &str, options: &[String]) -> Option<String> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| matches!(c, '\'' | '"' | '`' | '*'))
        .trim()
        .trim_end_matches(['.', ',', ';'])
        .trim();
    if let Some(exact) = options.iter().find(|o| o.as_str() == cleaned) {
        return Some(exact.clone());
    }
    let folded = fold(cleaned);
    if is_binary(options) {
        match folded.as_str() {
            "1" | "1.0" | "yes" | "true" => return Some("1.0".into()),
            "0" | "0.0" | "no" | "false" => return Some("0.0".into()),
            _ => {}
        }
    }
    options.iter().find(|o| fold(o) == folded).cloned()
}

const LABEL_KEYS: [&str; 3] = ["response", "label", "answer"];

fn fields_to_output(
    fields: &BTreeMap<String, String>,
    options: &[String],
    raw: &str,
    path: ParsePath,
) -> Option<Result<ParsedOutput, GatewayError>> {
    let value = LABEL_KEYS.iter().find_map(|k| fields.get(*k))?;
    Some(match normalize_label(value, options) {
        Some(label) => Ok(ParsedOutput {
            label,
            reason: fields.get("reason").cloned().unwrap_or_default(),
            span: fields.get("span").cloned().unwrap_or_default(),
            parse_path: path,
        }),
        None => Err(GatewayError::InvalidLabel {
            label: value.trim().to_string(),
            raw: raw.to_string(),
        }),
    })
}

fn strict_fields(raw: &str) -> Option<BTreeMap<String, String>> {
    let value: serde_json::Value = serde_json::from_str(raw.trim()).ok()?;
    let obj = value.as_object()?;
    Some(
        obj.iter()
            .map(|(k, v)| {
                let text = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.to_lowercase(), text)
            })
            .collect(),
    )
}

/// Tolerant reader for object-like text: single or double quotes, bare keys
/// and values, raw newlines inside strings, a missing closing brace.
struct Lenient<'a> {
    chars: Vec<char>,
    pos: usize,
    _src: &'a str,
}

impl<'a> Lenient<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            _src: src,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn next_non_ws(&self, from: usize) -> Option<char> {
        self.chars[from..].iter().copied().find(|c| !c.is_whitespace())
    }

    /// Reads a quoted string. The quote closes it only when followed by one
    /// of `closers` (or the end), so apostrophes inside text survive.
    fn quoted(&mut self, closers: &[char]) -> String {
        let q = self.chars[self.pos];
        self.pos += 1;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            self.pos += 1;
            if c == '\\' {
                if let Some(e) = self.peek() {
                    self.pos += 1;
                    out.push(match e {
                        'n' => '\n',
                        't' => '\t',
                        other => other,
                    });
                }
                continue;
            }
            if c == q {
                match self.next_non_ws(self.pos) {
                    None => return out,
                    Some(n) if closers.contains(&n) => return out,
                    _ => {}
                }
            }
            out.push(c);
        }
        out
    }

    fn bare(&mut self, stops: &[char]) -> String {
        let start = self.pos;
        while self.peek().is_some_and(|c| !stops.contains(&c)) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect::<String>().trim().to_string()
    }

    fn object(mut self) -> Option<BTreeMap<String, String>> {
        self.skip_ws();
        if self.peek() != Some('{') {
            return None;
        }
        self.pos += 1;
        let mut fields = BTreeMap::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None | Some('}') => break,
                Some(',') => {
                    self.pos += 1;
                    continue;
                }
                _ => {}
            }
            let key = match self.peek() {
                Some('\'' | '"') => self.quoted(&[':']),
                _ => self.bare(&[':', '}', ',']),
            };
            self.skip_ws();
            if self.peek() != Some(':') {
                break;
            }
            self.pos += 1;
            self.skip_ws();
            let value = match self.peek() {
                Some('\'' | '"') => self.quoted(&[',', '}']),
                _ => self.bare(&[',', '}']),
            };
            fields.insert(key.trim().to_lowercase(), value);
        }
        (!fields.is_empty()).then_some(fields)
    }
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)["']?\b(?:response|label|answer)\b["']?\s*[:=]\s*["'`*]*([A-Za-z0-9_.\- ]*[A-Za-z0-9_])"#)
            .expect("label regex")
    })
}

/// Extracts reason, span and label from a model reply.
///
/// Tries, in order: the whole reply as a JSON object; a tolerant read of the
/// first `{...}` block; a regex on the label key; the whole reply as a bare
/// label. The first step that finds a label decides the outcome.
pub fn parse_prediction(raw: &str, options: &[String]) -> Result<ParsedOutput, GatewayError> {
    if let Some(fields) = strict_fields(raw) {
        if let Some(out) = fields_to_output(&fields, options, raw, ParsePath::Strict) {
            return out;
        }
    }
    if let Some(start) = raw.find('{') {
        if let Some(fields) = Lenient::new(&raw[start..]).object() {
            if let Some(out) = fields_to_output(&fields, options, raw, ParsePath::Lenient) {
                return out;
            }
        }
    }
    let regex_hit = label_regex().captures_iter(raw).find_map(|caps| {
        let value = caps.get(1)?.as_str();
        // allow trailing prose after the label: try the longest prefix that maps
        let words: Vec<&str> = value.split(' ').collect();
        Some(
            (1..=words.len())
                .rev()
                .find_map(|n| normalize_label(&words[..n].join(" "), options))
                .ok_or_else(|| value.to_string()),
        )
    });
    match regex_hit {
        Some(Ok(label)) => {
            return Ok(ParsedOutput {
                label,
                reason: raw.to_string(),
                span: raw.to_string(),
                parse_path: ParsePath::Regex,
            })
        }
        Some(Err(label)) => {
            return Err(GatewayError::InvalidLabel {
                label,
                raw: raw.to_string(),
            })
        }
        None => {}
    }
    if let Some(label) = normalize_label(raw, options) {
        return Ok(ParsedOutput {
            label,
            reason: raw.to_string(),
            span: raw.to_string(),
            parse_path: ParsePath::Regex,
        });
    }
    Err(GatewayError::Unparseable { raw: raw.to_string() })
}

/// Renders an output in the annotation format, e.g.
/// `{'reason': 'r', 'span': 's', 'response': '1.0'}`.
pub fn render_output(reason: &str, span: &str, label: &str, label_key: &str) -> String {
    format!("{{'reason': '{reason}', 'span': '{span}', '{label_key}': '{label}'}}")
}

pub fn predict(
    model: &dyn ChatModel,
    templates: &PromptTemplates,
    variable: &Variable,
    cb: &Codebook,
    narrative_id: &str,
    narrative_text: &str,
) -> Result<Prediction, GatewayError> {
    let (system, user) = render_annotation_prompt(templates, variable, cb, narrative_text);
    let raw = model.complete(&system, &user)?;
    let parsed = parse_prediction(&raw, &variable.response_options)?;
    let span_verbatim = !parsed.span.trim().is_empty() && narrative_text.contains(parsed.span.trim());
    Ok(Prediction {
        narrative_id: narrative_id.to_string(),
        label: parsed.label,
        reason: parsed.reason,
        span: parsed.span,
        raw_output: raw,
        parse_path: parsed.parse_path,
        span_verbatim,
    })
}

/// Asks the model for a new guideline list; the reply is returned unparsed.
pub fn synthesize_guidelines(
    model: &dyn ChatModel,
    templates: &PromptTemplates,
    variable: &Variable,
    cb: &Codebook,
    errors: &[UpdateError],
) -> Result<String, GatewayError> {
    if errors.is_empty() {
        return Err(GatewayError::NoErrors);
    }
    let (system, user) = render_update_prompt(templates, variable, cb, errors);
    let reply = model.complete(&system, &user)?;
    if reply.trim().is_empty() {
        return Err(GatewayError::EmptyReply);
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::init_codebook;
    use crate::transport::{HttpResponse, RecordingSleeper, ReplayTransport, ScriptedTransport, TransportError};
    use proptest::prelude::*;

    fn binary() -> Vec<String> {
        vec!["0.0".into(), "1.0".into()]
    }

    fn legal() -> Vec<String> {
        Variable::legal_interaction().response_options
    }

    #[test]
    fn table_format_is_lenient() {
        let p = parse_prediction("{'reason': 'r', 'span': 's', 'response': '1.0'}", &binary()).unwrap();
        assert_eq!((p.reason.as_str(), p.span.as_str(), p.label.as_str()), ("r", "s", "1.0"));
        assert_eq!(p.parse_path, ParsePath::Lenient);
    }

    #[test]
    fn leading_prose_is_stripped() {
        let raw = "Sure! {\"reason\": \"r\", \"span\": \"s\", \"label\": \"no_interaction\"}";
        let p = parse_prediction(raw, &legal()).unwrap();
        assert_eq!(p.label, "no_interaction");
        assert_eq!(p.parse_path, ParsePath::Lenient);
    }

    #[test]
    fn strict_json() {
        let p = parse_prediction(r#"{"reason": "r", "span": "", "response": 0}"#, &binary()).unwrap();
        assert_eq!(p.label, "0.0");
        assert_eq!(p.parse_path, ParsePath::Strict);
    }

    #[test]
    fn regex_with_alias() {
        let raw = "the answer is response: 1";
        let p = parse_prediction(raw, &binary()).unwrap();
        assert_eq!(p.label, "1.0");
        assert_eq!(p.parse_path, ParsePath::Regex);
        assert_eq!(p.reason, raw);
    }

    #[test]
    fn apostrophes_inside_single_quotes() {
        let raw = "{'reason': 'the victim's lawyer called', 'span': 'V's attorney', 'label': 'explicit_interaction'}";
        let p = parse_prediction(raw, &legal()).unwrap();
        assert_eq!(p.reason, "the victim's lawyer called");
        assert_eq!(p.span, "V's attorney");
        assert_eq!(p.label, "explicit_interaction");
    }

    #[test]
    fn echoed_option_list_is_invalid() {
        let err = parse_prediction("{'reason': 'r', 'span': 's', 'response': '1.0 or 0.0'}", &binary()).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidLabel { .. }));
        assert!(matches!(parse_prediction("I cannot help.", &binary()), Err(GatewayError::Unparseable { .. })));
    }

    #[test]
    fn aliases() {
        for (raw, want) in [("yes", "1.0"), ("TRUE", "1.0"), ("0", "0.0"), ("No.", "0.0")] {
            assert_eq!(normalize_label(raw, &binary()).as_deref(), Some(want));
        }
        assert_eq!(normalize_label("Explicit Interaction", &legal()).as_deref(), Some("explicit_interaction"));
        assert_eq!(normalize_label("no-interaction", &legal()).as_deref(), Some("no_interaction"));
        assert_eq!(normalize_label("maybe", &binary()), None);
        assert_eq!(normalize_label("yes", &legal()), None);
    }

    #[derive(Deserialize)]
    struct Case {
        raw: String,
        options: String,
        expected: Option<String>,
    }

    #[test]
    fn malformed_output_fixture() {
        let cases: Vec<Case> =
            serde_json::from_str(include_str!("../tests/fixtures/malformed_outputs.json")).unwrap();
        assert_eq!(cases.len(), 30);
        for c in &cases {
            let opts = if c.options == "binary" { binary() } else { legal() };
            match (&c.expected, parse_prediction(&c.raw, &opts)) {
                (Some(want), Ok(p)) => assert_eq!(&p.label, want, "{}", c.raw),
                (None, Err(GatewayError::Unparseable { .. } | GatewayError::InvalidLabel { .. })) => {}
                (want, got) => panic!("{:?}: expected {want:?}, got {got:?}", c.raw),
            }
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: body.into(),
        })
    }

    fn reply(content: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn retries_429_twice_then_succeeds() {
        let t = Arc::new(ScriptedTransport::new(vec![
            Ok(HttpResponse { status: 429, body: String::new() }),
            Ok(HttpResponse { status: 429, body: String::new() }),
            ok(&reply("done")),
        ]));
        let sleeper = Arc::new(RecordingSleeper::default());
        let client = HttpChatClient::new(ModelEndpoint::new("http://lm", "m"), t.clone())
            .unwrap()
            .with_sleeper(sleeper.clone());
        assert_eq!(client.complete("s", "u").unwrap(), "done");
        assert_eq!(sleeper.delays.lock().unwrap().len(), 2);
        let body: serde_json::Value = serde_json::from_str(&t.calls()[0]).unwrap();
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["max_tokens"], 1024);
    }

    #[test]
    fn non_429_status_is_a_protocol_error() {
        let t = Arc::new(ScriptedTransport::new(vec![Ok(HttpResponse { status: 400, body: "bad".into() })]));
        let client = HttpChatClient::new(ModelEndpoint::new("http://lm", "m"), t).unwrap();
        let err = client.complete("s", "u").unwrap_err();
        assert!(matches!(err, GatewayError::Request(RequestError::Status { status: 400, .. })));
    }

    fn replay_client(fixture: &str) -> HttpChatClient {
        let t = Arc::new(ReplayTransport::from_json(fixture).unwrap());
        HttpChatClient::new(ModelEndpoint::new("http://lm.local", "llama-3.1-8b-instruct"), t)
            .unwrap()
            .with_api_key(None)
    }

    #[test]
    fn recorded_prediction_transcript_replays() {
        let client = replay_client(include_str!("../tests/fixtures/chat_transcript.json"));
        let v = Variable::binary("DepressedMood");
        let t = PromptTemplates::for_variable(&v);
        let cb = init_codebook(&v, &t);
        let p = predict(&client, &t, &v, &cb, "n1", "CME Report: V had been sad for weeks.").unwrap();
        assert_eq!(
            p.raw_output,
            "{'reason': 'The report states prolonged sadness.', 'span': 'V had been sad for weeks.', 'response': '1.0'}"
        );
        assert_eq!(p.label, "1.0");
        assert!(p.span_verbatim);
    }

    #[test]
    fn recorded_synthesis_transcript_replays() {
        let client = replay_client(include_str!("../tests/fixtures/synthesis_transcript.json"));
        let v = Variable::legal_interaction();
        let t = PromptTemplates::legal_interaction();
        let cb = init_codebook(&v, &t);
        let errors = vec![
            UpdateError {
                narrative: "CME Report: V met an attorney about the divorce.".into(),
                model_label: "no_interaction".into(),
                correct_label: "explicit_interaction".into(),
                human_reasoning: "V met an attorney".into(),
                span: "met an attorney".into(),
            },
            UpdateError {
                narrative: "LE Report: V was served custody papers.".into(),
                model_label: "no_interaction".into(),
                correct_label: "implicit_interaction".into(),
                human_reasoning: "custody papers imply legal counsel".into(),
                span: "served custody papers".into(),
            },
        ];
        let text = synthesize_guidelines(&client, &t, &v, &cb, &errors).unwrap();
        assert!(text.starts_with("Guidelines:"));
        assert_eq!(crate::codebook::parse_guideline_list(&text).unwrap().len(), 2);
    }

    #[test]
    fn synthesis_requires_errors() {
        let v = Variable::binary("X");
        let t = PromptTemplates::for_variable(&v);
        let cb = init_codebook(&v, &t);
        let chat = CannedChat::new("Guidelines: * a");
        assert!(matches!(synthesize_guidelines(&chat, &t, &v, &cb, &[]), Err(GatewayError::NoErrors)));
        assert!(chat.calls().is_empty());
    }

    #[test]
    fn canned_reply_is_verbatim() {
        let chat = CannedChat::new("exact reply\n");
        assert_eq!(chat.complete("s", "u").unwrap(), "exact reply\n");
    }

    #[test]
    fn temperature_bounds() {
        let mut e = ModelEndpoint::new("u", "m");
        e.temperature = 2.5;
        assert!(e.validate().is_err());
    }

    proptest! {
        #[test]
        fn rendered_outputs_round_trip(idx in 0usize..3, key_is_label in any::<bool>(),
                                       reason in "[A-Za-z ,.]{0,40}", span in "[A-Za-z ]{0,20}") {
            let key = if key_is_label { "label" } else { "response" };
            for opts in [binary(), legal()] {
                let label = &opts[idx % opts.len()];
                let raw = render_output(&reason, &span, label, key);
                let p = parse_prediction(&raw, &opts).unwrap();
                prop_assert_eq!(&p.label, label);
                prop_assert_eq!(p.reason, reason.clone());
                prop_assert_eq!(p.span, span.clone());
            }
        }

        #[test]
        fn normalization_is_idempotent(raw in "[A-Za-z0-9_ .-]{0,20}") {
            for opts in [binary(), legal()] {
                if let Some(once) = normalize_label(&raw, &opts) {
                    prop_assert_eq!(normalize_label(&once, &opts), Some(once.clone()));
                }
            }
        }

        #[test]
        fn labels_are_never_fabricated(raw in "[A-Za-z0-9 :{}'\",._]{0,60}") {
            if let Ok(p) = parse_prediction(&raw, &binary()) {
                let lower = raw.to_lowercase();
                let traceable = ["1", "0", "yes", "no", "true", "false"].iter().any(|t| lower.contains(t));
                prop_assert!(traceable, "label {} from {:?}", p.label, raw);
            }
        }
    }
}
