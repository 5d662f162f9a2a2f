//! Offline test world: planted-rule corpora, a rule-following stub model and
//! a stub guideline synthesizer.
//!
//! The stub model reads guideline bullets of the form
//! `if the narrative mentions X or Y, label Z`, so better guidelines make it
//! measurably more accurate. The stub synthesizer writes bullets in exactly
//! that form from error rationales.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, LabelSet, Narrative, Variable};
use crate::embed::{split_sentences, tokenize, EmbedderConfig, HashEmbedder, SamplingStrategy};
use crate::engine::{EngineError, RunConfig, SimulatedProvider, World};
use crate::gateway::{normalize_label, render_output, ChatModel, GatewayError, ModelEndpoint};
use crate::scalar::Scalar;
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("corpus size must be positive")]
    EmptySpec,
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub trigger_tokens: Vec<String>,
    pub label: String,
    pub priority: i32,
}

impl PlantedRule {
    pub fn new(tokens: &[&str], label: &str, priority: i32) -> Self {
        Self {
            trigger_tokens: tokens.iter().map(|t| t.to_string()).collect(),
            label: label.to_string(),
            priority,
        }
    }

    /// The first trigger token present in `tokens`, if any.
    fn hit<'a>(&'a self, tokens: &BTreeSet<String>) -> Option<&'a str> {
        self.trigger_tokens.iter().find(|t| tokens.contains(*t)).map(String::as_str)
    }

    /// The bullet that teaches this rule to the stub model.
    pub fn as_bullet(&self) -> String {
        format!("if the narrative mentions {}, label {}", self.trigger_tokens.join(" or "), self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub variable: Variable,
    pub size: usize,
    pub default_label: String,
    pub rules: Vec<PlantedRule>,
    pub distractor_vocabulary: Vec<String>,
    /// Share of each response option, in option order.
    pub class_mix: Vec<f64>,
    pub seed: u64,
}

const DISTRACTORS: &[&str] = &[
    "car", "kitchen", "garage", "phone", "window", "jacket", "bottle", "letter", "truck", "bedroom", "porch",
    "receipt", "wallet", "laptop", "notebook", "television", "couch", "hallway", "backpack", "blanket",
];

const TRIGGER_TEMPLATES: &[&str] = &[
    "Records note that V had spoken about the {} recently.",
    "A family member said the {} had been weighing on V.",
    "Notes found nearby referenced the {}.",
];

const NEUTRAL_SENTENCES: &[&str] = &[
    "Records note that V had been at home that week.",
    "A family member said V had seemed quiet.",
    "Notes found nearby were addressed to family.",
];

const DISTRACTOR_TEMPLATES: &[&str] = &[
    "The {} was found near the {}.",
    "Officers documented the {} and the {}.",
    "Friends described the {} beside the {} as usual.",
];

impl SyntheticCorpusSpec {
    /// Three-class legal-interaction world with the 74/83/477 class skew.
    pub fn legal_case_study(size: usize, seed: u64) -> Self {
        let variable = Variable::legal_interaction();
        let total = 74.0 + 83.0 + 477.0;
        Self {
            variable,
            size,
            default_label: "no_interaction".into(),
            rules: vec![
                PlantedRule::new(&["attorney", "lawyer"], "explicit_interaction", 2),
                PlantedRule::new(&["divorce", "custody"], "implicit_interaction", 1),
            ],
            distractor_vocabulary: DISTRACTORS.iter().map(|s| s.to_string()).collect(),
            // option order: no, implicit, explicit
            class_mix: vec![477.0 / total, 83.0 / total, 74.0 / total],
            seed,
        }
    }

    /// Binary world: "hopeless" or "sad" means 1.0.
    pub fn binary(name: &str, size: usize, positive_share: f64, seed: u64) -> Self {
        Self {
            variable: Variable::binary(name),
            size,
            default_label: "0.0".into(),
            rules: vec![PlantedRule::new(&["hopeless", "sad"], "1.0", 1)],
            distractor_vocabulary: DISTRACTORS.iter().map(|s| s.to_string()).collect(),
            class_mix: vec![1.0 - positive_share, positive_share],
            seed,
        }
    }

    fn template_vocabulary() -> BTreeSet<String> {
        TRIGGER_TEMPLATES
            .iter()
            .chain(NEUTRAL_SENTENCES)
            .chain(DISTRACTOR_TEMPLATES)
            .flat_map(|t| tokenize(t).collect::<Vec<_>>())
            .chain(["v", "was", "cme", "le", "report"].map(String::from))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.size == 0 {
            return Err(SynthError::EmptySpec);
        }
        self.variable.validate()?;
        let infeasible = |m: String| Err(SynthError::Infeasible(m));
        if self.class_mix.len() != self.variable.response_options.len() {
            return infeasible("class_mix length differs from the number of response options".into());
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|p| *p < 0.0) {
            return infeasible(format!("class_mix sums to {sum}"));
        }
        if !self.variable.has_option(&self.default_label) {
            return infeasible(format!("default label {:?} is not an option", self.default_label));
        }
        let priorities: BTreeSet<i32> = self.rules.iter().map(|r| r.priority).collect();
        if priorities.len() != self.rules.len() {
            return infeasible("rules share a priority".into());
        }
        let reserved = Self::template_vocabulary();
        let distractors: BTreeSet<&String> = self.distractor_vocabulary.iter().collect();
        for rule in &self.rules {
            if !self.variable.has_option(&rule.label) {
                return infeasible(format!("rule label {:?} is not an option", rule.label));
            }
            if rule.trigger_tokens.is_empty() {
                return infeasible(format!("rule for {} has no trigger tokens", rule.label));
            }
            for t in &rule.trigger_tokens {
                if tokenize(t).count() != 1 || t != &t.to_lowercase() {
                    return infeasible(format!("trigger {t:?} must be one lowercase word"));
                }
                if distractors.contains(t) || reserved.contains(t) {
                    return infeasible(format!("trigger {t:?} also occurs in filler text"));
                }
            }
        }
        for (option, share) in self.variable.response_options.iter().zip(&self.class_mix) {
            let reachable = option == &self.default_label || self.rules.iter().any(|r| &r.label == option);
            if *share > 0.0 && !reachable {
                return infeasible(format!("class {option} has no rule and is not the default"));
            }
        }
        if self.distractor_vocabulary.len() < 2 {
            return infeasible("need at least two distractor words".into());
        }
        Ok(())
    }

    /// Target class sizes by largest remainder.
    pub fn class_counts(&self) -> Vec<usize> {
        let raw: Vec<f64> = self.class_mix.iter().map(|p| p * self.size as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let short = self.size - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }

    /// The label the rules assign to `text`.
    pub fn label_for(&self, text: &str) -> String {
        self.matching_rule(text)
            .map(|(r, _)| r.label.clone())
            .unwrap_or_else(|| self.default_label.clone())
    }

    fn matching_rule(&self, text: &str) -> Option<(&PlantedRule, &str)> {
        let tokens: BTreeSet<String> = tokenize(text).collect();
        let mut rules: Vec<&PlantedRule> = self.rules.iter().collect();
        rules.sort_by(|a, b| b.priority.cmp(&a.priority));
        rules.into_iter().find_map(|r| r.hit(&tokens).map(|t| (r, t)))
    }
}

/// A generated corpus and its planted truth.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub spec: SyntheticCorpusSpec,
    pub corpus: Corpus,
    pub truth: LabelSet,
}

fn fill_slots(template: &str, words: &[&str]) -> String {
    let mut out = template.to_string();
    for w in words {
        out = out.replacen("{}", w, 1);
    }
    out
}

pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<SynthWorld, SynthError> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, 0x5947);
    let mut classes: Vec<&String> = Vec::with_capacity(spec.size);
    for (option, count) in spec.variable.response_options.iter().zip(spec.class_counts()) {
        classes.extend(std::iter::repeat_n(option, count));
    }
    classes.shuffle(&mut rng);

    let width = spec.size.to_string().len().max(4);
    let mut truth = LabelSet::new(spec.variable.name.clone(), "planted");
    let mut narratives = Vec::with_capacity(spec.size);
    for (i, class) in classes.into_iter().enumerate() {
        let id = format!("syn-{i:0width$}");
        let age = rng.random_range(18..=90);
        let key_sentence = match spec.rules.iter().filter(|r| &r.label == class).collect::<Vec<_>>().choose(&mut rng) {
            Some(rule) => {
                let token = rule.trigger_tokens.choose(&mut rng).expect("rule has tokens");
                fill_slots(TRIGGER_TEMPLATES.choose(&mut rng).expect("templates"), &[token])
            }
            None => NEUTRAL_SENTENCES.choose(&mut rng).expect("sentences").to_string(),
        };
        let distractors: Vec<String> = (0..rng.random_range(1..=3))
            .map(|_| {
                let pair: Vec<&str> = spec
                    .distractor_vocabulary
                    .choose_multiple(&mut rng, 2)
                    .map(String::as_str)
                    .collect();
                fill_slots(DISTRACTOR_TEMPLATES.choose(&mut rng).expect("templates"), &pair)
            })
            .collect();
        let opening = format!("V was {age}.");
        let (cme, le) = if rng.random_bool(0.5) {
            (format!("{opening} {key_sentence}"), distractors.join(" "))
        } else {
            (opening, format!("{} {key_sentence}", distractors.join(" ")))
        };
        let mut n = Narrative::new(id.clone(), cme, le);
        n.labels.insert(spec.variable.name.clone(), class.clone());
        truth.insert(id, class.clone());
        narratives.push(n);
    }
    Ok(SynthWorld {
        spec: spec.clone(),
        corpus: Corpus::from_narratives(narratives)?,
        truth,
    })
}

impl SynthWorld {
    /// Cached chain-of-thought per narrative, used as the simulated rationale.
    pub fn cot_cache(&self) -> BTreeMap<String, String> {
        self.corpus
            .iter()
            .map(|n| {
                let text = n.concat().expect("generated narratives are non-empty");
                let reason = match self.spec.matching_rule(&text) {
                    Some((rule, token)) => format!("The narrative mentions {token}, which indicates {}.", rule.label),
                    None => format!("Nothing in the narrative points elsewhere, which indicates {}.", self.spec.default_label),
                };
                (n.id.clone(), reason)
            })
            .collect()
    }

    /// A stub model whose prior is the most frequent class.
    pub fn stub_lm(&self) -> StubLm {
        let counts = self.spec.class_counts();
        let majority = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| self.spec.variable.response_options[i].clone())
            .expect("at least two options");
        StubLm::new(self.spec.variable.response_options.clone(), majority)
    }

    /// Stub model, stub synthesizer and a hashing embedder.
    pub fn world<F: Scalar>(&self) -> World<F> {
        World {
            model: Arc::new(self.stub_lm()),
            synthesizer: Arc::new(StubSynthesizer),
            embedder: Arc::new(HashEmbedder::new(STUB_EMBED_DIM)),
        }
    }

    /// Interactive-setting parameters against stub endpoints, random sampling.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::hitl(self.spec.variable.clone(), ModelEndpoint::new("stub://lm", "stub-lm"), seed);
        cfg.sampling = SamplingStrategy::Random;
        cfg.embedder = EmbedderConfig::deterministic(STUB_EMBED_DIM);
        cfg.model.parallelism_cap = 1;
        cfg
    }

    /// Planted truth plus cached reasoning as the feedback oracle.
    pub fn simulated_provider(&self, pool: &[String]) -> Result<SimulatedProvider, EngineError> {
        SimulatedProvider::new(&self.truth, self.cot_cache(), pool)
    }
}

pub const STUB_EMBED_DIM: usize = 64;

fn bullet_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\*\s*if the narrative mentions (.+?),\s*label\s+([A-Za-z0-9_.\-]+)\.?\s*$").expect("bullet regex")
    })
}

/// Reads `if the narrative mentions X or Y, label Z` bullets from prompt text.
pub fn parse_rule_bullets(prompt: &str) -> Vec<(Vec<Vec<String>>, String)> {
    bullet_regex()
        .captures_iter(prompt)
        .map(|c| {
            let alternatives = c[1]
                .split(" or ")
                .flat_map(|a| a.split(','))
                .map(|a| tokenize(a).collect::<Vec<_>>())
                .filter(|a| !a.is_empty())
                .collect();
            (alternatives, c[2].to_string())
        })
        .collect()
}

/// Rule-following model double.
///
/// Labels by the first guideline bullet in the system prompt whose trigger
/// occurs in the narrative, then by its fixed rules, then by the prior.
#[derive(Clone, Debug)]
pub struct StubLm {
    pub options: Vec<String>,
    pub prior: String,
    pub fixed_rules: Vec<(Vec<String>, String)>,
}

impl StubLm {
    pub fn new(options: Vec<String>, prior: impl Into<String>) -> Self {
        Self {
            options,
            prior: prior.into(),
            fixed_rules: Vec::new(),
        }
    }

    pub fn with_rule(mut self, tokens: &[&str], label: &str) -> Self {
        self.fixed_rules
            .push((tokens.iter().map(|t| t.to_string()).collect(), label.to_string()));
        self
    }

    fn label_key(&self) -> &'static str {
        if self.options.iter().any(|o| o == "1.0") {
            "response"
        } else {
            "label"
        }
    }

    /// (label, matched trigger) for a narrative under the given prompt.
    pub fn decide(&self, system: &str, narrative: &str) -> (String, Option<String>) {
        let tokens: BTreeSet<String> = tokenize(narrative).collect();
        for (alternatives, label) in parse_rule_bullets(system) {
            let Some(label) = normalize_label(&label, &self.options) else { continue };
            if let Some(hit) = alternatives.iter().find(|alt| alt.iter().all(|t| tokens.contains(t))) {
                return (label, Some(hit.join(" ")));
            }
        }
        for (trigger, label) in &self.fixed_rules {
            if let Some(t) = trigger.iter().find(|t| tokens.contains(*t)) {
                return (label.clone(), Some(t.clone()));
            }
        }
        (self.prior.clone(), None)
    }
}

impl ChatModel for StubLm {
    fn complete(&self, system: &str, user: &str) -> Result<String, GatewayError> {
        let (label, trigger) = self.decide(system, user);
        let (reason, span) = match &trigger {
            Some(t) => {
                let span = split_sentences(user)
                    .ok()
                    .and_then(|ss| ss.into_iter().find(|s| tokenize(s).any(|w| t.split(' ').any(|x| x == w))))
                    .unwrap_or_default();
                (format!("The narrative mentions {t}, which indicates {label}."), span)
            }
            None => (format!("No guideline applies, so the label is {label}."), String::new()),
        };
        let reason = reason.replace('\'', "");
        let span = span.replace('\'', "");
        Ok(render_output(&reason, &span, &label, self.label_key()))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "or", "the", "of", "to", "in", "on", "at", "by", "for", "from", "with", "as", "is", "was",
    "were", "be", "been", "it", "its", "this", "that", "which", "who", "v", "narrative", "mentions", "indicates",
    "report", "cme", "le", "label", "so", "no", "not", "nothing", "points", "elsewhere",
];

fn error_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?s)### Error \d+\nReport: (.*?)\nModel label: .*?\nCorrect label: (.*?)\nHuman reasoning: (.*?)\nSpan:",
        )
        .expect("error regex")
    })
}

/// Deterministic stand-in for the guideline update call.
///
/// Keeps every prior bullet and adds one per error: the rationale words that
/// also occur in the narrative become the trigger, the correct label the
/// target.
#[derive(Clone, Debug, Default)]
pub struct StubSynthesizer;

impl StubSynthesizer {
    pub fn bullets_for(prompt: &str) -> Vec<String> {
        let mut bullets: Vec<String> = Vec::new();
        if let Some(section) = prompt.split("Original guidelines:").nth(1) {
            let section = section.split("Errors:").next().unwrap_or("");
            bullets.extend(
                section
                    .lines()
                    .filter_map(|l| l.trim().strip_prefix("* "))
                    .map(|b| b.trim().to_string()),
            );
        }
        for c in error_regex().captures_iter(prompt) {
            let report: BTreeSet<String> = tokenize(&c[1]).collect();
            let label = c[2].trim();
            let label_words: BTreeSet<String> = tokenize(label).collect();
            let mut seen = BTreeSet::new();
            let triggers: Vec<String> = tokenize(&c[3])
                .filter(|t| report.contains(t) && !label_words.contains(t) && !STOPWORDS.contains(&t.as_str()))
                .filter(|t| !t.chars().all(|ch| ch.is_ascii_digit()))
                .filter(|t| seen.insert(t.clone()))
                .collect();
            if !triggers.is_empty() {
                bullets.push(format!("if the narrative mentions {}, label {label}", triggers.join(" or ")));
            }
        }
        bullets
    }
}

impl ChatModel for StubSynthesizer {
    fn complete(&self, system: &str, user: &str) -> Result<String, GatewayError> {
        let bullets = Self::bullets_for(&format!("{system}\n{user}"));
        let mut out = String::from("Guidelines:");
        for b in bullets {
            out.push_str("\n* ");
            out.push_str(&b);
        }
        Ok(out)
    }
}
