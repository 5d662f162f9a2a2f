use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;

use super::state::{ErrorKind, PredictionRecord};
use super::EngineError;

/// An expert's (or oracle's) answer for one prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAnswer {
    pub correct_label: String,
    pub rationale: String,
    /// Only `rationale-only` has an effect, and only when the run enables it.
    #[serde(default)]
    pub error_kind: Option<ErrorKind>,
    #[serde(default)]
    pub rationale_fallback: bool,
}

impl FeedbackAnswer {
    pub fn new(correct_label: impl Into<String>, rationale: impl Into<String>) -> Self {
        Self {
            correct_label: correct_label.into(),
            rationale: rationale.into(),
            error_kind: None,
            rationale_fallback: false,
        }
    }
}

/// Supplies the correct label and rationale for a prediction.
///
/// Returning `None` defers the item: a person answers it later through
/// `Engine::submit_feedback`.
pub trait FeedbackProvider: Send + Sync {
    fn answer(&self, narrative_id: &str, narrative_text: &str, prediction: &PredictionRecord) -> Option<FeedbackAnswer>;
}

/// Reference labels plus cached model reasoning stand in for the expert.
#[derive(Clone, Debug)]
pub struct SimulatedProvider {
    reference: BTreeMap<String, String>,
    cot: BTreeMap<String, String>,
}

impl SimulatedProvider {
    /// Fails when any id in `pool` lacks a reference label.
    pub fn new(reference: &LabelSet, cot: BTreeMap<String, String>, pool: &[String]) -> Result<Self, EngineError> {
        let missing: Vec<String> = pool.iter().filter(|id| reference.get(id).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(EngineError::MissingReference(missing));
        }
        Ok(Self {
            reference: reference.labels.clone(),
            cot,
        })
    }
}

impl FeedbackProvider for SimulatedProvider {
    fn answer(&self, narrative_id: &str, _text: &str, _prediction: &PredictionRecord) -> Option<FeedbackAnswer> {
        let y = self.reference.get(narrative_id)?;
        Some(match self.cot.get(narrative_id) {
            Some(reason) => FeedbackAnswer::new(y, reason),
            None => FeedbackAnswer {
                rationale_fallback: true,
                ..FeedbackAnswer::new(y, format!("reference label is {y}"))
            },
        })
    }
}

/// Fixed answers by narrative id; unknown ids are deferred.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    answers: BTreeMap<String, FeedbackAnswer>,
    asked: Mutex<Vec<String>>,
}

impl ScriptedProvider {
    pub fn new(answers: BTreeMap<String, FeedbackAnswer>) -> Self {
        Self {
            answers,
            asked: Mutex::new(Vec::new()),
        }
    }

    pub fn asked(&self) -> Vec<String> {
        self.asked.lock().expect("asked lock").clone()
    }
}

impl FeedbackProvider for ScriptedProvider {
    fn answer(&self, narrative_id: &str, _text: &str, _prediction: &PredictionRecord) -> Option<FeedbackAnswer> {
        self.asked.lock().expect("asked lock").push(narrative_id.to_string());
        self.answers.get(narrative_id).cloned()
    }
}

/// Defers everything; the interactive setting.
#[derive(Clone, Copy, Debug, Default)]
pub struct HumanProvider;

impl FeedbackProvider for HumanProvider {
    fn answer(&self, _: &str, _: &str, _: &PredictionRecord) -> Option<FeedbackAnswer> {
        None
    }
}
