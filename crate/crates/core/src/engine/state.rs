use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplit;
use crate::gateway::{GatewayError, ParsePath, Prediction};
use crate::scalar::Rate;

use super::config::RunConfig;
use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Set up but not started.
    Created,
    Running,
    AwaitingFeedback,
    Converged,
    BudgetExhausted,
    Capped,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Converged | Self::BudgetExhausted | Self::Capped)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::Running => "running",
            Self::AwaitingFeedback => "awaiting_feedback",
            Self::Converged => "converged",
            Self::BudgetExhausted => "budget_exhausted",
            Self::Capped => "capped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Label,
    RationaleOnly,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Human,
    Simulated,
}

/// A model prediction as logged; `label` is `None` when the output could not
/// be parsed or the call failed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub narrative_id: String,
    pub label: Option<String>,
    pub reason: String,
    pub span: String,
    pub span_verbatim: bool,
    #[serde(default)]
    pub raw_output: Option<String>,
    #[serde(default)]
    pub parse_path: Option<ParsePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn from_result(narrative_id: &str, result: Result<Prediction, GatewayError>) -> Self {
        match result {
            Ok(p) => Self {
                narrative_id: p.narrative_id,
                label: Some(p.label),
                reason: p.reason,
                span: p.span,
                span_verbatim: p.span_verbatim,
                raw_output: Some(p.raw_output),
                parse_path: Some(p.parse_path),
                error: None,
            },
            Err(e) => Self {
                narrative_id: narrative_id.to_string(),
                label: None,
                reason: String::new(),
                span: String::new(),
                span_verbatim: false,
                raw_output: e.raw_output().map(str::to_string),
                parse_path: None,
                error: Some(e.to_string()),
            },
        }
    }

    /// The label shown to experts and synthesis; `unparseable` when missing.
    pub fn shown_label(&self) -> &str {
        self.label.as_deref().unwrap_or("unparseable")
    }
}

/// One validated item: the model's answer next to the expert's.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub feedback_id: String,
    pub narrative_id: String,
    pub iteration: u32,
    pub model_label: Option<String>,
    pub model_reason: String,
    pub correct_label: String,
    pub expert_rationale: String,
    pub is_error: bool,
    pub error_kind: ErrorKind,
    pub source: FeedbackSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// The rationale is a template because no cached reasoning existed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rationale_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub guide_correct: u64,
    pub guide_total: u64,
    pub acc_guide: f64,
    pub val_correct: u64,
    pub val_total: u64,
    pub acc_val: f64,
    /// The validation numbers were carried from an earlier iteration because
    /// the codebook did not change.
    pub val_carried: bool,
    #[serde(default)]
    pub macro_f1: Option<f64>,
    #[serde(default)]
    pub class_f1: Vec<ClassScore>,
}

impl IterationMetrics {
    pub fn val_rate(&self) -> Option<Rate> {
        Rate::new(self.val_correct, self.val_total)
    }
}

/// One line of iterations.jsonl.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub batch: Vec<String>,
    pub predictions: Vec<PredictionRecord>,
    pub feedback: Vec<FeedbackItem>,
    pub error_ids: Vec<String>,
    /// The parsed synthesis reply, when an update happened.
    #[serde(default)]
    pub synthesized: Option<Vec<String>>,
    pub codebook_version: u32,
    pub guide_size: usize,
    pub metrics: IterationMetrics,
    pub status: RunStatus,
    #[serde(default)]
    pub stop_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingItem {
    pub feedback_id: String,
    pub prediction: PredictionRecord,
    pub feedback: Option<FeedbackItem>,
}

/// The batch of the iteration in flight.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub t: u32,
    pub codebook_version: u32,
    pub items: Vec<PendingItem>,
}

impl PendingBatch {
    pub fn is_complete(&self) -> bool {
        self.items.iter().all(|i| i.feedback.is_some())
    }

    pub fn unresolved(&self) -> impl Iterator<Item = &PendingItem> {
        self.items.iter().filter(|i| i.feedback.is_none())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub run_id: String,
    /// Completed iterations.
    pub t: u32,
    pub codebook_version: u32,
    pub guide: Vec<FeedbackItem>,
    pub val_split: DatasetSplit,
    pub val_labels: BTreeMap<String, String>,
    pub pool: Vec<String>,
    pub error_log: Vec<Vec<String>>,
    pub metrics_history: Vec<IterationMetrics>,
    pub status: RunStatus,
    pub stop_reason: Option<String>,
    /// Kept in pending.json, not state.json.
    #[serde(skip)]
    pub pending: Option<PendingBatch>,
}

impl LoopState {
    pub fn guide_ids(&self) -> Vec<String> {
        self.guide.iter().map(|g| g.narrative_id.clone()).collect()
    }

    /// Pool ids not yet validated.
    pub fn remaining_pool(&self) -> Vec<String> {
        let seen: std::collections::BTreeSet<&str> = self.guide.iter().map(|g| g.narrative_id.as_str()).collect();
        self.pool.iter().filter(|id| !seen.contains(id.as_str())).cloned().collect()
    }

    /// Folds one completed iteration into the state. Used both live and when
    /// replaying a log.
    pub fn apply(&mut self, record: &IterationRecord) -> Result<(), EngineError> {
        if record.t != self.t {
            return Err(EngineError::Sequence {
                expected: self.t,
                got: record.t,
            });
        }
        self.guide.extend(record.feedback.iter().cloned());
        self.codebook_version = record.codebook_version;
        self.error_log.push(record.error_ids.clone());
        self.metrics_history.push(record.metrics.clone());
        self.t += 1;
        self.status = record.status;
        self.stop_reason = record.stop_reason.clone();
        self.pending = None;
        Ok(())
    }
}

/// `(acc_val >= m and |guide| >= k) or |guide| > b`.
pub fn stop_predicate(acc_val: f64, guide_size: usize, config: &RunConfig) -> bool {
    (acc_val >= config.target && guide_size >= config.min_guide) || guide_size > config.budget
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(RunStatus, String),
}

/// Stopping check after `completed` iterations.
///
/// Convergence wins over budget exhaustion; an exhausted pool or the
/// iteration cap stop the run as capped.
pub fn check_stopping(
    acc_val: f64,
    guide_size: usize,
    completed: u32,
    remaining_pool: usize,
    config: &RunConfig,
) -> StopDecision {
    if acc_val >= config.target && guide_size >= config.min_guide {
        return StopDecision::Stop(
            RunStatus::Converged,
            format!("validation accuracy {acc_val:.4} reached {} with {guide_size} validated items", config.target),
        );
    }
    if guide_size > config.budget {
        return StopDecision::Stop(
            RunStatus::BudgetExhausted,
            format!("{guide_size} validated items exceed the budget of {}", config.budget),
        );
    }
    if remaining_pool == 0 {
        return StopDecision::Stop(RunStatus::Capped, "pool exhausted".into());
    }
    if completed >= config.max_iterations {
        return StopDecision::Stop(RunStatus::Capped, format!("reached max_iterations = {}", config.max_iterations));
    }
    StopDecision::Continue
}
