//! The development loop: sample a batch, predict, collect feedback, rewrite
//! the guidelines from the errors, evaluate, and check the stopping rule.
//!
//! Feedback may arrive synchronously from a [`FeedbackProvider`] or later
//! through [`Engine::submit_feedback`]; in the second case the engine parks in
//! `awaiting_feedback` and resumes once every item of the batch is answered.

mod config;
mod feedback;
mod state;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{init_codebook, parse_guideline_list, Codebook, CodebookError, PromptTemplates, UpdateError};
use crate::corpus::{build_validation_split, Corpus, CorpusError, LabelSet, VariableKind};
use crate::embed::{keyword_upsample, select_batch, EmbedError, Embedder, SentenceIndex};
use crate::gateway::{predict, synthesize_guidelines, ChatModel, GatewayError};
use crate::metrics::{macro_f1, LabelPair};
use crate::scalar::Scalar;
use crate::store::{RunStore, StoreError};
use crate::util::{bounded_map, derive_seed, sha256_hex};

pub use config::{ConfigError, RunConfig};
pub use feedback::{FeedbackAnswer, FeedbackProvider, HumanProvider, ScriptedProvider, SimulatedProvider};
pub use state::{
    check_stopping, stop_predicate, ClassScore, ErrorKind, FeedbackItem, FeedbackSource, IterationMetrics,
    IterationRecord, LoopState, PendingBatch, PendingItem, PredictionRecord, RunStatus, StopDecision,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("sampling pool has {available} narratives, fewer than the batch size {batch}")]
    PoolTooSmall { available: usize, batch: usize },
    #[error("cannot {action} while the run is {}", .status.as_str())]
    InvalidStatus { status: RunStatus, action: &'static str },
    #[error("no batch is awaiting feedback")]
    NoPendingBatch,
    #[error("{missing} feedback items are still unanswered")]
    FeedbackIncomplete { missing: usize },
    #[error("no reference label for {} pool narratives (first: {})", .0.len(), .0[0])]
    MissingReference(Vec<String>),
    #[error("iteration record {got} does not follow state at t = {expected}")]
    Sequence { expected: u32, got: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FeedbackError {
    #[error("unknown feedback id {0:?}")]
    UnknownId(String),
    #[error("label {label:?} is not a response option")]
    InvalidLabel { label: String },
    #[error("feedback {0:?} was already submitted with different content")]
    Conflict(String),
}

impl FeedbackError {
    pub fn field(&self) -> Option<&'static str> {
        match self {
            Self::UnknownId(_) | Self::Conflict(_) => Some("feedback_id"),
            Self::InvalidLabel { .. } => Some("correct_label"),
        }
    }
}

/// The models the engine talks to.
pub struct World<F: Scalar> {
    pub model: Arc<dyn ChatModel>,
    pub synthesizer: Arc<dyn ChatModel>,
    pub embedder: Arc<dyn Embedder<F>>,
}

impl<F: Scalar> Clone for World<F> {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            synthesizer: self.synthesizer.clone(),
            embedder: self.embedder.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    pub feedback_id: String,
    pub correct_label: String,
    pub rationale: String,
    #[serde(default)]
    pub error_kind: Option<ErrorKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub feedback_id: String,
    pub narrative_id: String,
    pub iteration: u32,
    pub is_error: bool,
    pub error_kind: ErrorKind,
    pub received_at: Option<String>,
}

impl FeedbackAck {
    fn of(item: &FeedbackItem) -> Self {
        Self {
            feedback_id: item.feedback_id.clone(),
            narrative_id: item.narrative_id.clone(),
            iteration: item.iteration,
            is_error: item.is_error,
            error_kind: item.error_kind,
            received_at: item.timestamp.clone(),
        }
    }
}

/// What an expert sees for one unresolved prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingView {
    pub feedback_id: String,
    pub narrative_id: String,
    pub narrative_text: String,
    pub model_label: Option<String>,
    pub model_reason: String,
    pub model_span: String,
    pub span_verbatim: bool,
    pub response_options: Vec<String>,
    pub codebook_version: u32,
}

/// One line of annotations.jsonl.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub narrative_id: String,
    pub label: Option<String>,
    pub reason: String,
    pub span: String,
    pub unresolved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn corpus_digest(corpus: &Corpus) -> String {
    sha256_hex(corpus.to_jsonl().as_bytes())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn classify(model_label: Option<&str>, correct: &str, requested: Option<ErrorKind>, allow_rationale: bool) -> (bool, ErrorKind) {
    if model_label != Some(correct) {
        (true, ErrorKind::Label)
    } else if requested == Some(ErrorKind::RationaleOnly) && allow_rationale {
        (true, ErrorKind::RationaleOnly)
    } else {
        (false, ErrorKind::None)
    }
}

pub struct Engine<F: Scalar> {
    config: RunConfig,
    templates: PromptTemplates,
    corpus: Arc<Corpus>,
    world: World<F>,
    sentences: SentenceIndex<F>,
    state: LoopState,
    codebooks: Vec<Codebook>,
    log: Vec<IterationRecord>,
    store: Option<RunStore>,
}

impl<F: Scalar> Engine<F> {
    /// Builds the validation split and sampling pool and returns a run at
    /// t = 0 with the version-0 codebook, status `created`.
    pub fn start_run(
        run_id: &str,
        config: RunConfig,
        corpus: Arc<Corpus>,
        val_labels: &LabelSet,
        world: World<F>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        val_labels.validate(&config.variable)?;
        for id in val_labels.labels.keys() {
            corpus.require(id)?;
        }
        let templates = config.templates();
        let val = build_validation_split(
            val_labels,
            &config.variable.response_options,
            config.val_per_class,
            config.seed,
        )?;
        let val_set: BTreeSet<&String> = val.ids.iter().collect();
        let outside: Vec<String> = corpus.ids().into_iter().filter(|id| !val_set.contains(id)).collect();
        let pool = if config.keywords.is_empty() {
            outside
        } else {
            let k = config
                .upsample_size
                .unwrap_or(config.budget + config.batch_size)
                .min(outside.len());
            keyword_upsample(&corpus, &outside, &config.keywords, k, &*world.embedder)?.ids
        };
        if pool.len() < config.batch_size {
            return Err(EngineError::PoolTooSmall {
                available: pool.len(),
                batch: config.batch_size,
            });
        }
        let val_labels = val
            .ids
            .iter()
            .map(|id| (id.clone(), val_labels.get(id).expect("split ids are labeled").to_string()))
            .collect();
        let state = LoopState {
            run_id: run_id.to_string(),
            t: 0,
            codebook_version: 0,
            guide: Vec::new(),
            val_split: val,
            val_labels,
            pool,
            error_log: Vec::new(),
            metrics_history: Vec::new(),
            status: RunStatus::Created,
            stop_reason: None,
            pending: None,
        };
        let cb = init_codebook(&config.variable, &templates);
        Ok(Self {
            sentences: SentenceIndex::new(corpus.clone(), world.embedder.clone()),
            config,
            templates,
            corpus,
            world,
            state,
            codebooks: vec![cb],
            log: Vec::new(),
            store: None,
        })
    }

    /// Writes the run directory and persists every later transition there.
    pub fn persist_to(mut self, dir: &Path) -> Result<Self, EngineError> {
        let store = RunStore::create(dir, &self.state.run_id, &self.config, &corpus_digest(&self.corpus), &now())?;
        store.write_codebook(&self.codebooks[0])?;
        store.write_state(&self.state)?;
        self.store = Some(store);
        Ok(self)
    }

    /// Reopens a persisted run at its last completed iteration.
    pub fn resume(dir: &Path, corpus: Arc<Corpus>, world: World<F>) -> Result<Self, EngineError> {
        let (store, opened) = RunStore::open(dir)?;
        if store.manifest().corpus_digest != corpus_digest(&corpus) {
            return Err(StoreError::Corrupt {
                file: "corpus".into(),
                reason: "digest differs from the one recorded when the run was created".into(),
            }
            .into());
        }
        let codebooks = (0..=opened.state.codebook_version)
            .map(|v| store.read_codebook(v))
            .collect::<Result<Vec<_>, _>>()?;
        let templates = opened.config.templates();
        Ok(Self {
            sentences: SentenceIndex::new(corpus.clone(), world.embedder.clone()),
            config: opened.config,
            templates,
            corpus,
            world,
            state: opened.state,
            codebooks,
            log: opened.records,
            store: Some(store),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn status(&self) -> RunStatus {
        self.state.status
    }

    pub fn run_id(&self) -> &str {
        &self.state.run_id
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn codebook(&self) -> &Codebook {
        self.codebooks.last().expect("version 0 always exists")
    }

    pub fn codebook_version(&self, version: u32) -> Option<&Codebook> {
        self.codebooks.get(version as usize)
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    pub fn store(&self) -> Option<&RunStore> {
        self.store.as_ref()
    }

    fn persist_state(&mut self) -> Result<(), EngineError> {
        if let Some(store) = &mut self.store {
            store.set_status(self.state.status)?;
            store.write_pending(self.state.pending.as_ref())?;
            store.write_state(&self.state)?;
        }
        Ok(())
    }

    /// `created` to `running`; a no-op on a running run.
    pub fn start(&mut self) -> Result<(), EngineError> {
        match self.state.status {
            RunStatus::Created => {
                self.state.status = RunStatus::Running;
                self.persist_state()
            }
            RunStatus::Running | RunStatus::AwaitingFeedback => Ok(()),
            status => Err(EngineError::InvalidStatus { status, action: "start" }),
        }
    }

    fn predict_all(&self, ids: &[String], cb: &Codebook) -> Vec<PredictionRecord> {
        let model = &*self.world.model;
        bounded_map(ids, self.config.model.parallelism_cap, |id| match self.corpus.text(id) {
            Ok(text) => PredictionRecord::from_result(
                id,
                predict(model, &self.templates, &self.config.variable, cb, id, &text),
            ),
            Err(e) => PredictionRecord {
                narrative_id: id.clone(),
                label: None,
                reason: String::new(),
                span: String::new(),
                span_verbatim: false,
                raw_output: None,
                parse_path: None,
                error: Some(e.to_string()),
            },
        })
    }

    /// Samples and predicts the next batch, then waits for feedback.
    pub fn begin_iteration(&mut self) -> Result<&PendingBatch, EngineError> {
        match self.state.status {
            RunStatus::Running => {}
            RunStatus::AwaitingFeedback if self.state.pending.is_some() => {
                return Ok(self.state.pending.as_ref().expect("checked"));
            }
            status => {
                return Err(EngineError::InvalidStatus {
                    status,
                    action: "begin an iteration",
                })
            }
        }
        let t = self.state.t;
        let remaining = self.state.remaining_pool();
        let take = self.config.batch_size.min(remaining.len());
        let history = self.state.guide_ids();
        let batch = select_batch(
            self.config.sampling,
            &remaining,
            &history,
            take,
            derive_seed(self.config.seed, t as u64),
            &self.sentences,
        )?;
        let cb = self.codebook().clone();
        let predictions = self.predict_all(&batch, &cb);
        let items = predictions
            .into_iter()
            .enumerate()
            .map(|(i, prediction)| PendingItem {
                feedback_id: format!("fb-{t:04}-{i}"),
                prediction,
                feedback: None,
            })
            .collect();
        self.state.pending = Some(PendingBatch {
            t,
            codebook_version: cb.version,
            items,
        });
        self.state.status = RunStatus::AwaitingFeedback;
        self.persist_state()?;
        Ok(self.state.pending.as_ref().expect("just set"))
    }

    /// Unanswered items of the batch in flight, in batch order.
    pub fn pending_views(&self) -> Vec<PendingView> {
        let Some(p) = &self.state.pending else { return Vec::new() };
        p.unresolved()
            .map(|item| PendingView {
                feedback_id: item.feedback_id.clone(),
                narrative_id: item.prediction.narrative_id.clone(),
                narrative_text: self.corpus.text(&item.prediction.narrative_id).unwrap_or_default(),
                model_label: item.prediction.label.clone(),
                model_reason: item.prediction.reason.clone(),
                model_span: item.prediction.span.clone(),
                span_verbatim: item.prediction.span_verbatim,
                response_options: self.config.variable.response_options.clone(),
                codebook_version: p.codebook_version,
            })
            .collect()
    }

    fn accept(
        &mut self,
        feedback_id: &str,
        answer: FeedbackAnswer,
        source: FeedbackSource,
        timestamp: Option<String>,
    ) -> Result<FeedbackAck, FeedbackError> {
        let same = |fb: &FeedbackItem| fb.correct_label == answer.correct_label && fb.expert_rationale == answer.rationale;
        if let Some(fb) = self.state.guide.iter().find(|g| g.feedback_id == feedback_id) {
            return if same(fb) {
                Ok(FeedbackAck::of(fb))
            } else {
                Err(FeedbackError::Conflict(feedback_id.to_string()))
            };
        }
        let allow_rationale = self.config.rationale_only_errors;
        let variable = &self.config.variable;
        let pending = self
            .state
            .pending
            .as_mut()
            .ok_or_else(|| FeedbackError::UnknownId(feedback_id.to_string()))?;
        let t = pending.t;
        let item = pending
            .items
            .iter_mut()
            .find(|i| i.feedback_id == feedback_id)
            .ok_or_else(|| FeedbackError::UnknownId(feedback_id.to_string()))?;
        if let Some(fb) = &item.feedback {
            return if same(fb) {
                Ok(FeedbackAck::of(fb))
            } else {
                Err(FeedbackError::Conflict(feedback_id.to_string()))
            };
        }
        if !variable.has_option(&answer.correct_label) {
            return Err(FeedbackError::InvalidLabel {
                label: answer.correct_label,
            });
        }
        let (is_error, error_kind) = classify(
            item.prediction.label.as_deref(),
            &answer.correct_label,
            answer.error_kind,
            allow_rationale,
        );
        let fb = FeedbackItem {
            feedback_id: feedback_id.to_string(),
            narrative_id: item.prediction.narrative_id.clone(),
            iteration: t,
            model_label: item.prediction.label.clone(),
            model_reason: item.prediction.reason.clone(),
            correct_label: answer.correct_label,
            expert_rationale: answer.rationale,
            is_error,
            error_kind,
            source,
            timestamp,
            rationale_fallback: answer.rationale_fallback,
        };
        let ack = FeedbackAck::of(&fb);
        item.feedback = Some(fb);
        Ok(ack)
    }

    /// Records an expert's answer. Replays of an accepted submission return
    /// the original acknowledgement.
    pub fn submit_feedback(&mut self, submission: FeedbackSubmission) -> Result<FeedbackAck, EngineError> {
        let answer = FeedbackAnswer {
            correct_label: submission.correct_label,
            rationale: submission.rationale,
            error_kind: submission.error_kind,
            rationale_fallback: false,
        };
        let before = self.state.pending.clone();
        let ack = self.accept(&submission.feedback_id, answer, FeedbackSource::Human, Some(now()))?;
        if self.state.pending != before {
            self.persist_state()?;
        }
        Ok(ack)
    }

    pub fn batch_complete(&self) -> bool {
        self.state.pending.as_ref().is_some_and(PendingBatch::is_complete)
    }

    fn evaluate(&self, ids: &[String], references: &[&str], cb: &Codebook) -> (u64, Vec<LabelPair>) {
        let predictions = self.predict_all(ids, cb);
        let pairs: Vec<LabelPair> = predictions
            .iter()
            .zip(references)
            .map(|(p, r)| LabelPair::new(p.narrative_id.clone(), p.label.clone().unwrap_or_default(), *r))
            .collect();
        (pairs.iter().filter(|p| p.matches()).count() as u64, pairs)
    }

    /// Updates the guidelines from the batch's errors, evaluates, logs the
    /// iteration and applies the stopping rule.
    pub fn complete_iteration(&mut self) -> Result<IterationRecord, EngineError> {
        let pending = self.state.pending.clone().ok_or(EngineError::NoPendingBatch)?;
        let missing = pending.unresolved().count();
        if missing > 0 {
            return Err(EngineError::FeedbackIncomplete { missing });
        }
        let t = self.state.t;
        let feedback: Vec<FeedbackItem> = pending
            .items
            .iter()
            .map(|i| i.feedback.clone().expect("batch complete"))
            .collect();
        let error_items: Vec<(&PendingItem, &FeedbackItem)> = pending
            .items
            .iter()
            .zip(&feedback)
            .filter(|(_, f)| f.is_error)
            .collect();
        let error_ids: Vec<String> = error_items.iter().map(|(_, f)| f.feedback_id.clone()).collect();

        let current = self.codebook().clone();
        let (next, synthesized) = if error_items.is_empty() {
            (current.clone(), None)
        } else {
            let errors = error_items
                .iter()
                .map(|(p, f)| {
                    Ok(UpdateError {
                        narrative: self.corpus.text(&f.narrative_id)?,
                        model_label: p.prediction.shown_label().to_string(),
                        correct_label: f.correct_label.clone(),
                        human_reasoning: f.expert_rationale.clone(),
                        span: p.prediction.span.clone(),
                    })
                })
                .collect::<Result<Vec<_>, CorpusError>>()?;
            let reply = synthesize_guidelines(
                &*self.world.synthesizer,
                &self.templates,
                &self.config.variable,
                &current,
                &errors,
            )?;
            let bullets = parse_guideline_list(&reply)?;
            let next = current.update(self.config.update_mode, &bullets, t, &error_ids);
            (next, Some(bullets))
        };
        let changed = next.version != current.version;

        let guide: Vec<&FeedbackItem> = self.state.guide.iter().chain(&feedback).collect();
        let guide_ids: Vec<String> = guide.iter().map(|g| g.narrative_id.clone()).collect();
        let guide_refs: Vec<&str> = guide.iter().map(|g| g.correct_label.as_str()).collect();
        let (guide_correct, _) = self.evaluate(&guide_ids, &guide_refs, &next);
        let guide_total = guide_ids.len() as u64;

        let metrics = match self.state.metrics_history.last() {
            Some(prev) if !changed => IterationMetrics {
                guide_correct,
                guide_total,
                acc_guide: ratio(guide_correct, guide_total),
                val_carried: true,
                ..prev.clone()
            },
            _ => {
                let val_ids = self.state.val_split.ids.clone();
                let refs: Vec<&str> = val_ids.iter().map(|id| self.state.val_labels[id].as_str()).collect();
                let (val_correct, pairs) = self.evaluate(&val_ids, &refs, &next);
                let val_total = val_ids.len() as u64;
                let (macro_f1, class_f1) = if self.config.variable.kind == VariableKind::Multiclass {
                    let (m, per) = macro_f1::<F>(&pairs, &self.config.variable.response_options)
                        .expect("validation split is non-empty");
                    (
                        Some(m.to_f64_lossy()),
                        per.into_iter()
                            .map(|c| ClassScore {
                                class: c.class,
                                f1: c.f1.to_f64_lossy(),
                            })
                            .collect(),
                    )
                } else {
                    (None, Vec::new())
                };
                IterationMetrics {
                    guide_correct,
                    guide_total,
                    acc_guide: ratio(guide_correct, guide_total),
                    val_correct,
                    val_total,
                    acc_val: ratio(val_correct, val_total),
                    val_carried: false,
                    macro_f1,
                    class_f1,
                }
            }
        };

        let guide_size = guide.len();
        let validated: BTreeSet<&str> = guide.iter().map(|g| g.narrative_id.as_str()).collect();
        let remaining = self.state.pool.iter().filter(|id| !validated.contains(id.as_str())).count();
        let (status, stop_reason) = match check_stopping(metrics.acc_val, guide_size, t + 1, remaining, &self.config) {
            StopDecision::Continue => (RunStatus::Running, None),
            StopDecision::Stop(status, reason) => (status, Some(reason)),
        };
        let record = IterationRecord {
            t,
            batch: pending.items.iter().map(|i| i.prediction.narrative_id.clone()).collect(),
            predictions: pending.items.iter().map(|i| i.prediction.clone()).collect(),
            feedback,
            error_ids,
            synthesized,
            codebook_version: next.version,
            guide_size,
            metrics,
            status,
            stop_reason,
        };

        if let Some(store) = &mut self.store {
            if changed {
                store.write_codebook(&next)?;
            }
            store.append_iteration(&record)?;
        }
        if changed {
            self.codebooks.push(next);
        }
        self.state.apply(&record)?;
        self.log.push(record.clone());
        if let Some(store) = &self.store {
            store.write_state(&self.state)?;
            store.write_pending(None)?;
        }
        Ok(record)
    }

    /// One iteration with answers from `provider`. Returns
    /// `awaiting_feedback` when the provider deferred any item.
    pub fn run_iteration(&mut self, provider: &dyn FeedbackProvider) -> Result<RunStatus, EngineError> {
        if self.state.status == RunStatus::Created {
            self.start()?;
        }
        if self.state.status.is_terminal() {
            return Err(EngineError::InvalidStatus {
                status: self.state.status,
                action: "run an iteration",
            });
        }
        self.begin_iteration()?;
        let unresolved: Vec<(String, PredictionRecord)> = self
            .state
            .pending
            .as_ref()
            .expect("batch begun")
            .unresolved()
            .map(|i| (i.feedback_id.clone(), i.prediction.clone()))
            .collect();
        let mut answered = false;
        for (fid, prediction) in unresolved {
            let text = self.corpus.text(&prediction.narrative_id)?;
            if let Some(answer) = provider.answer(&prediction.narrative_id, &text, &prediction) {
                self.accept(&fid, answer, FeedbackSource::Simulated, None)?;
                answered = true;
            }
        }
        if self.batch_complete() {
            self.complete_iteration()?;
        } else if answered {
            self.persist_state()?;
        }
        Ok(self.state.status)
    }

    /// Iterates until a terminal status. Fails if the provider defers.
    pub fn run_to_completion(&mut self, provider: &dyn FeedbackProvider) -> Result<RunStatus, EngineError> {
        while !self.state.status.is_terminal() {
            if self.run_iteration(provider)? == RunStatus::AwaitingFeedback {
                return Err(EngineError::FeedbackIncomplete {
                    missing: self.state.pending.as_ref().map_or(0, |p| p.unresolved().count()),
                });
            }
        }
        Ok(self.state.status)
    }

    /// After a batch is fully answered: update, evaluate and, if the run
    /// continues, begin the next batch.
    pub fn advance(&mut self) -> Result<RunStatus, EngineError> {
        if self.batch_complete() {
            self.complete_iteration()?;
        }
        if self.state.status == RunStatus::Running {
            self.begin_iteration()?;
        }
        Ok(self.state.status)
    }

    /// Labels every narrative outside the guide and validation sets with the
    /// final codebook. Failed or unparseable outputs are kept, flagged
    /// unresolved.
    pub fn finalize(&mut self) -> Result<Vec<AnnotationRecord>, EngineError> {
        if !self.state.status.is_terminal() {
            return Err(EngineError::InvalidStatus {
                status: self.state.status,
                action: "finalize",
            });
        }
        let mut exclude: BTreeSet<&str> = self.state.guide.iter().map(|g| g.narrative_id.as_str()).collect();
        exclude.extend(self.state.val_split.ids.iter().map(String::as_str));
        let ids: Vec<String> = self
            .corpus
            .ids()
            .into_iter()
            .filter(|id| !exclude.contains(id.as_str()))
            .collect();
        let cb = self.codebook().clone();
        let out: Vec<AnnotationRecord> = self
            .predict_all(&ids, &cb)
            .into_iter()
            .map(|p| AnnotationRecord {
                unresolved: p.label.is_none(),
                narrative_id: p.narrative_id,
                label: p.label,
                reason: p.reason,
                span: p.span,
                error: p.error,
            })
            .collect();
        if let Some(store) = &self.store {
            store.write_annotations(&out)?;
        }
        Ok(out)
    }
}
