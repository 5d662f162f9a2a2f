//! One worker thread per run owns its engine; requests reach it through a
//! command queue and read the latest published snapshot.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use codebook_forge::codebook::Codebook;
use codebook_forge::engine::{
    ClassScore, FeedbackAck, FeedbackSubmission, IterationRecord, PendingView, RunConfig, RunStatus,
};
use codebook_forge::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot, watch};

use crate::error::ApiError;

/// One row of the convergence timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: u32,
    pub acc_guide: f64,
    pub acc_val: f64,
    pub val_carried: bool,
    pub guide_correct: u64,
    pub guide_total: u64,
    pub val_correct: u64,
    pub val_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_f1: Vec<ClassScore>,
    pub guide_size: usize,
    pub codebook_version: u32,
    pub errors: usize,
}

impl MetricsRow {
    pub fn of(r: &IterationRecord) -> Self {
        Self {
            t: r.t,
            acc_guide: r.metrics.acc_guide,
            acc_val: r.metrics.acc_val,
            val_carried: r.metrics.val_carried,
            guide_correct: r.metrics.guide_correct,
            guide_total: r.metrics.guide_total,
            val_correct: r.metrics.val_correct,
            val_total: r.metrics.val_total,
            macro_f1: r.metrics.macro_f1,
            class_f1: r.metrics.class_f1.clone(),
            guide_size: r.guide_size,
            codebook_version: r.codebook_version,
            errors: r.error_ids.len(),
        }
    }
}

/// What readers see of a run; replaced wholesale after every transition.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub status: RunStatus,
    pub t: u32,
    pub codebook_version: u32,
    pub guide_size: usize,
    pub stop_reason: Option<String>,
    /// The engine is predicting, synthesizing or evaluating.
    pub computing: bool,
    pub last_error: Option<String>,
    pub pending: Vec<PendingView>,
    pub pending_total: usize,
    pub codebooks: Vec<Arc<Codebook>>,
    pub metrics: Vec<MetricsRow>,
    /// Narratives a reviewer may open: the guide set and the batch in flight.
    pub visible: BTreeSet<String>,
}

enum Command {
    Start(oneshot::Sender<Result<RunStatus, ApiError>>),
    Feedback(FeedbackSubmission, oneshot::Sender<Result<FeedbackAck, ApiError>>),
    Shutdown,
}

pub struct RunHandle {
    pub run_id: String,
    pub config: RunConfig,
    pub dir: Option<PathBuf>,
    commands: mpsc::UnboundedSender<Command>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl RunHandle {
    /// Moves `engine` onto its own thread. A run found mid-loop (running, or
    /// with a fully answered batch) continues right away.
    pub fn spawn(engine: Engine) -> Arc<Self> {
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let mut worker = Worker {
            engine,
            codebooks: Vec::new(),
            last_error: None,
            publisher: None,
        };
        let (snap_tx, snap_rx) = watch::channel(Arc::new(worker.snapshot(false)));
        worker.publisher = Some(snap_tx);
        let run_id = worker.engine.run_id().to_string();
        let config = worker.engine.config().clone();
        let dir = worker.engine.store().map(|s| s.dir().to_path_buf());
        let thread = std::thread::Builder::new()
            .name(format!("run-{run_id}"))
            .spawn(move || worker.run(cmd_rx))
            .expect("spawn run worker");
        Arc::new(Self {
            run_id,
            config,
            dir,
            commands: cmd_tx,
            snapshot: snap_rx,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.borrow().clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<Arc<Snapshot>> {
        self.snapshot.clone()
    }

    async fn call<T>(&self, make: impl FnOnce(oneshot::Sender<Result<T, ApiError>>) -> Command) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(make(tx))
            .map_err(|_| ApiError::internal("run worker has stopped"))?;
        rx.await.map_err(|_| ApiError::internal("run worker has stopped"))?
    }

    pub async fn start(&self) -> Result<RunStatus, ApiError> {
        self.call(Command::Start).await
    }

    pub async fn submit(&self, submission: FeedbackSubmission) -> Result<FeedbackAck, ApiError> {
        self.call(|tx| Command::Feedback(submission, tx)).await
    }

    /// Stops the worker after its current step; every completed step is
    /// already on disk.
    pub fn shutdown(&self) {
        let _ = self.commands.send(Command::Shutdown);
        if let Some(t) = self.thread.lock().expect("thread lock").take() {
            let _ = t.join();
        }
    }
}

struct Worker {
    engine: Engine,
    codebooks: Vec<Arc<Codebook>>,
    last_error: Option<String>,
    publisher: Option<watch::Sender<Arc<Snapshot>>>,
}

impl Worker {
    fn snapshot(&mut self, computing: bool) -> Snapshot {
        let e = &self.engine;
        let latest = e.codebook().version;
        while self.codebooks.len() as u32 <= latest {
            let v = self.codebooks.len() as u32;
            self.codebooks
                .push(Arc::new(e.codebook_version(v).expect("versions are contiguous").clone()));
        }
        let state = e.state();
        let pending = e.pending_views();
        let mut visible: BTreeSet<String> = state.guide.iter().map(|g| g.narrative_id.clone()).collect();
        if let Some(p) = &state.pending {
            visible.extend(p.items.iter().map(|i| i.prediction.narrative_id.clone()));
        }
        Snapshot {
            status: state.status,
            t: state.t,
            codebook_version: state.codebook_version,
            guide_size: state.guide.len(),
            stop_reason: state.stop_reason.clone(),
            computing,
            last_error: self.last_error.clone(),
            pending_total: state.pending.as_ref().map_or(0, |p| p.items.len()),
            pending,
            codebooks: self.codebooks.clone(),
            metrics: e.log().iter().map(MetricsRow::of).collect(),
            visible,
        }
    }

    fn publish(&mut self, computing: bool) {
        let snap = Arc::new(self.snapshot(computing));
        if let Some(p) = &self.publisher {
            p.send_replace(snap);
        }
    }

    fn needs_step(&self) -> bool {
        self.engine.status() == RunStatus::Running || self.engine.batch_complete()
    }

    /// Completes an answered batch and begins the next one.
    fn step(&mut self) {
        if !self.needs_step() {
            return;
        }
        match self.engine.advance() {
            Ok(_) => self.last_error = None,
            Err(e) => {
                tracing::warn!(run = self.engine.run_id(), error = %e, "iteration failed");
                self.last_error = Some(e.to_string());
            }
        }
        self.publish(false);
    }

    fn run(mut self, mut commands: mpsc::UnboundedReceiver<Command>) {
        if self.needs_step() && self.engine.status() != RunStatus::Created {
            self.publish(true);
            self.step();
        }
        while let Some(cmd) = commands.blocking_recv() {
            match cmd {
                Command::Start(reply) => match self.engine.start() {
                    Ok(()) => {
                        let step = self.needs_step();
                        self.publish(step);
                        let _ = reply.send(Ok(self.engine.status()));
                        self.step();
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e.into()));
                    }
                },
                Command::Feedback(submission, reply) => {
                    let result = self.precheck(&submission).and_then(|()| {
                        self.engine.submit_feedback(submission).map_err(ApiError::from)
                    });
                    let step = result.is_ok() && self.needs_step();
                    if result.is_ok() {
                        self.publish(step);
                    }
                    let _ = reply.send(result);
                    if step {
                        self.step();
                    }
                }
                Command::Shutdown => break,
            }
        }
    }

    /// A corrected label needs a rationale: it is what the guidelines are
    /// rewritten from.
    fn precheck(&self, s: &FeedbackSubmission) -> Result<(), ApiError> {
        let Some(p) = &self.engine.state().pending else { return Ok(()) };
        let Some(item) = p.items.iter().find(|i| i.feedback_id == s.feedback_id) else { return Ok(()) };
        if item.feedback.is_none()
            && item.prediction.label.as_deref() != Some(s.correct_label.as_str())
            && s.rationale.trim().is_empty()
        {
            return Err(ApiError::invalid("rationale", "a corrected label needs a rationale"));
        }
        Ok(())
    }
}
