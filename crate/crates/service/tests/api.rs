use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use codebook_forge::engine::{FeedbackAck, PendingView, RunConfig};
use codebook_forge::synth::{generate_corpus, SynthWorld, SyntheticCorpusSpec};
use codebook_forge_service::{
    parse_wait, AppState, BackgroundServer, CodebookResponse, ErrorBody, MetricsResponse, PendingResponse, RunView,
    StubWorldFactory,
};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Harness {
    world: SynthWorld,
    server: BackgroundServer,
    client: Client,
}

impl Harness {
    fn new(seed: u64, run_dir: Option<PathBuf>) -> Self {
        let world = generate_corpus(&SyntheticCorpusSpec::binary("depressed_mood", 160, 0.5, seed)).unwrap();
        let state = AppState::new(Arc::new(world.corpus.clone()), Arc::new(StubWorldFactory), run_dir);
        state.load_runs();
        let server = BackgroundServer::start(state, "127.0.0.1:0").unwrap();
        Self {
            world,
            server,
            client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        }
    }

    fn config(&self, seed: u64) -> RunConfig {
        let mut cfg = self.world.run_config(seed);
        cfg.val_per_class = 5;
        cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.server.url())
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(self.url(path)).send().unwrap();
        (r.status(), r.json().unwrap())
    }

    fn post(&self, path: &str, body: &Value) -> (StatusCode, Value) {
        let r = self.client.post(self.url(path)).json(body).send().unwrap();
        (r.status(), r.json().unwrap())
    }

    fn create(&self, id: &str, seed: u64) -> RunView {
        let (s, v) = self.post("/runs", &json!({ "run_id": id, "config": self.config(seed) }));
        assert_eq!(s, StatusCode::CREATED, "{v}");
        serde_json::from_value(v).unwrap()
    }

    fn pending(&self, id: &str, wait: &str) -> PendingResponse {
        let (s, v) = self.get(&format!("/runs/{id}/pending?wait={wait}"));
        assert_eq!(s, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    /// Waits until the batch for iteration `t` (or a terminal state) is up.
    fn pending_at(&self, id: &str, t: u32) -> PendingResponse {
        let start = Instant::now();
        loop {
            let p = self.pending(id, "5s");
            if (p.t == t && !p.items.is_empty()) || p.status.is_terminal() {
                return p;
            }
            assert!(start.elapsed() < Duration::from_secs(20), "stuck at {p:?}");
        }
    }

    fn answer(&self, item: &PendingView) -> Value {
        json!({
            "feedback_id": item.feedback_id,
            "correct_label": self.world.truth.get(&item.narrative_id).unwrap(),
            "rationale": self.world.cot_cache()[&item.narrative_id],
        })
    }

    fn submit(&self, id: &str, body: &Value) -> (StatusCode, Value) {
        self.post(&format!("/runs/{id}/feedback"), body)
    }
}

fn error(v: Value) -> ErrorBody {
    serde_json::from_value(v).unwrap()
}

#[test]
fn health() {
    let h = Harness::new(1, None);
    assert_eq!(h.get("/health"), (StatusCode::OK, json!({"status": "ok"})));
}

#[test]
fn create_validates_and_lists() {
    let h = Harness::new(2, None);
    let view = h.create("r1", 2);
    assert_eq!(view.status.as_str(), "created");
    assert_eq!((view.t, view.codebook_version, view.pending), (0, 0, 0));

    let (s, v) = h.get("/runs");
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["runs"][0]["run_id"], "r1");

    let mut bad = serde_json::to_value(h.config(2)).unwrap();
    bad["m"] = json!(1.5);
    let (s, v) = h.post("/runs", &json!({ "run_id": "r2", "config": bad }));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("m"));

    let mut missing = serde_json::to_value(h.config(2)).unwrap();
    missing.as_object_mut().unwrap().remove("n");
    let (s, v) = h.post("/runs", &json!({ "config": missing }));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("config.n"));

    let mut wrong_type = serde_json::to_value(h.config(2)).unwrap();
    wrong_type["b"] = json!("many");
    let (s, v) = h.post("/runs", &json!({ "config": wrong_type }));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("config.b"));

    let (s, v) = h.post("/runs", &json!({ "run_id": "r1", "config": h.config(2) }));
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error(v).error.code, "run_exists");

    let (s, v) = h.post("/runs", &json!({ "run_id": "../x", "config": h.config(2) }));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("run_id"));

    // generated ids
    let (s, v) = h.post("/runs", &json!({ "config": h.config(2) }));
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["run_id"], "run-0002");
}

#[test]
fn unknown_runs_are_404() {
    let h = Harness::new(3, None);
    for path in ["/runs/nope", "/runs/nope/pending", "/runs/nope/metrics", "/runs/nope/codebook"] {
        let (s, v) = h.get(path);
        assert_eq!(s, StatusCode::NOT_FOUND, "{path}");
        assert_eq!(error(v).error.code, "not_found");
    }
    let (s, _) = h.post("/runs/nope/start", &json!({}));
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[test]
fn created_runs_wait_for_start() {
    let h = Harness::new(4, None);
    h.create("r", 4);
    let started = Instant::now();
    let p = h.pending("r", "200ms");
    assert!(started.elapsed() >= Duration::from_millis(150));
    assert!(p.items.is_empty() && p.heartbeat);
    assert_eq!(p.status.as_str(), "created");
}

#[test]
fn one_iteration_over_http() {
    let h = Harness::new(5, None);
    h.create("r", 5);
    let (s, v) = h.post("/runs/r/start", &json!({}));
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    // starting twice is harmless
    let (s, _) = h.post("/runs/r/start", &json!({}));
    assert_eq!(s, StatusCode::ACCEPTED);

    let p = h.pending_at("r", 0);
    assert_eq!(p.items.len(), 5);
    assert_eq!(p.status.as_str(), "awaiting_feedback");
    let first = &p.items[0];
    assert_eq!(first.response_options, vec!["0.0", "1.0"]);
    assert_eq!(first.narrative_text, h.world.corpus.text(&first.narrative_id).unwrap());

    // narrative text on demand, only for items under review
    let (s, v) = h.get(&format!("/runs/r/narratives/{}", first.narrative_id));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["text"], first.narrative_text);
    let hidden = h
        .world
        .corpus
        .ids()
        .into_iter()
        .find(|id| p.items.iter().all(|i| &i.narrative_id != id))
        .unwrap();
    assert_eq!(h.get(&format!("/runs/r/narratives/{hidden}")).0, StatusCode::NOT_FOUND);

    // rejected submissions
    let mut maybe = h.answer(first);
    maybe["correct_label"] = json!("maybe");
    let (s, v) = h.submit("r", &maybe);
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("correct_label"));
    let (s, _) = h.submit("r", &json!({"feedback_id": "fb-9999-0", "correct_label": "1.0", "rationale": "x"}));
    assert_eq!(s, StatusCode::NOT_FOUND);
    let model = first.model_label.clone().unwrap();
    let flipped = if model == "1.0" { "0.0" } else { "1.0" };
    let (s, v) = h.submit("r", &json!({"feedback_id": first.feedback_id, "correct_label": flipped, "rationale": "  "}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("rationale"));

    // two answers, one replayed
    let (s, a0) = h.submit("r", &h.answer(&p.items[0]));
    assert_eq!(s, StatusCode::OK);
    let (_, a1) = h.submit("r", &h.answer(&p.items[1]));
    let (s, replay) = h.submit("r", &h.answer(&p.items[0]));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(replay, a0);
    let mut different = h.answer(&p.items[1]);
    different["rationale"] = json!("something else");
    let (s, v) = h.submit("r", &different);
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error(v).error.code, "feedback_conflict");

    let left = h.pending("r", "0s");
    let ids: Vec<&str> = left.items.iter().map(|i| i.feedback_id.as_str()).collect();
    let expected: Vec<&str> = p.items[2..].iter().map(|i| i.feedback_id.as_str()).collect();
    assert_eq!(ids, expected);

    let mut acks: Vec<FeedbackAck> = vec![serde_json::from_value(a0).unwrap(), serde_json::from_value(a1).unwrap()];
    for item in &p.items[2..] {
        let (s, v) = h.submit("r", &h.answer(item));
        assert_eq!(s, StatusCode::OK, "{v}");
        acks.push(serde_json::from_value(v).unwrap());
    }
    let errors = acks.iter().filter(|a| a.is_error).count();

    let next = h.pending_at("r", 1);
    let run: RunView = serde_json::from_value(h.get("/runs/r").1).unwrap();
    assert_eq!(run.guide_size, 5);
    assert_eq!(run.codebook_version, u32::from(errors > 0));
    if !run.status.is_terminal() {
        assert_eq!(next.items.len(), 5);
        let before: BTreeSet<&str> = p.items.iter().map(|i| i.narrative_id.as_str()).collect();
        assert!(next.items.iter().all(|i| !before.contains(i.narrative_id.as_str())));
    }
    // replays after the batch closed still return the original ack
    let (s, v) = h.submit("r", &h.answer(&p.items[0]));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_value::<FeedbackAck>(v).unwrap(), acks[0]);

    let m: MetricsResponse = serde_json::from_value(h.get("/runs/r/metrics").1).unwrap();
    assert_eq!(m.rows.len(), 1);
    assert_eq!(m.m, 0.9);
    assert_eq!(m.rows[0].errors, errors);
    assert_eq!(m.rows[0].guide_size, 5);

    let v0: CodebookResponse = serde_json::from_value(h.get("/runs/r/codebook?version=0").1).unwrap();
    assert!(v0.codebook.bullets.is_empty());
    let latest: CodebookResponse = serde_json::from_value(h.get("/runs/r/codebook").1).unwrap();
    assert_eq!(latest.codebook.version, run.codebook_version);
    if errors > 0 {
        assert_eq!(latest.diff.previous_version, Some(0));
        assert_eq!(latest.diff.added.len(), latest.codebook.bullets.len());
    }
    let (s, _) = h.get(&format!("/runs/r/codebook?version={}", run.codebook_version + 1));
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[test]
fn runs_reach_a_terminal_state() {
    let h = Harness::new(6, None);
    h.create("r", 6);
    h.post("/runs/r/start", &json!({}));
    let mut t = 0;
    let mut seen = BTreeSet::new();
    loop {
        let p = h.pending_at("r", t);
        if p.status.is_terminal() {
            assert!(p.items.is_empty());
            break;
        }
        for item in &p.items {
            assert!(seen.insert(item.narrative_id.clone()), "sampled twice: {}", item.narrative_id);
            assert_eq!(h.submit("r", &h.answer(item)).0, StatusCode::OK);
        }
        t += 1;
    }
    let run: RunView = serde_json::from_value(h.get("/runs/r").1).unwrap();
    assert_eq!(run.status.as_str(), "converged");
    assert_eq!(run.guide_size, seen.len());
    assert!(run.guide_size >= 30);
    let m: MetricsResponse = serde_json::from_value(h.get("/runs/r/metrics").1).unwrap();
    assert_eq!(m.rows.len(), t as usize);
    assert!(m.rows.last().unwrap().acc_val >= 0.9);
    // a terminal run cannot restart
    let (s, v) = h.post("/runs/r/start", &json!({}));
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error(v).error.code, "invalid_status");
}

#[test]
fn persisted_runs_survive_a_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let h = Harness::new(7, Some(tmp.path().to_path_buf()));
    h.create("r", 7);
    h.post("/runs/r/start", &json!({}));
    let p = h.pending_at("r", 0);
    h.submit("r", &h.answer(&p.items[0]));
    let before = h.pending("r", "0s");
    drop(h);

    let h = Harness::new(7, Some(tmp.path().to_path_buf()));
    let after = h.pending("r", "0s");
    assert_eq!(after.items, before.items);
    assert_eq!(after.status.as_str(), "awaiting_feedback");
    // creating over an existing directory is refused
    let (s, _) = h.post("/runs", &json!({ "run_id": "r", "config": h.config(7) }));
    assert_eq!(s, StatusCode::CONFLICT);
}

#[test]
fn wait_durations() {
    assert_eq!(parse_wait("30s"), Some(Duration::from_secs(30)));
    assert_eq!(parse_wait("250ms"), Some(Duration::from_millis(250)));
    assert_eq!(parse_wait("2m"), Some(Duration::from_secs(120)));
    assert_eq!(parse_wait("5"), Some(Duration::from_secs(5)));
    assert_eq!(parse_wait("soon"), None);
    assert_eq!(parse_wait("5h"), None);
}

#[test]
fn bad_wait_is_422() {
    let h = Harness::new(8, None);
    h.create("r", 8);
    let (s, v) = h.get("/runs/r/pending?wait=soon");
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(v).error.field.as_deref(), Some("wait"));
}
