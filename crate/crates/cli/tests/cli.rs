use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn cf() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_codebook-forge"));
    for var in [
        "CODEBOOK_FORGE_ENDPOINT_URL",
        "CODEBOOK_FORGE_MODEL",
        "CODEBOOK_FORGE_EMBED_URL",
        "CODEBOOK_FORGE_EMBED_MODEL",
    ] {
        c.env_remove(var);
    }
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    cf().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l}: {e}")))
        .collect()
}

fn jsonl_file(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// A 634-narrative legal corpus plus cached reasoning in a temp dir.
fn legal(seed: u64) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let seed = seed.to_string();
    ok(
        &["synth", "--out", "corpus.jsonl", "--cot-out", "cot.json", "--seed", &seed],
        tmp.path(),
    );
    tmp
}

#[test]
fn annotate_labels_every_narrative() {
    let tmp = legal(1);
    let out = ok(
        &[
            "annotate", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--endpoint-url", "stub://",
            "--out", "pred.jsonl", "--format", "jsonl",
        ],
        tmp.path(),
    );
    let preds = jsonl_file(&tmp.path().join("pred.jsonl"));
    assert_eq!(preds.len(), 634);
    assert!(preds.iter().all(|p| p["label"].is_string()));
    let report = &stdout_lines(&out)[0];
    assert_eq!(report["kind"], "agreement");
    assert_eq!(report["n"], 634);
    assert_eq!(report["bootstrap_iterations"], 10000);
}

#[test]
fn temperatures_give_runs_and_self_consistency() {
    let tmp = legal(2);
    let out = ok(
        &[
            "annotate", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--endpoint-url", "stub://",
            "--out", "pred.jsonl", "--temperatures", "0.2,0.5,0.7", "--format", "jsonl",
            "--bootstrap-iterations", "200",
        ],
        tmp.path(),
    );
    let preds = jsonl_file(&tmp.path().join("pred.jsonl"));
    assert_eq!(preds.len(), 3 * 634);
    for t in [0.2, 0.5, 0.7] {
        assert_eq!(preds.iter().filter(|p| p["temperature"] == json!(t)).count(), 634);
    }
    let lines = stdout_lines(&out);
    let sc = lines.iter().find(|l| l["kind"] == "self_consistency").unwrap();
    assert_eq!(sc["temperatures"], json!([0.2, 0.5, 0.7]));
    assert_eq!(sc["value"], 1.0);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = legal(3);
    let out = run(&["annotate", "--corpus", "corpus.jsonl", "--endpoint-url", "stub://", "--out", "p.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--variable") && err.contains("Usage"), "{err}");

    let out = run(&["annotate", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--out", "p.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--endpoint-url"));

    let out = run(&["annotate", "--corpus", "corpus.jsonl", "--variable", "nope", "--endpoint-url", "stub://", "--out", "p.jsonl"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("p.jsonl").exists());

    assert_eq!(run(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn endpoint_precedence() {
    let tmp = legal(4);
    let args = |extra: &[&'static str]| {
        let mut a = vec![
            "annotate", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--out", "p.jsonl",
            "--bootstrap-iterations", "10",
        ];
        a.extend_from_slice(extra);
        a
    };
    // an unroutable address in the file; the stub must win wherever it is given
    fs::write(tmp.path().join("unreachable.toml"), "endpoint_url = \"http://127.0.0.1:9\"\nmodel = \"m\"\n").unwrap();
    fs::write(tmp.path().join("stub.toml"), "endpoint_url = \"stub://\"\n").unwrap();
    let labeled = |p: &Path| jsonl_file(&p.join("p.jsonl")).iter().all(|r| r["label"].is_string());

    ok(&args(&["--config", "stub.toml"]), tmp.path());
    assert!(labeled(tmp.path()));
    ok(&args(&["--config", "unreachable.toml", "--endpoint-url", "stub://"]), tmp.path());
    assert!(labeled(tmp.path()));
    let out = cf()
        .args(args(&["--config", "unreachable.toml"]))
        .env("CODEBOOK_FORGE_ENDPOINT_URL", "stub://")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(labeled(tmp.path()));

    fs::write(tmp.path().join("bad.toml"), "endpoint = 1\n").unwrap();
    assert_eq!(run(&args(&["--config", "bad.toml"]), tmp.path()).status.code(), Some(2));
}

#[test]
fn ingest_reports_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("in.jsonl"),
        "{\"id\":\"a\",\"cme\":\"A.\",\"le\":\"\"}\n{\"cme\":\"no id\"}\n{\"id\":\"a\",\"le\":\"dup\"}\n{\"id\":\"b\",\"le\":\"B.\"}\n",
    )
    .unwrap();
    let out = ok(&["ingest", "--corpus", "in.jsonl", "--out", "clean.jsonl", "--format", "jsonl"], tmp.path());
    let lines = stdout_lines(&out);
    let lines_rejected: Vec<u64> = lines
        .iter()
        .filter(|l| l["kind"] == "reject")
        .map(|l| l["line"].as_u64().unwrap())
        .collect();
    assert_eq!(lines_rejected, vec![2, 3]);
    assert_eq!(lines.last().unwrap()["records"], 2);
    assert_eq!(jsonl_file(&tmp.path().join("clean.jsonl")).len(), 2);

    fs::write(tmp.path().join("empty.jsonl"), "not json\n").unwrap();
    assert_eq!(run(&["ingest", "--corpus", "empty.jsonl"], tmp.path()).status.code(), Some(1));
}

/// Twelve binary variables, two prediction files of different quality.
fn twelve_variables(dir: &Path) {
    let names: Vec<String> = (0..12).map(|i| format!("var_{i:02}")).collect();
    let spec: Vec<Value> = names
        .iter()
        .map(|n| json!({"name": n, "kind": "binary", "response_options": ["0.0", "1.0"]}))
        .collect();
    fs::write(dir.join("vars.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let mut corpus = String::new();
    let mut a = String::new();
    let mut b = String::new();
    for i in 0..100 {
        let labels: serde_json::Map<String, Value> = names
            .iter()
            .enumerate()
            .map(|(v, n)| (n.clone(), json!(if (i * 7 + v * 3) % 4 == 0 { "1.0" } else { "0.0" })))
            .collect();
        corpus.push_str(&json!({"id": format!("n{i:03}"), "cme": "text.", "labels": labels}).to_string());
        corpus.push('\n');
        for (v, n) in names.iter().enumerate() {
            let truth = labels[n].as_str().unwrap();
            let flip = |l: &str| if l == "1.0" { "0.0" } else { "1.0" };
            // file a misses 2-4 items per variable, file b 8-13
            let la = if i < 2 + v % 3 { flip(truth) } else { truth };
            let lb = if i < 8 + (v * 5) % 6 { flip(truth) } else { truth };
            a.push_str(&json!({"narrative_id": format!("n{i:03}"), "variable": n, "label": la}).to_string());
            a.push('\n');
            b.push_str(&json!({"narrative_id": format!("n{i:03}"), "variable": n, "label": lb}).to_string());
            b.push('\n');
        }
    }
    fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    fs::write(dir.join("a.jsonl"), a).unwrap();
    fs::write(dir.join("b.jsonl"), b).unwrap();
}

#[test]
fn evaluate_reports_and_paired_test() {
    let tmp = tempfile::tempdir().unwrap();
    twelve_variables(tmp.path());
    let out = ok(
        &[
            "evaluate", "--corpus", "corpus.jsonl", "--variable-spec", "vars.json", "--predictions", "a.jsonl",
            "--compare", "b.jsonl", "--format", "jsonl", "--bootstrap-iterations", "10000",
        ],
        tmp.path(),
    );
    let lines = stdout_lines(&out);
    let reports: Vec<&Value> = lines.iter().filter(|l| l["kind"] == "agreement").collect();
    assert_eq!(reports.len(), 24);
    assert!(reports.iter().all(|r| r["bootstrap_iterations"] == 10000));
    assert!(reports.iter().all(|r| r["tpr"].is_number() && r["fnr"].is_number()));
    let t = lines.iter().find(|l| l["kind"] == "paired_t").unwrap();
    assert_eq!(t["unit"], "variable");
    assert_eq!(t["units"], 12);
    assert_eq!(t["df"], 11);
    assert_eq!(t["threshold"], 0.025);
    assert_eq!(t["significant"], true);

    let text = ok(
        &[
            "evaluate", "--corpus", "corpus.jsonl", "--variable-spec", "vars.json", "--predictions", "a.jsonl",
            "--compare", "b.jsonl", "--bootstrap-iterations", "100",
        ],
        tmp.path(),
    );
    assert!(String::from_utf8_lossy(&text.stdout).contains("0.05 / 2 = 0.025"));
}

#[test]
fn perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    twelve_variables(tmp.path());
    let corpus = jsonl_file(&tmp.path().join("corpus.jsonl"));
    let perfect: String = corpus
        .iter()
        .map(|n| format!("{}\n", json!({"narrative_id": n["id"], "label": n["labels"]["var_03"]})))
        .collect();
    fs::write(tmp.path().join("perfect.jsonl"), perfect).unwrap();
    let out = ok(
        &[
            "evaluate", "--corpus", "corpus.jsonl", "--variable-spec", "vars.json", "--variable", "var_03",
            "--predictions", "perfect.jsonl", "--format", "jsonl",
        ],
        tmp.path(),
    );
    let r = &stdout_lines(&out)[0];
    assert_eq!(r["agreement"], 1.0);
    assert_eq!(r["ci"], json!([1.0, 1.0]));
    assert_eq!(r["fpr"], 0.0);
    assert_eq!(r["bootstrap_iterations"], 10000);
}

fn develop_args<'a>(out: &'a str, sampling: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "develop", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--endpoint-url", "stub://",
        "--cot-cache", "cot.json", "--out", out, "--sampling", sampling, "--seed", seed, "--format", "jsonl",
        "-b", "150", "-n", "5",
    ]
}

#[test]
fn develop_simulated_reaches_a_terminal_state() {
    let tmp = legal(5);
    let out = ok(&develop_args("runs/a", "random", "5"), tmp.path());
    let lines = stdout_lines(&out);
    let summary = lines.last().unwrap();
    assert_eq!(summary["kind"], "summary");
    assert!(["converged", "budget_exhausted", "capped"].contains(&summary["status"].as_str().unwrap()));
    assert!(summary["guide_size"].as_u64().unwrap() <= 155);
    assert_eq!(lines.len() - 1, summary["iterations"].as_u64().unwrap() as usize);
    assert!(tmp.path().join("runs/a/annotations.jsonl").exists());

    // same seed, same log
    ok(&develop_args("runs/b", "random", "5"), tmp.path());
    assert_eq!(
        fs::read(tmp.path().join("runs/a/iterations.jsonl")).unwrap(),
        fs::read(tmp.path().join("runs/b/iterations.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("runs/a/annotations.jsonl")).unwrap(),
        fs::read(tmp.path().join("runs/b/annotations.jsonl")).unwrap()
    );
    // a used directory needs --resume
    assert_eq!(run(&develop_args("runs/a", "random", "5"), tmp.path()).status.code(), Some(2));
}

#[test]
fn coverage_and_random_sampling_differ() {
    let tmp = legal(6);
    ok(&develop_args("runs/cov", "coverage", "6"), tmp.path());
    ok(&develop_args("runs/rnd", "random", "6"), tmp.path());
    let batches = |name: &str| -> Vec<Value> {
        jsonl_file(&tmp.path().join(format!("runs/{name}/iterations.jsonl")))
            .iter()
            .map(|r| r["batch"].clone())
            .collect()
    };
    let (cov, rnd) = (batches("cov"), batches("rnd"));
    // with nothing reviewed yet, coverage starts from the seeded random batch
    assert_eq!(cov[0], rnd[0]);
    assert_ne!(cov, rnd);
}

fn log_lines(path: &Path) -> usize {
    fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0)
}

#[test]
fn develop_resumes_after_interruption() {
    let tmp = legal(7);
    ok(&develop_args("runs/full", "random", "7"), tmp.path());

    let mut child: Child = cf()
        .args(develop_args("runs/cut", "random", "7"))
        .current_dir(tmp.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let log = tmp.path().join("runs/cut/iterations.jsonl");
    let start = Instant::now();
    while log_lines(&log) < 3 && start.elapsed() < Duration::from_secs(30) {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    let _ = child.wait();

    let mut resume = develop_args("runs/cut", "random", "7");
    resume.push("--resume");
    ok(&resume, tmp.path());
    assert_eq!(
        fs::read(tmp.path().join("runs/full/iterations.jsonl")).unwrap(),
        fs::read(&log).unwrap()
    );

    assert_eq!(run(&["develop", "--corpus", "corpus.jsonl", "--out", "runs/none", "--resume"], tmp.path()).status.code(), Some(2));
}

#[test]
fn export_queues_and_timeline() {
    let tmp = legal(8);
    ok(
        &[
            "annotate", "--corpus", "corpus.jsonl", "--variable", "legal_interaction", "--endpoint-url", "stub://",
            "--out", "base.jsonl", "--bootstrap-iterations", "10",
        ],
        tmp.path(),
    );
    let base = [
        "export", "--corpus", "corpus.jsonl", "--predictions", "base.jsonl", "--variable", "legal_interaction",
        "--format", "jsonl",
    ];
    let mut args = base.to_vec();
    args.extend(["--disagreements", "150", "--agreements", "150", "--seed", "3"]);
    let out = ok(&args, tmp.path());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0]["queue"], "disagreements");
    assert_eq!(lines[0]["ids"].as_array().unwrap().len(), 150);
    assert_eq!(lines[1]["ids"].as_array().unwrap().len(), 150);
    assert_eq!(out.stdout, ok(&args, tmp.path()).stdout);

    // the untrained stub disagrees on the 157 minority narratives only
    let mut args = base.to_vec();
    args.extend(["--disagreements", "400", "--agreements", "10"]);
    let out = ok(&args, tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("short"));
    assert_eq!(stdout_lines(&out)[0]["ids"].as_array().unwrap().len(), 157);

    ok(&develop_args("runs/r", "random", "8"), tmp.path());
    let out = ok(&["export", "--timeline", "--run-dir", "runs/r"], tmp.path());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("t,acc_guide,acc_val,val_carried,macro_f1"));
    assert_eq!(csv.lines().count() - 1, log_lines(&tmp.path().join("runs/r/iterations.jsonl")));
    assert_eq!(run(&["export", "--timeline", "--run-dir", "missing"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["export"], tmp.path()).status.code(), Some(2));
}

fn spawn_serve(dir: &Path, port: &str) -> (Child, String) {
    let mut child = cf()
        .args(["serve", "--corpus", "corpus.jsonl", "--run-dir", "runs", "--port", port, "--format", "jsonl"])
        .current_dir(dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut first).unwrap();
    let v: Value = serde_json::from_str(&first).unwrap();
    (child, v["url"].as_str().unwrap().to_string())
}

#[cfg(unix)]
fn interrupt(child: &Child) {
    Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
}

#[cfg(unix)]
#[test]
fn serve_health_and_clean_interrupt() {
    let tmp = legal(9);
    fs::create_dir(tmp.path().join("runs")).unwrap();
    let (mut child, url) = spawn_serve(tmp.path(), "0");
    let health = reqwest::blocking::get(format!("{url}/health")).unwrap();
    assert_eq!(health.status(), 200);

    // the port is taken now
    let port = url.rsplit(':').next().unwrap().to_string();
    let busy = run(&["serve", "--corpus", "corpus.jsonl", "--run-dir", "runs", "--port", &port], tmp.path());
    assert_eq!(busy.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&busy.stderr).contains("cannot listen"));

    interrupt(&child);
    assert_eq!(child.wait().unwrap().code(), Some(0));

    let missing = run(&["serve", "--corpus", "corpus.jsonl", "--run-dir", "nowhere", "--port", "0"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[cfg(unix)]
#[test]
fn serve_reopens_persisted_runs() {
    let tmp = legal(10);
    ok(&develop_args("runs/done", "random", "10"), tmp.path());
    let (child, url) = spawn_serve(tmp.path(), "0");
    let run: Value = reqwest::blocking::get(format!("{url}/runs/done")).unwrap().json().unwrap();
    let summary: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("runs/done/state.json")).unwrap()).unwrap();
    assert_eq!(run["t"], summary["t"]);
    assert_eq!(run["status"], summary["status"]);
    interrupt(&child);
    let mut child = child;
    assert_eq!(child.wait().unwrap().code(), Some(0));
}

