use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use codebook_forge::corpus::Corpus;
use codebook_forge::engine::{RunConfig, SimulatedProvider};
use codebook_forge::store::{read_config, ANNOTATIONS_FILE, MANIFEST_FILE};
use codebook_forge::Engine;
use serde_json::json;

use crate::common::{build_world, load_templates, usage, CliResult, Common, Output};
use crate::{DevelopArgs, Mode};

fn config(c: &Common, a: &DevelopArgs) -> CliResult<RunConfig> {
    let name = a
        .variable
        .as_deref()
        .ok_or_else(|| usage("--variable is required for a new run"))?;
    let variable = c.variable(name)?;
    let mut cfg = RunConfig::hitl(variable.clone(), c.endpoint()?, c.seed);
    cfg.budget = a.b;
    cfg.batch_size = a.n;
    cfg.min_guide = a.k;
    cfg.target = a.m;
    cfg.val_per_class = a.j;
    cfg.sampling = a.sampling.into();
    cfg.max_iterations = a.max_iterations;
    cfg.keywords = a.keywords.clone();
    cfg.upsample_size = a.upsample_size;
    cfg.rationale_only_errors = a.rationale_only_errors;
    cfg.update_mode = a.update_mode.into();
    cfg.embedder = c.embedder()?;
    if a.templates.is_some() {
        cfg.templates = Some(load_templates(a.templates.as_deref(), &variable)?);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn read_cot(path: Option<&Path>) -> CliResult<BTreeMap<String, String>> {
    let Some(p) = path else { return Ok(BTreeMap::new()) };
    let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{} is not an id-to-text map: {e}", p.display())))
}

fn run_id_for(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

pub fn run(c: &Common, a: &DevelopArgs) -> CliResult {
    let dir = c.out_path()?.to_path_buf();
    let corpus = Arc::new(c.load_corpus()?);
    let existing = dir.join(MANIFEST_FILE).exists();
    if a.resume && !existing {
        return Err(usage(format!("nothing to resume in {}", dir.display())));
    }
    if !a.resume && dir.exists() && std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(usage(format!(
            "{} is not empty; pass --resume to continue the run there",
            dir.display()
        )));
    }

    let mut engine = if a.resume {
        let cfg = read_config(&dir)?;
        let world = build_world(&cfg, &corpus)?;
        let e = Engine::resume(&dir, corpus.clone(), world)?;
        eprintln!("resuming {} at t = {} ({})", e.run_id(), e.state().t, e.status().as_str());
        e
    } else {
        let cfg = config(c, a)?;
        let world = build_world(&cfg, &corpus)?;
        let labels = corpus.label_set(&cfg.variable.name, "reference");
        Engine::start_run(&run_id_for(&dir), cfg, corpus.clone(), &labels, world)?.persist_to(&dir)?
    };

    match a.mode {
        Mode::Simulated => simulated(c, a, &mut engine, &corpus, &dir),
        Mode::Interactive => {
            drop(engine);
            let parent = dir
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            eprintln!("run {} is ready; answer its batches over HTTP", run_id_for(&dir));
            super::serve::serve_dir(c, &parent, &a.bind, a.port, corpus)
        }
    }
}

fn simulated(c: &Common, a: &DevelopArgs, engine: &mut Engine, corpus: &Corpus, dir: &Path) -> CliResult {
    let labels = corpus.label_set(&engine.config().variable.name, "reference");
    let cot = read_cot(a.cot_cache.as_deref())?;
    let provider = SimulatedProvider::new(&labels, cot, &engine.state().pool.clone()).map_err(|e| usage(e.to_string()))?;
    let mut out = Output::new(c.format);
    while !engine.status().is_terminal() {
        engine.run_iteration(&provider)?;
        if let Some(r) = engine.log().last() {
            let line = json!({
                "kind": "iteration",
                "t": r.t,
                "errors": r.error_ids.len(),
                "guide_size": r.guide_size,
                "codebook_version": r.codebook_version,
                "acc_guide": r.metrics.acc_guide,
                "acc_val": r.metrics.acc_val,
                "val_carried": r.metrics.val_carried,
                "macro_f1": r.metrics.macro_f1,
            });
            if out.jsonl() {
                out.record(&line)?;
            } else {
                eprintln!(
                    "t={:<3} errors={} guide={:<3} v{:<3} acc_val={:.3}{}",
                    r.t,
                    r.error_ids.len(),
                    r.guide_size,
                    r.codebook_version,
                    r.metrics.acc_val,
                    if r.metrics.val_carried { " (carried)" } else { "" }
                );
            }
        }
    }
    if !dir.join(ANNOTATIONS_FILE).exists() {
        let annotations = engine.finalize().context("labeling the remaining narratives")?;
        eprintln!("labeled {} remaining narratives", annotations.len());
    }
    let s = engine.state();
    let last = s.metrics_history.last();
    let summary = json!({
        "kind": "summary",
        "run_id": s.run_id,
        "status": s.status.as_str(),
        "stop_reason": s.stop_reason,
        "iterations": s.t,
        "acc_val": last.map(|m| m.acc_val),
        "macro_f1": last.and_then(|m| m.macro_f1),
        "guide_size": s.guide.len(),
        "codebook_version": s.codebook_version,
        "run_dir": dir.display().to_string(),
    });
    if out.jsonl() {
        out.record(&summary)?;
    } else {
        out.text(format!(
            "{}: {} after {} iterations; acc_val {}; guide {}; codebook v{}",
            s.run_id,
            s.stop_reason.as_deref().unwrap_or(s.status.as_str()),
            s.t,
            last.map_or("n/a".to_string(), |m| format!("{:.3}", m.acc_val)),
            s.guide.len(),
            s.codebook_version
        ))?;
    }
    Ok(())
}
