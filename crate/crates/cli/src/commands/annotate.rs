use std::io::Write;

use codebook_forge::codebook::{init_codebook, Codebook};
use codebook_forge::corpus::VariableKind;
use codebook_forge::engine::RunConfig;
use codebook_forge::gateway::predict;
use codebook_forge::metrics::{report_record, self_consistency, LabelPair, DEFAULT_LEVEL};
use codebook_forge::util::bounded_map;
use serde_json::json;

use crate::common::{build_world, load_templates, usage, CliResult, Common, Output, PredictionLine};
use crate::AnnotateArgs;

pub fn run(c: &Common, a: &AnnotateArgs) -> CliResult {
    let out_path = c.out_path()?.to_path_buf();
    let variable = c.variable(&a.variable)?;
    let corpus = c.load_corpus()?;
    let templates = load_templates(a.templates.as_deref(), &variable)?;
    let codebook: Codebook = match &a.codebook {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a codebook: {e}", p.display())))?
        }
        None => init_codebook(&variable, &templates),
    };
    if codebook.variable != variable.name {
        return Err(usage(format!(
            "codebook is for {:?}, not {:?}",
            codebook.variable, variable.name
        )));
    }
    let base = c.endpoint()?;
    let temperatures = if a.temperatures.is_empty() {
        vec![base.temperature]
    } else {
        a.temperatures.clone()
    };

    let ids = corpus.ids();
    let reference = corpus.label_set(&variable.name, "reference");
    let positive = (variable.kind == VariableKind::Binary).then(|| "1.0");
    let mut out = Output::new(c.format);
    let mut runs: Vec<Vec<String>> = Vec::new();
    let mut lines = Vec::new();
    for &temperature in &temperatures {
        let mut endpoint = base.clone();
        endpoint.temperature = temperature;
        endpoint.validate().map_err(|e| usage(e.to_string()))?;
        let mut config = RunConfig::hitl(variable.clone(), endpoint, c.seed);
        config.embedder = c.embedder()?;
        let world = build_world(&config, &corpus)?;
        let model = &*world.model;
        let predictions: Vec<PredictionLine> = bounded_map(&ids, config.model.parallelism_cap, |id| {
            let text = corpus.text(id).expect("id from corpus");
            match predict(model, &templates, &variable, &codebook, id, &text) {
                Ok(p) => PredictionLine {
                    narrative_id: id.clone(),
                    variable: Some(variable.name.clone()),
                    label: Some(p.label),
                    reason: p.reason,
                    span: p.span,
                    temperature: Some(temperature),
                    error: None,
                },
                Err(e) => PredictionLine {
                    narrative_id: id.clone(),
                    variable: Some(variable.name.clone()),
                    label: None,
                    reason: String::new(),
                    span: String::new(),
                    temperature: Some(temperature),
                    error: Some(e.to_string()),
                },
            }
        });
        let failed = predictions.iter().filter(|p| p.label.is_none()).count();
        eprintln!(
            "temperature {temperature}: {} narratives, {failed} without a label",
            predictions.len()
        );
        runs.push(
            predictions
                .iter()
                .map(|p| p.label.clone().unwrap_or_else(|| "unparseable".into()))
                .collect(),
        );

        let pairs: Vec<LabelPair> = predictions
            .iter()
            .filter_map(|p| {
                let r = reference.get(&p.narrative_id)?;
                Some(LabelPair::new(
                    p.narrative_id.clone(),
                    p.label.clone().unwrap_or_else(|| "unparseable".into()),
                    r,
                ))
            })
            .collect();
        if !pairs.is_empty() {
            let report = report_record(
                &variable.name,
                &pairs,
                positive,
                &variable.response_options,
                a.bootstrap_iterations,
                DEFAULT_LEVEL,
                c.seed,
            )?;
            if out.jsonl() {
                let mut v = serde_json::to_value(&report)?;
                v["kind"] = json!("agreement");
                v["temperature"] = json!(temperature);
                out.record(&v)?;
            } else {
                let rates = match (report.tpr, report.fpr, report.fnr) {
                    (Some(t), Some(f), Some(n)) => format!(", TPR {t:.3} FPR {f:.3} FNR {n:.3}"),
                    _ => String::new(),
                };
                out.text(format!(
                    "{} @ {temperature}: agreement {:.3} [{:.3}, {:.3}] over {}{rates}",
                    report.variable, report.agreement, report.ci[0], report.ci[1], report.n
                ))?;
            }
        }
        lines.extend(predictions);
    }
    if runs.len() > 1 {
        let sc = self_consistency(&runs)?;
        if out.jsonl() {
            out.record(&json!({
                "kind": "self_consistency",
                "variable": variable.name,
                "temperatures": temperatures,
                "value": sc.as_f64(),
                "narratives": ids.len(),
            }))?;
        } else {
            out.text(format!("self-consistency across {} temperatures: {:.3}", runs.len(), sc.as_f64()))?;
        }
    }

    let mut buf = Vec::new();
    for l in &lines {
        serde_json::to_writer(&mut buf, l)?;
        buf.write_all(b"\n")?;
    }
    crate::common::write_file(&out_path, &buf)?;
    eprintln!("wrote {} predictions to {}", lines.len(), out_path.display());
    Ok(())
}
