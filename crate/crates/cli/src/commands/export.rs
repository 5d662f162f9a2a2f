use codebook_forge::metrics::{disagreement_queue, LabelPair};
use codebook_forge::store::{export_metrics_timeline, read_records};
use serde_json::json;

use crate::common::{read_predictions, usage, write_file, CliResult, Common, Output};
use crate::ExportArgs;

pub fn run(c: &Common, a: &ExportArgs) -> CliResult {
    let queues = a.disagreements.is_some() || a.agreements.is_some();
    if a.timeline == queues {
        return Err(usage("choose one of --timeline or --disagreements/--agreements"));
    }
    if a.timeline {
        timeline(c, a)
    } else {
        review_queues(c, a)
    }
}

fn timeline(c: &Common, a: &ExportArgs) -> CliResult {
    let dir = a.run_dir.as_deref().expect("clap requires --run-dir");
    if !dir.is_dir() {
        return Err(usage(format!("--run-dir {} does not exist", dir.display())));
    }
    let records = read_records(dir)?;
    let csv = export_metrics_timeline(&records);
    match &c.out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            eprintln!("wrote {} rows to {}", records.len(), p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn review_queues(c: &Common, a: &ExportArgs) -> CliResult {
    let predictions = a
        .predictions
        .as_deref()
        .ok_or_else(|| usage("--predictions is required for review queues"))?;
    let variable = a.variable.as_deref().ok_or_else(|| usage("--variable is required for review queues"))?;
    let corpus = c.load_corpus()?;
    let reference = corpus.label_set(variable, "reference");
    let preds = read_predictions(predictions, Some(variable))?;
    let by_id = preds.get(variable).cloned().unwrap_or_default();
    let pairs: Vec<LabelPair> = by_id
        .iter()
        .filter_map(|(id, label)| {
            let r = reference.get(id)?;
            Some(LabelPair::new(id.clone(), label.clone().unwrap_or_else(|| "unparseable".into()), r))
        })
        .collect();
    if pairs.is_empty() {
        return Err(usage(format!("no predictions for {variable} have reference labels")));
    }
    let q = disagreement_queue(&pairs, a.disagreements.unwrap_or(0), a.agreements.unwrap_or(0), c.seed);
    if q.disagreement_shortfall > 0 {
        eprintln!(
            "warning: only {} disagreements available, {} short of the {} requested",
            q.disagreements.len(),
            q.disagreement_shortfall,
            a.disagreements.unwrap_or(0)
        );
    }
    if q.agreement_shortfall > 0 {
        eprintln!(
            "warning: only {} agreements available, {} short of the {} requested",
            q.agreements.len(),
            q.agreement_shortfall,
            a.agreements.unwrap_or(0)
        );
    }
    if let Some(p) = &c.out {
        write_file(p, serde_json::to_string_pretty(&q)?.as_bytes())?;
    }
    let mut out = Output::new(c.format);
    if out.jsonl() {
        out.record(&json!({"queue": "disagreements", "ids": q.disagreements, "shortfall": q.disagreement_shortfall}))?;
        out.record(&json!({"queue": "agreements", "ids": q.agreements, "shortfall": q.agreement_shortfall}))?;
    } else {
        for (name, ids) in [("disagreements", &q.disagreements), ("agreements", &q.agreements)] {
            out.text(format!("# {name} ({})", ids.len()))?;
            for id in ids {
                out.text(id)?;
            }
        }
    }
    Ok(())
}
