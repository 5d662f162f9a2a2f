use std::collections::BTreeMap;
use std::path::Path;

use codebook_forge::corpus::{build_balanced_split, build_random_split, Corpus, Variable, VariableKind};
use codebook_forge::metrics::{bonferroni_alpha, paired_t_test, report_record, LabelPair, MetricsError, ReportRecord};
use serde_json::json;

use crate::common::{read_predictions, usage, CliResult, Common, Output};
use crate::{EvaluateArgs, SplitKind};

type Predictions = BTreeMap<String, BTreeMap<String, Option<String>>>;

fn eval_ids(corpus: &Corpus, variable: &Variable, a: &EvaluateArgs, seed: u64) -> CliResult<Vec<String>> {
    let reference = corpus.label_set(&variable.name, "reference");
    let ids = match a.split {
        SplitKind::Full => corpus.ids(),
        SplitKind::Balanced => build_balanced_split(corpus, &reference, a.per_class, seed)
            .map_err(|e| usage(format!("{}: {e}", variable.name)))?
            .ids,
        SplitKind::Random => build_random_split(corpus, a.size, seed).ids,
    };
    Ok(ids.into_iter().filter(|id| reference.get(id).is_some()).collect())
}

fn pairs_for(corpus: &Corpus, variable: &Variable, ids: &[String], preds: &Predictions, file: &Path) -> Vec<LabelPair> {
    let reference = corpus.label_set(&variable.name, "reference");
    let by_id = preds.get(&variable.name);
    let mut missing = 0;
    let pairs = ids
        .iter()
        .map(|id| {
            let label = match by_id.and_then(|m| m.get(id)) {
                Some(Some(l)) => l.clone(),
                Some(None) => "unparseable".to_string(),
                None => {
                    missing += 1;
                    "missing".to_string()
                }
            };
            LabelPair::new(id.clone(), label, reference.get(id).expect("filtered to labeled ids"))
        })
        .collect();
    if missing > 0 {
        eprintln!(
            "warning: {}: {missing} of {} evaluated narratives have no {} prediction; counted as disagreements",
            file.display(),
            ids.len(),
            variable.name
        );
    }
    pairs
}

fn report(variable: &Variable, pairs: &[LabelPair], a: &EvaluateArgs, seed: u64) -> CliResult<ReportRecord> {
    let positive = (variable.kind == VariableKind::Binary).then_some("1.0");
    report_record(
        &variable.name,
        pairs,
        positive,
        &variable.response_options,
        a.bootstrap_iterations,
        a.level,
        seed,
    )
    .map_err(|e| match e {
        MetricsError::Empty => usage(format!("no labeled narratives to evaluate for {}", variable.name)),
        MetricsError::InvalidParameter(m) => usage(m),
        other => other.into(),
    })
}

fn print_report(out: &mut Output, r: &ReportRecord, file: &str) -> CliResult {
    if out.jsonl() {
        let mut v = serde_json::to_value(r)?;
        v["kind"] = json!("agreement");
        v["predictions"] = json!(file);
        out.record(&v)
    } else {
        let rates = match (r.tpr, r.fpr, r.fnr) {
            (Some(t), Some(f), Some(n)) => format!("  TPR {t:.3}  FPR {f:.3}  FNR {n:.3}"),
            _ => String::new(),
        };
        out.text(format!(
            "{:<28} {:.3} [{:.3}, {:.3}]  n={}{rates}",
            r.variable, r.agreement, r.ci[0], r.ci[1], r.n
        ))
    }
}

pub fn run(c: &Common, a: &EvaluateArgs) -> CliResult {
    let corpus = c.load_corpus()?;
    let known = c.variables()?;
    let default_var = (a.variable.len() == 1).then(|| a.variable[0].as_str());
    let preds_a = read_predictions(&a.predictions, default_var)?;
    let preds_b = match &a.compare {
        Some(p) => Some(read_predictions(p, default_var)?),
        None => None,
    };
    let names: Vec<String> = if a.variable.is_empty() {
        preds_a.keys().cloned().collect()
    } else {
        a.variable.clone()
    };
    let variables = names
        .iter()
        .map(|n| {
            known
                .iter()
                .find(|v| &v.name == n)
                .cloned()
                .ok_or_else(|| usage(format!("variable {n:?} is not in the variable spec")))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut out = Output::new(c.format);
    if !out.jsonl() {
        out.text(format!(
            "agreement with reference labels ({} bootstrap iterations, level {})",
            a.bootstrap_iterations, a.level
        ))?;
    }
    let file_a = a.predictions.display().to_string();
    let mut units_a: Vec<(f64, Vec<bool>)> = Vec::new();
    let mut units_b: Vec<(f64, Vec<bool>)> = Vec::new();
    for v in &variables {
        let ids = eval_ids(&corpus, v, a, c.seed)?;
        let pairs = pairs_for(&corpus, v, &ids, &preds_a, &a.predictions);
        let r = report(v, &pairs, a, c.seed)?;
        print_report(&mut out, &r, &file_a)?;
        units_a.push((r.agreement, pairs.iter().map(LabelPair::matches).collect()));
        if let (Some(pb), Some(path)) = (&preds_b, &a.compare) {
            let pairs = pairs_for(&corpus, v, &ids, pb, path);
            let r = report(v, &pairs, a, c.seed)?;
            print_report(&mut out, &r, &path.display().to_string())?;
            units_b.push((r.agreement, pairs.iter().map(LabelPair::matches).collect()));
        }
    }

    if preds_b.is_some() {
        // variables are the paired units; with one variable, narratives are
        let (xa, xb, unit): (Vec<f64>, Vec<f64>, &str) = if variables.len() >= 2 {
            (
                units_a.iter().map(|u| u.0).collect(),
                units_b.iter().map(|u| u.0).collect(),
                "variable",
            )
        } else {
            let as_f = |u: &Vec<(f64, Vec<bool>)>| u[0].1.iter().map(|&b| f64::from(u8::from(b))).collect();
            (as_f(&units_a), as_f(&units_b), "narrative")
        };
        let threshold = bonferroni_alpha(a.alpha, a.comparisons);
        match paired_t_test::<f64>(&xa, &xb) {
            Ok(t) => {
                let significant = t.p_two_sided < threshold;
                if out.jsonl() {
                    out.record(&json!({
                        "kind": "paired_t",
                        "unit": unit,
                        "units": xa.len(),
                        "t": t.t,
                        "df": t.df,
                        "p": t.p_two_sided,
                        "alpha": a.alpha,
                        "comparisons": a.comparisons,
                        "threshold": threshold,
                        "significant": significant,
                    }))?;
                } else {
                    out.text(format!(
                        "paired t over {} {unit}s: t = {:.4}, df = {}, p = {:.4}; Bonferroni threshold {} / {} = {}: {}",
                        xa.len(),
                        t.t,
                        t.df,
                        t.p_two_sided,
                        a.alpha,
                        a.comparisons,
                        threshold,
                        if significant { "significant" } else { "not significant" }
                    ))?;
                }
            }
            Err(e) => {
                eprintln!("warning: paired test not computed: {e}");
                if out.jsonl() {
                    out.record(&json!({"kind": "paired_t", "error": e.to_string(), "threshold": threshold}))?;
                }
            }
        }
    }
    Ok(())
}
