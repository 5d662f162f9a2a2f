use codebook_forge::synth::{generate_corpus, SyntheticCorpusSpec};
use serde_json::json;

use crate::common::{usage, write_file, CliResult, Common, Output};
use crate::{SynthArgs, SynthKind};

pub fn run(c: &Common, a: &SynthArgs) -> CliResult {
    let out_path = c.out_path()?;
    let spec = match a.kind {
        SynthKind::Legal => SyntheticCorpusSpec::legal_case_study(a.size, c.seed),
        SynthKind::Binary => SyntheticCorpusSpec::binary(&a.name, a.size, a.positive_share, c.seed),
    };
    let world = generate_corpus(&spec).map_err(|e| usage(e.to_string()))?;
    write_file(out_path, world.corpus.to_jsonl().as_bytes())?;
    if let Some(p) = &a.cot_out {
        write_file(p, serde_json::to_string_pretty(&world.cot_cache())?.as_bytes())?;
    }
    if let Some(p) = &a.spec_out {
        write_file(p, serde_json::to_string_pretty(&world.spec.variable)?.as_bytes())?;
    }
    let counts: Vec<(String, usize)> = world
        .spec
        .variable
        .response_options
        .iter()
        .cloned()
        .zip(world.spec.class_counts())
        .collect();
    let mut out = Output::new(c.format);
    if out.jsonl() {
        out.record(&json!({
            "kind": "summary",
            "variable": world.spec.variable.name,
            "size": world.corpus.len(),
            "class_counts": counts.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
        }))?;
    } else {
        let mix: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        out.text(format!(
            "{} narratives for {} ({})",
            world.corpus.len(),
            world.spec.variable.name,
            mix.join(", ")
        ))?;
    }
    Ok(())
}
