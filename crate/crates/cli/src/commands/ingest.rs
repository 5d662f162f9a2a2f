use std::fs::File;
use std::io::BufReader;

use codebook_forge::corpus::ingest_corpus;
use serde_json::json;

use crate::common::{usage, write_file, CliResult, Common, Output};

pub fn run(c: &Common) -> CliResult {
    let path = c.corpus_path()?;
    let file = File::open(path).map_err(|e| usage(format!("cannot open corpus {}: {e}", path.display())))?;
    let ingested = ingest_corpus(BufReader::new(file))?;
    let mut out = Output::new(c.format);
    for r in &ingested.rejects {
        if out.jsonl() {
            out.record(&json!({"kind": "reject", "line": r.line, "reason": r.reason}))?;
        } else {
            eprintln!("rejected line {}: {}", r.line, r.reason);
        }
    }
    if let Some(dest) = &c.out {
        write_file(dest, ingested.corpus.to_jsonl().as_bytes())?;
    }
    let summary = json!({
        "kind": "summary",
        "records": ingested.corpus.len(),
        "rejects": ingested.rejects.len(),
    });
    if out.jsonl() {
        out.record(&summary)?;
    } else {
        out.text(format!(
            "{} records, {} rejected lines",
            ingested.corpus.len(),
            ingested.rejects.len()
        ))?;
    }
    Ok(())
}
