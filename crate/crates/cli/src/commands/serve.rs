use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use codebook_forge::corpus::Corpus;
use codebook_forge_service::{serve, AppState, AutoWorldFactory};
use serde_json::json;

use crate::common::{usage, CliError, CliResult, Common, Output};
use crate::ServeArgs;

pub fn run(c: &Common, a: &ServeArgs) -> CliResult {
    if !a.run_dir.is_dir() {
        return Err(usage(format!("--run-dir {} does not exist", a.run_dir.display())));
    }
    let corpus = Arc::new(c.load_corpus()?);
    serve_dir(c, &a.run_dir, &a.bind, a.port, corpus)
}

/// Serves every run under `run_dir` until interrupted.
pub fn serve_dir(c: &Common, run_dir: &Path, bind: &str, port: u16, corpus: Arc<Corpus>) -> CliResult {
    let listener = std::net::TcpListener::bind((bind, port))
        .map_err(|e| CliError::Failed(anyhow::anyhow!("cannot listen on {bind}:{port}: {e}")))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let state = AppState::new(corpus, Arc::new(AutoWorldFactory), Some(run_dir.to_path_buf()));
    for (dir, err) in state.load_runs() {
        eprintln!("warning: skipping {}: {err}", dir.display());
    }
    let url = format!("http://{addr}");
    let mut out = Output::new(c.format);
    if out.jsonl() {
        out.record(&json!({"kind": "listening", "url": url, "runs": state.run_ids()}))?;
    } else {
        eprintln!("listening on {url} ({} runs loaded)", state.run_ids().len());
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        serve(listener, state, shutdown_signal()).await
    })?;
    eprintln!("stopped");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
}
