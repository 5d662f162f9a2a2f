//! Run directory persistence.
//!
//! Layout: `config.json`, `manifest.json`, `state.json`, `iterations.jsonl`
//! (append-only), `codebook/v{version}.json`, `pending.json` while a batch
//! awaits feedback, `annotations.jsonl` after finalization, and `.lock`.
//!
//! Per iteration the write order is codebook, log line (fsync), manifest,
//! state, pending. Opening a run repairs what a crash between those steps can
//! leave behind: a partial last log line is cut, a manifest that lags the log
//! is rebuilt from the log tail, and log records newer than `state.json` are
//! replayed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::engine::{AnnotationRecord, IterationRecord, LoopState, PendingBatch, RunConfig, RunStatus};
use crate::util::sha256_hex;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "iterations.jsonl";
pub const PENDING_FILE: &str = "pending.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const LOCK_FILE: &str = ".lock";
pub const CODEBOOK_DIR: &str = "codebook";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("run directory {0} already exists and is not empty")]
    NotEmpty(PathBuf),
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("iteration {got} appended but the log expects {expected}")]
    Sequence { expected: i64, got: u32 },
    #[error("corrupt run: {file}: {reason}")]
    Corrupt { file: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(file: impl Into<String>, reason: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        file: file.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub config_digest: String,
    pub corpus_digest: String,
    pub status: RunStatus,
    /// -1 before the first completed iteration.
    pub latest_iteration: i64,
    pub latest_codebook_version: u32,
    /// SHA-256 of the log through `latest_iteration`.
    pub log_digest: String,
}

/// Writes `bytes` to `path` through a temp file and a rename. Files that can
/// be rebuilt from the log (manifest, state) skip the fsync.
fn write_atomic(path: &Path, bytes: &[u8], durable: bool) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    if durable {
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T, durable: bool) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes, durable)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn codebook_file(version: u32) -> String {
    format!("{CODEBOOK_DIR}/v{version}.json")
}

/// Parsed log lines plus the byte length of the intact prefix.
struct LogScan {
    records: Vec<IterationRecord>,
    line_ends: Vec<usize>,
    intact_len: usize,
}

fn scan_log(bytes: &[u8]) -> Result<LogScan, StoreError> {
    let mut records = Vec::new();
    let mut line_ends = Vec::new();
    let mut start = 0;
    while let Some(off) = bytes[start..].iter().position(|b| *b == b'\n') {
        let end = start + off + 1;
        match serde_json::from_slice::<IterationRecord>(&bytes[start..end - 1]) {
            Ok(r) => {
                records.push(r);
                line_ends.push(end);
            }
            // a torn final line is a crash artifact; anything earlier is damage
            Err(_) if end == bytes.len() => break,
            Err(e) => return Err(corrupt(LOG_FILE, format!("line {}: {e}", records.len() + 1))),
        }
        start = end;
    }
    let intact_len = line_ends.last().copied().unwrap_or(0);
    Ok(LogScan {
        records,
        line_ends,
        intact_len,
    })
}

/// Reads the complete log lines of a run without taking the writer lock.
pub fn read_records(dir: &Path) -> Result<Vec<IterationRecord>, StoreError> {
    let path = dir.join(LOG_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(scan_log(&bytes)?.records)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, StoreError> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// The run's configuration, read without taking the writer lock.
pub fn read_config(dir: &Path) -> Result<RunConfig, StoreError> {
    read_json(&dir.join(CONFIG_FILE))
}

pub fn read_codebook(dir: &Path, version: u32) -> Result<Codebook, StoreError> {
    let name = codebook_file(version);
    let path = dir.join(&name);
    if !path.exists() {
        return Err(corrupt(name, "codebook file is missing"));
    }
    read_json(&path)
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRecord>, StoreError> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| StoreError::Json {
                path: path.clone(),
                source,
            })
        })
        .collect()
}

/// What `RunStore::open` recovered.
#[derive(Debug)]
pub struct OpenedRun {
    pub config: RunConfig,
    pub state: LoopState,
    pub records: Vec<IterationRecord>,
}

/// Single-writer handle on a run directory.
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    log_hasher: Sha256,
    _lock: File,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore").field("dir", &self.dir).field("manifest", &self.manifest).finish()
    }
}

fn take_lock(dir: &Path) -> Result<File, StoreError> {
    let path = dir.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(io_err(&path))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked(dir.to_path_buf())),
        Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
    }
}

impl RunStore {
    /// Lays out a new run directory atomically (temp dir + rename).
    pub fn create(
        dir: &Path,
        run_id: &str,
        config: &RunConfig,
        corpus_digest: &str,
        created_at: &str,
    ) -> Result<Self, StoreError> {
        if dir.exists() {
            let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
            if entries.next().is_some() {
                return Err(StoreError::NotEmpty(dir.to_path_buf()));
            }
        }
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(io_err(&parent))?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
        let tmp = parent.join(format!(".{name}.creating-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(tmp.join(CODEBOOK_DIR)).map_err(io_err(&tmp))?;

        let mut config_bytes = serde_json::to_vec_pretty(config).map_err(|source| StoreError::Json {
            path: tmp.join(CONFIG_FILE),
            source,
        })?;
        config_bytes.push(b'\n');
        write_atomic(&tmp.join(CONFIG_FILE), &config_bytes, true)?;
        let manifest = RunManifest {
            run_id: run_id.to_string(),
            created_at: created_at.to_string(),
            config_digest: sha256_hex(&config_bytes),
            corpus_digest: corpus_digest.to_string(),
            status: RunStatus::Created,
            latest_iteration: -1,
            latest_codebook_version: 0,
            log_digest: sha256_hex(b""),
        };
        write_json(&tmp.join(MANIFEST_FILE), &manifest, true)?;
        write_atomic(&tmp.join(LOG_FILE), b"", true)?;
        if dir.exists() {
            fs::remove_dir(dir).map_err(io_err(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io_err(dir))?;
        let lock = take_lock(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            log_hasher: Sha256::new(),
            _lock: lock,
        })
    }

    /// Opens an existing run for writing, verifying digests and repairing
    /// crash leftovers.
    pub fn open(dir: &Path) -> Result<(Self, OpenedRun), StoreError> {
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(corrupt(MANIFEST_FILE, format!("not found in {}", dir.display())));
        }
        let lock = take_lock(dir)?;
        let mut manifest = read_manifest(dir)?;

        let config_path = dir.join(CONFIG_FILE);
        let config_bytes = fs::read(&config_path).map_err(io_err(&config_path))?;
        if sha256_hex(&config_bytes) != manifest.config_digest {
            return Err(corrupt(CONFIG_FILE, "digest does not match the manifest"));
        }
        let config: RunConfig = serde_json::from_slice(&config_bytes).map_err(|source| StoreError::Json {
            path: config_path,
            source,
        })?;

        let log_path = dir.join(LOG_FILE);
        let bytes = fs::read(&log_path).map_err(io_err(&log_path))?;
        let scan = scan_log(&bytes)?;
        if scan.intact_len < bytes.len() {
            let f = OpenOptions::new().write(true).open(&log_path).map_err(io_err(&log_path))?;
            f.set_len(scan.intact_len as u64).map_err(io_err(&log_path))?;
            f.sync_all().map_err(io_err(&log_path))?;
        }
        for (i, r) in scan.records.iter().enumerate() {
            if r.t as usize != i {
                return Err(corrupt(LOG_FILE, format!("line {} carries t = {}", i + 1, r.t)));
            }
        }
        let committed = (manifest.latest_iteration + 1) as usize;
        if scan.records.len() < committed {
            return Err(corrupt(
                LOG_FILE,
                format!("{} records but the manifest lists {committed}", scan.records.len()),
            ));
        }
        let prefix_len = if committed == 0 { 0 } else { scan.line_ends[committed - 1] };
        if sha256_hex(&bytes[..prefix_len]) != manifest.log_digest {
            return Err(corrupt(LOG_FILE, "digest does not match the manifest"));
        }
        let mut log_hasher = Sha256::new();
        log_hasher.update(&bytes[..scan.intact_len]);
        if scan.records.len() > committed {
            let last = scan.records.last().expect("non-empty tail");
            manifest.latest_iteration = last.t as i64;
            manifest.latest_codebook_version = last.codebook_version;
            manifest.status = last.status;
            manifest.log_digest = hex(&log_hasher);
            write_json(&dir.join(MANIFEST_FILE), &manifest, false)?;
        }

        let state_path = dir.join(STATE_FILE);
        if !state_path.exists() {
            return Err(corrupt(STATE_FILE, "state file is missing"));
        }
        let mut state: LoopState = read_json(&state_path)?;
        if state.t as usize > scan.records.len() {
            return Err(corrupt(
                STATE_FILE,
                format!("state is at t = {} but the log has {} records", state.t, scan.records.len()),
            ));
        }
        let replayed = (state.t as usize) < scan.records.len();
        for r in &scan.records[state.t as usize..] {
            state
                .apply(r)
                .map_err(|e| corrupt(LOG_FILE, format!("replay failed: {e}")))?;
        }
        state.pending = None;
        let pending_path = dir.join(PENDING_FILE);
        if pending_path.exists() {
            let pending: PendingBatch = read_json(&pending_path)?;
            if pending.t == state.t && !state.status.is_terminal() {
                state.pending = Some(pending);
            } else {
                fs::remove_file(&pending_path).map_err(io_err(&pending_path))?;
            }
        }
        if state.pending.is_none() && state.status == RunStatus::AwaitingFeedback {
            state.status = RunStatus::Running;
        }
        let store = Self {
            dir: dir.to_path_buf(),
            manifest,
            log_hasher,
            _lock: lock,
        };
        if replayed {
            store.write_state(&state)?;
        }
        Ok((
            store,
            OpenedRun {
                config,
                state,
                records: scan.records,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn write_codebook(&self, cb: &Codebook) -> Result<(), StoreError> {
        write_json(&self.dir.join(codebook_file(cb.version)), cb, true)
    }

    pub fn read_codebook(&self, version: u32) -> Result<Codebook, StoreError> {
        read_codebook(&self.dir, version)
    }

    /// Appends one log line (fsync'd), then updates the manifest.
    pub fn append_iteration(&mut self, record: &IterationRecord) -> Result<(), StoreError> {
        let expected = self.manifest.latest_iteration + 1;
        if record.t as i64 != expected {
            return Err(StoreError::Sequence {
                expected,
                got: record.t,
            });
        }
        let path = self.dir.join(LOG_FILE);
        let mut line = serde_json::to_vec(record).map_err(|source| StoreError::Json {
            path: path.clone(),
            source,
        })?;
        line.push(b'\n');
        let mut f = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&line).map_err(io_err(&path))?;
        f.sync_all().map_err(io_err(&path))?;
        self.log_hasher.update(&line);

        self.manifest.latest_iteration = record.t as i64;
        self.manifest.latest_codebook_version = record.codebook_version;
        self.manifest.status = record.status;
        self.manifest.log_digest = hex(&self.log_hasher);
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest, false)
    }

    pub fn set_status(&mut self, status: RunStatus) -> Result<(), StoreError> {
        if self.manifest.status != status {
            self.manifest.status = status;
            write_json(&self.dir.join(MANIFEST_FILE), &self.manifest, false)?;
        }
        Ok(())
    }

    pub fn write_state(&self, state: &LoopState) -> Result<(), StoreError> {
        write_json(&self.dir.join(STATE_FILE), state, false)
    }

    pub fn write_pending(&self, pending: Option<&PendingBatch>) -> Result<(), StoreError> {
        let path = self.dir.join(PENDING_FILE);
        match pending {
            Some(p) => write_json(&path, p, true),
            None if path.exists() => fs::remove_file(&path).map_err(io_err(&path)),
            None => Ok(()),
        }
    }

    pub fn write_annotations(&self, records: &[AnnotationRecord]) -> Result<(), StoreError> {
        let path = self.dir.join(ANNOTATIONS_FILE);
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r).map_err(|source| StoreError::Json {
                path: path.clone(),
                source,
            })?;
            out.push(b'\n');
        }
        write_atomic(&path, &out, true)
    }

    pub fn records(&self) -> Result<Vec<IterationRecord>, StoreError> {
        read_records(&self.dir)
    }
}

fn hex(hasher: &Sha256) -> String {
    hasher
        .clone()
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-iteration convergence table as CSV with a header row.
pub fn export_metrics_timeline(records: &[IterationRecord]) -> String {
    let classes: Vec<String> = records
        .iter()
        .find(|r| !r.metrics.class_f1.is_empty())
        .map(|r| r.metrics.class_f1.iter().map(|c| c.class.clone()).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["t", "acc_guide", "acc_val", "val_carried", "macro_f1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(classes.iter().map(|c| format!("f1_{c}")));
    header.extend(["guide_size", "codebook_version"].map(String::from));
    w.write_record(&header).expect("in-memory csv");
    for r in records {
        let m = &r.metrics;
        let mut row = vec![
            r.t.to_string(),
            m.acc_guide.to_string(),
            m.acc_val.to_string(),
            m.val_carried.to_string(),
            m.macro_f1.map(|x| x.to_string()).unwrap_or_default(),
        ];
        for c in &classes {
            row.push(
                m.class_f1
                    .iter()
                    .find(|s| &s.class == c)
                    .map(|s| s.f1.to_string())
                    .unwrap_or_default(),
            );
        }
        row.push(r.guide_size.to_string());
        row.push(r.codebook_version.to_string());
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}
