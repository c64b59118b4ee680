//! On-disk run store: `records.jsonl` (append-only) plus a terminal
//! `manifest.json`. A manifest is only written once every instance of the
//! dataset has a persisted record, so its presence marks a complete run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{BackendConfig, RunRecord};
use crate::prompting::PromptVariant;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    BadManifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub instances: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_chars: u64,
    pub output_chars: u64,
    pub wall_seconds: f64,
}

impl RunTotals {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut totals = RunTotals::default();
        for r in records {
            let resp = &r.response;
            totals.instances += 1;
            totals.input_tokens += resp.input_tokens;
            totals.output_tokens += resp.output_tokens;
            totals.input_chars += resp.input_chars;
            totals.output_chars += resp.output_chars;
            totals.wall_seconds += resp.latency;
        }
        totals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub backend: BackendConfig,
    pub variant: PromptVariant,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub run_index: u32,
    pub dataset_fingerprint: String,
    pub totals: RunTotals,
    pub created_at: String,
}

impl RunManifest {
    /// Stable identifier derived from what the run is, not when it ran.
    pub fn derive_id(
        fingerprint: &str,
        backend: &str,
        variant: PromptVariant,
        temperature: f64,
        seed: Option<u64>,
        run_index: u32,
    ) -> String {
        let mut h = Sha256::new();
        let key = format!(
            "{fingerprint}|{backend}|{variant}|{temperature}|{}|{run_index}",
            seed.map(|s| s.to_string()).unwrap_or_default()
        );
        h.update(key.as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    /// A short label for reports: `backend/variant/t0.2/run1`.
    pub fn annotator_label(&self) -> String {
        format!(
            "{}/{}/t{}/run{}",
            self.backend.name, self.variant, self.temperature, self.run_index
        )
    }
}

pub fn format_timestamp(at: DateTime<Utc>) -> String {
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Creation time for a manifest. `SOURCE_DATE_EPOCH` wins when set; runs from
/// deterministic transports otherwise get the Unix epoch so that repeated
/// runs stay byte-identical.
pub fn manifest_timestamp(deterministic: bool) -> String {
    if let Some(secs) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
    {
        if let Some(at) = DateTime::<Utc>::from_timestamp(secs, 0) {
            return format_timestamp(at);
        }
    }
    if deterministic {
        format_timestamp(DateTime::<Utc>::UNIX_EPOCH)
    } else {
        format_timestamp(Utc::now())
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    /// Opens an existing store without creating anything.
    pub fn existing(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(StoreError::Io {
                path: dir,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            });
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    fn io(&self, path: PathBuf) -> impl FnOnce(std::io::Error) -> StoreError {
        move |source| StoreError::Io { path, source }
    }

    /// Reads persisted records. A trailing partial line from an interrupted
    /// write is ignored.
    pub fn read_records(&self) -> Result<Vec<RunRecord>, StoreError> {
        let path = self.records_path();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(StoreError::Io { path, source }),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        complete
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| StoreError::Corrupt {
                    path: path.clone(),
                    line: i + 1,
                    source,
                })
            })
            .collect()
    }

    /// Drops any partial trailing line so appends start on a line boundary.
    fn repair_tail(&self) -> Result<(), StoreError> {
        let path = self.records_path();
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(());
        };
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
            fs::write(&path, &text[..keep]).map_err(self.io(path.clone()))?;
        }
        Ok(())
    }

    pub fn writer(&self) -> Result<RecordWriter, StoreError> {
        self.repair_tail()?;
        let path = self.records_path();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(self.io(path.clone()))?;
        Ok(RecordWriter {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn manifest(&self) -> Result<Option<RunManifest>, StoreError> {
        let path = self.manifest_path();
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|source| StoreError::BadManifest { path, source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StoreError::Io { path, source }),
        }
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.manifest_path();
        let tmp = self.dir.join(".manifest.json.tmp");
        let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        json.push('\n');
        {
            let mut f = File::create(&tmp).map_err(self.io(tmp.clone()))?;
            f.write_all(json.as_bytes()).map_err(self.io(tmp.clone()))?;
            f.sync_all().map_err(self.io(tmp.clone()))?;
        }
        fs::rename(&tmp, &path).map_err(self.io(path.clone()))
    }
}

pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn append(&mut self, record: &RunRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).expect("record serializes");
        let path = &self.path;
        let wrap = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        self.out.write_all(line.as_bytes()).map_err(wrap)?;
        self.out.write_all(b"\n").map_err(wrap)?;
        self.out.flush().map_err(wrap)
    }

    pub fn finish(mut self) -> Result<(), StoreError> {
        let path = self.path.clone();
        self.out.flush().map_err(|source| StoreError::Io { path: path.clone(), source })?;
        self.out
            .get_ref()
            .sync_all()
            .map_err(|source| StoreError::Io { path, source })
    }
}
