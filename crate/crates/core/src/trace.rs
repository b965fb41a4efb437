//! Per-step experiment records and their CSV/JSON serialisation.
//!
//! Both formats carry a schema version. CSV files start with a `#` comment
//! line holding the version, seed and config hash; JSON files embed the full
//! metadata. Floats are written in shortest round-trip form, so export and
//! import are lossless and identical inputs give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub episode: u64,
    pub action_index: usize,
    pub r_i: f64,
    pub r_a: f64,
    pub r: f64,
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub graph_f1: Option<f64>,
    pub discovery_time_ms: Option<f64>,
    pub selected_count: Option<usize>,
}

impl TraceRecord {
    /// Rejects any non-finite value, naming the column.
    pub fn check_finite(&self) -> Result<()> {
        let fields = [
            ("r_i", Some(self.r_i)),
            ("r_a", Some(self.r_a)),
            ("r", Some(self.r)),
            ("train_loss", Some(self.train_loss)),
            ("holdout_loss", Some(self.holdout_loss)),
            ("graph_f1", self.graph_f1),
            ("discovery_time_ms", self.discovery_time_ms),
        ];
        for (name, value) in fields {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite {name} = {v} at step {}",
                        self.step
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form label, e.g. `causal` or `dense`.
    pub label: String,
    pub config: Option<ExperimentConfig>,
}

impl TraceMetadata {
    pub fn for_config(config: &ExperimentConfig, label: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: config.env.seed,
            config_hash: config.content_hash(),
            label: label.into(),
            config: Some(config.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTrace {
    pub metadata: TraceMetadata,
    pub records: Vec<TraceRecord>,
}

impl ExperimentTrace {
    pub fn new(metadata: TraceMetadata) -> Self {
        Self {
            metadata,
            records: Vec::new(),
        }
    }

    /// Appends a record; steps must strictly increase and values be finite.
    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        record.check_finite()?;
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::InvalidArgument(format!(
                    "trace step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.step).collect()
    }

    /// One numeric column by name; optional columns must be present on every row.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                let v = match name {
                    "step" => Some(r.step as f64),
                    "episode" => Some(r.episode as f64),
                    "action_index" => Some(r.action_index as f64),
                    "r_i" => Some(r.r_i),
                    "r_a" => Some(r.r_a),
                    "r" => Some(r.r),
                    "train_loss" => Some(r.train_loss),
                    "holdout_loss" => Some(r.holdout_loss),
                    "graph_f1" => r.graph_f1,
                    "discovery_time_ms" => r.discovery_time_ms,
                    "selected_count" => r.selected_count.map(|c| c as f64),
                    other => {
                        return Err(Error::InvalidArgument(format!("unknown metric `{other}`")))
                    }
                };
                v.ok_or_else(|| {
                    Error::InvalidArgument(format!("metric `{name}` missing at step {}", r.step))
                })
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut sink = CsvTraceWriter::create(path, &self.metadata)?;
        for r in &self.records {
            sink.write(r)?;
        }
        sink.finish()
    }

    pub fn to_json(&self) -> Result<String> {
        for r in &self.records {
            r.check_finite()?;
        }
        serde_json::to_string_pretty(&JsonTrace {
            schema_version: SCHEMA_VERSION,
            trace: self,
        })
        .map_err(|e| Error::InvalidArgument(format!("serialising trace: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let parsed: OwnedJsonTrace = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if parsed.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported schema version {}", parsed.schema_version),
            });
        }
        Ok(parsed.trace)
    }

    /// Reads a CSV written by [`CsvTraceWriter`]; the config itself is not stored there.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let first = text.lines().next().unwrap_or_default();
        let header = first
            .strip_prefix("# ")
            .ok_or_else(|| format_err("missing metadata comment line".into()))?;
        let mut version = None;
        let mut seed = None;
        let mut hash = String::new();
        let mut label = String::new();
        for part in header.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format_err(format!("bad metadata token `{part}`")))?;
            match k {
                "schema_version" => version = v.parse::<u32>().ok(),
                "seed" => seed = v.parse::<u64>().ok(),
                "config_hash" => hash = v.to_string(),
                "label" => label = v.to_string(),
                _ => {}
            }
        }
        if version != Some(SCHEMA_VERSION) {
            return Err(format_err(format!("unsupported schema version {version:?}")));
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut trace = ExperimentTrace::new(TraceMetadata {
            schema_version: SCHEMA_VERSION,
            seed: seed.ok_or_else(|| format_err("missing seed".into()))?,
            config_hash: hash,
            label,
            config: None,
        });
        for row in reader.deserialize::<TraceRecord>() {
            let record = row.map_err(|e| format_err(e.to_string()))?;
            trace.push(record)?;
        }
        Ok(trace)
    }
}

#[derive(Serialize)]
struct JsonTrace<'a> {
    schema_version: u32,
    #[serde(flatten)]
    trace: &'a ExperimentTrace,
}

#[derive(Deserialize)]
struct OwnedJsonTrace {
    schema_version: u32,
    #[serde(flatten)]
    trace: ExperimentTrace,
}

/// Incremental CSV sink: each record is flushed as soon as it is written so an
/// aborted run leaves a readable prefix on disk.
pub struct CsvTraceWriter {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvTraceWriter {
    pub fn create(path: &Path, metadata: &TraceMetadata) -> Result<Self> {
        let io_err = |e| Error::io(format!("writing {}", path.display()), e);
        let file = File::create(path).map_err(io_err)?;
        let mut buf = BufWriter::new(file);
        let label = if metadata.label.is_empty() {
            "-".to_string()
        } else {
            metadata.label.replace(char::is_whitespace, "_")
        };
        writeln!(
            buf,
            "# schema_version={} seed={} config_hash={} label={}",
            SCHEMA_VERSION, metadata.seed, metadata.config_hash, label
        )
        .map_err(io_err)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(buf),
        })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        record.check_finite()?;
        let path = self.path.display().to_string();
        self.writer
            .serialize(record)
            .map_err(|e| Error::io(format!("writing {path}"), std::io::Error::other(e)))?;
        self.writer
            .flush()
            .map_err(|e| Error::io(format!("writing {path}"), e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}
