//! On-disk formats: JSON-lines records, the binary feature file and `labels.csv`.
//!
//! Every JSON record carries `format_version`; readers reject other versions and
//! report the offending file and line.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::CueId;
use crate::FORMAT_VERSION;

pub const FEATURE_MAGIC: [u8; 4] = *b"TMFV";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn record(path: &Path, line: usize, message: impl Into<String>) -> Self {
        DataError::Record {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn invalid(path: &Path, message: impl Into<String>) -> Self {
        DataError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Records that carry a schema version.
pub trait Versioned {
    fn format_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),* $(,)?) => {
        $(impl Versioned for $t {
            fn format_version(&self) -> u32 {
                self.format_version
            }
        })*
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMetaRecord {
    pub format_version: u32,
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalRecord {
    pub format_version: u32,
    pub video_id: String,
    pub proposal_id: u32,
    pub frame: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Person detections (`detections.jsonl`) and object proposals (`objects.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredBoxRecord {
    pub format_version: u32,
    pub video_id: String,
    pub frame: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRecord {
    pub format_version: u32,
    pub video_id: String,
    pub frame: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    pub downsample: u32,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub format_version: u32,
    pub video_id: String,
    pub class_id: u32,
    pub instance: u32,
    pub frame: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRowRecord {
    pub format_version: u32,
    pub video_id: String,
    pub proposal_id: u32,
    pub row: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoListRecord {
    pub format_version: u32,
    pub video_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePoint {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameBox {
    pub frame: u32,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// One pseudo-annotation track; exactly one of `points` / `boxes` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueRecord {
    pub format_version: u32,
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
    pub cue: CueId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<FramePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<FrameBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedRecord {
    pub format_version: u32,
    pub video_id: String,
    pub overlaps: Vec<f64>,
}

versioned!(
    VideoMetaRecord,
    ProposalRecord,
    ScoredBoxRecord,
    MotionRecord,
    GtRecord,
    FeatureRowRecord,
    VideoListRecord,
    CueRecord,
    FusedRecord,
);

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|e| DataError::io(path, e))
}

fn create(path: &Path) -> Result<File, DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
        }
    }
    File::create(path).map_err(|e| DataError::io(path, e))
}

/// Read a JSON-lines file, skipping blank lines. Stops at the first bad record.
pub fn read_jsonl<T>(path: &Path) -> Result<Vec<T>, DataError>
where
    T: DeserializeOwned + Versioned,
{
    Ok(read_jsonl_numbered(path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

/// Like [`read_jsonl`], keeping the 1-based line number of each record.
pub fn read_jsonl_numbered<T>(path: &Path) -> Result<Vec<(usize, T)>, DataError>
where
    T: DeserializeOwned + Versioned,
{
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(trimmed)
            .map_err(|e| DataError::record(path, i + 1, e.to_string()))?;
        if record.format_version() != FORMAT_VERSION {
            return Err(DataError::record(
                path,
                i + 1,
                format!(
                    "unsupported format_version {} (expected {FORMAT_VERSION})",
                    record.format_version()
                ),
            ));
        }
        out.push((i + 1, record));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<(), DataError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = BufWriter::new(create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DataError::invalid(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::invalid(path, e.to_string()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| DataError::invalid(path, e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .map_err(|e| DataError::io(path, e))
}

/// Row-major `f32` feature table as stored in the binary feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureTable {
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Header `TMFV`, `u32` version, `u32` dim, `u64` rows, then little-endian `f32`s.
pub fn write_features(path: &Path, table: &FeatureTable) -> Result<(), DataError> {
    let mut w = BufWriter::new(create(path)?);
    let io_err = |e| DataError::io(path, e);
    w.write_all(&FEATURE_MAGIC).map_err(io_err)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(table.dim as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(table.rows() as u64).to_le_bytes())
        .map_err(io_err)?;
    for v in &table.data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_features(path: &Path) -> Result<FeatureTable, DataError> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| DataError::io(path, e))?;
    if bytes.len() < 20 || bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::invalid(path, "not a feature file (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(DataError::invalid(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let dim = u32_at(8) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if dim == 0 || body.len() != rows * dim * 4 {
        return Err(DataError::invalid(
            path,
            format!(
                "header declares {rows} rows of dimension {dim} but payload has {} bytes",
                body.len()
            ),
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DataError::invalid(path, "non-finite feature value"));
    }
    Ok(FeatureTable { dim, data })
}

/// Sidecar next to a feature file: `feats.bin` → `feats.rows.jsonl`.
pub fn feature_rows_path(features: &Path) -> PathBuf {
    features.with_extension("rows.jsonl")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One row of `labels.csv`: `video_id,split,class_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub video_id: String,
    pub split: Split,
    pub class_id: u32,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, DataError> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        // header is line 1
        let row: LabelRow = row.map_err(|e| DataError::record(path, i + 2, e.to_string()))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)
            .map_err(|e| DataError::invalid(path, e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}
