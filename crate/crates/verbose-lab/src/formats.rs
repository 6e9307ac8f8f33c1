//! On-disk formats: pixel-sample files, model checkpoints, dataset
//! manifests, JSONL streams, and CSV tables.
//!
//! Both binary formats are little-endian and self-describing, and every
//! writer is deterministic: the same inputs produce the same bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use verbose_core::numerics::Matrix;
use verbose_core::victim::{Color, PixelSample, SampleKind, Shape, VictimConfig, VictimModel};

const SAMPLE_MAGIC: &[u8; 4] = b"VSMP";
const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic or version in {0}")]
    BadHeader(PathBuf),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Victim(#[from] verbose_core::victim::VictimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Pixel samples
// ---------------------------------------------------------------------------

/// Write a sample as `VSMP | version | kind | frames | h | w | f64 pixels`.
pub fn write_sample(path: &Path, sample: &PixelSample) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(SAMPLE_MAGIC).map_err(io_err(path))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err(path))?;
    let kind: u8 = match sample.kind() {
        SampleKind::Image => 0,
        SampleKind::Video => 1,
    };
    w.write_all(&[kind]).map_err(io_err(path))?;
    for v in [
        sample.num_frames() as u32,
        sample.height() as u32,
        sample.width() as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    for frame in sample.frames() {
        for &p in frame {
            w.write_all(&p.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_sample(path: &Path) -> Result<PixelSample, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(io_err(path))?;
    if &magic != SAMPLE_MAGIC || u32::from_le_bytes(version) != FORMAT_VERSION {
        return Err(FormatError::BadHeader(path.to_path_buf()));
    }
    let mut kind_byte = [0u8; 1];
    r.read_exact(&mut kind_byte).map_err(io_err(path))?;
    let kind = match kind_byte[0] {
        0 => SampleKind::Image,
        1 => SampleKind::Video,
        other => {
            return Err(FormatError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("unknown sample kind {other}"),
            })
        }
    };
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, FormatError> {
        r.read_exact(&mut u32buf).map_err(io_err(path))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let frames = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let per_frame = height * width * 3;
    let mut data = Vec::with_capacity(frames);
    let mut f64buf = [0u8; 8];
    for _ in 0..frames {
        let mut frame = Vec::with_capacity(per_frame);
        for _ in 0..per_frame {
            r.read_exact(&mut f64buf).map_err(io_err(path))?;
            frame.push(f64::from_le_bytes(f64buf));
        }
        data.push(frame);
    }
    PixelSample::new(kind, height, width, data).map_err(FormatError::from)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// JSON header embedded in a checkpoint.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: VictimConfig,
    /// Seed provenance string recorded by the trainer (free-form).
    provenance: String,
    tensors: Vec<TensorMeta>,
}

/// Single-file checkpoint: `VCKP | version | header_len | header JSON |
/// f64 tensor data` in header order.
pub fn write_checkpoint(
    path: &Path,
    model: &VictimModel,
    provenance: &str,
) -> Result<(), FormatError> {
    let tensors = model.export_parameters();
    let header = CheckpointHeader {
        config: model.config().clone(),
        provenance: provenance.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorMeta {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err(path))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err(path))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&header_json).map_err(io_err(path))?;
    for (_, m) in tensors {
        for &v in m.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(VictimModel, String), FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(io_err(path))?;
    if &magic != CHECKPOINT_MAGIC || u32::from_le_bytes(version) != FORMAT_VERSION {
        return Err(FormatError::BadHeader(path.to_path_buf()));
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf).map_err(io_err(path))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    r.read_exact(&mut header_json).map_err(io_err(path))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|source| FormatError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut f64buf = [0u8; 8];
    for meta in &header.tensors {
        let mut data = Vec::with_capacity(meta.rows * meta.cols);
        for _ in 0..meta.rows * meta.cols {
            r.read_exact(&mut f64buf).map_err(io_err(path))?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let m = Matrix::from_vec(meta.rows, meta.cols, data).map_err(|e| FormatError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        tensors.push((meta.name.clone(), m));
    }
    let model = VictimModel::from_parameters(header.config, tensors)?;
    Ok((model, header.provenance))
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

/// One dataset entry in `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    /// Sample file path relative to the dataset directory.
    pub file: String,
    pub kind: SampleKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub caption: String,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub color: Color,
    pub shape: Shape,
}

/// Load a dataset directory: the manifest plus every referenced sample.
pub fn read_dataset(dir: &Path) -> Result<Vec<(ManifestEntry, PixelSample)>, FormatError> {
    let manifest: Vec<ManifestEntry> = read_jsonl(&dir.join("manifest.jsonl"))?;
    manifest
        .into_iter()
        .map(|entry| {
            let sample = read_sample(&dir.join(&entry.file))?;
            Ok((entry, sample))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL and CSV
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|source| FormatError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| FormatError::Json {
                path: path.to_path_buf(),
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Minimal CSV writer; fields are written verbatim (callers only emit
/// numbers and bare words).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Format an optional metric for CSV ("" when absent).
pub fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}
