//! Small file helpers shared by the dataset, checkpoint, and report writers.

use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temp file, fsyncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Errors raised while reading or writing record-per-line files.
#[derive(Debug, thiserror::Error)]
pub enum RecordFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FileHeader {
    pub schema: String,
    pub version: u32,
    pub count: usize,
}

/// Serializes `records` as one JSON document per line after a header line.
pub fn encode_records<T: serde::Serialize>(
    schema: &str,
    version: u32,
    records: &[T],
) -> Result<Vec<u8>, RecordFileError> {
    let header = FileHeader {
        schema: schema.to_string(),
        version,
        count: records.len(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| RecordFileError::Header(e.to_string()))?;
    out.push(b'\n');
    for (i, r) in records.iter().enumerate() {
        serde_json::to_writer(&mut out, r).map_err(|e| RecordFileError::Parse {
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_records<T: serde::Serialize>(
    path: &Path,
    schema: &str,
    version: u32,
    records: &[T],
) -> Result<(), RecordFileError> {
    write_atomic(path, &encode_records(schema, version, records)?)?;
    Ok(())
}

/// Parses a record-per-line file. Record indices in errors are 1-based and
/// count data records (the header is record 0).
pub fn decode_records<T: serde::de::DeserializeOwned>(
    text: &str,
    schema: &str,
    max_version: u32,
) -> Result<Vec<T>, RecordFileError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| RecordFileError::Header("empty file".into()))?;
    let header: FileHeader =
        serde_json::from_str(header_line).map_err(|e| RecordFileError::Header(e.to_string()))?;
    if header.schema != schema {
        return Err(RecordFileError::Header(format!(
            "expected schema `{schema}`, found `{}`",
            header.schema
        )));
    }
    if header.version == 0 || header.version > max_version {
        return Err(RecordFileError::Header(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| RecordFileError::Parse {
            record: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(RecordFileError::Parse {
            record: records.len() + 1,
            message: format!(
                "file truncated: header declares {} records, found {}",
                header.count,
                records.len()
            ),
        });
    }
    Ok(records)
}

pub fn read_records<T: serde::de::DeserializeOwned>(
    path: &Path,
    schema: &str,
    max_version: u32,
) -> Result<Vec<T>, RecordFileError> {
    decode_records(&std::fs::read_to_string(path)?, schema, max_version)
}
