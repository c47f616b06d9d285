//! Framing shared by the versioned JSON-lines files: a header line followed
//! by one record per line, with byte offsets reported on failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::corpus::{CorpusError, FORMAT_VERSION};

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(line_start: usize, e: serde_json::Error) -> CorpusError {
    CorpusError::Parse {
        offset: line_start + e.column().saturating_sub(1),
        message: e.to_string(),
    }
}

/// Non-empty lines with the byte offset of their first byte.
fn split_lines(bytes: &[u8]) -> Vec<(usize, &[u8])> {
    let mut lines = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| start + p);
        if end > start {
            lines.push((start, &bytes[start..end]));
        }
        start = end + 1;
    }
    lines
}

/// Parses a JSON value whose `format_version` must be current.
pub(crate) fn parse_versioned<T: DeserializeOwned>(
    bytes: &[u8],
    offset: usize,
) -> Result<T, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| parse_err(offset, e))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(CorpusError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
        offset,
        reason: e.to_string(),
    })
}

pub(crate) fn write_file<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: impl Iterator<Item = R>,
) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = |bytes: Vec<u8>| -> std::io::Result<()> {
        w.write_all(&bytes)?;
        w.write_all(b"\n")
    };
    line(serde_json::to_vec(header).expect("header serializes")).map_err(io_err(path))?;
    for r in records {
        line(serde_json::to_vec(&r).expect("record serializes")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a header and exactly `count(header)` records. `check` validates
/// each record against the header; its error text is reported as a
/// malformed record at that line's offset.
pub(crate) fn read_file<H, R, T>(
    path: &Path,
    count: impl Fn(&H) -> usize,
    mut check: impl FnMut(&H, R) -> Result<T, String>,
) -> Result<(H, Vec<T>), CorpusError>
where
    H: DeserializeOwned,
    R: DeserializeOwned,
{
    let bytes = fs::read(path).map_err(io_err(path))?;
    let lines = split_lines(&bytes);
    let Some(&(h_start, h_bytes)) = lines.first() else {
        return Err(CorpusError::Truncated {
            offset: 0,
            expected: 1,
            found: 0,
        });
    };
    let header: H = parse_versioned(h_bytes, h_start)?;
    let expected = count(&header);
    let mut records = Vec::with_capacity(expected);
    for &(start, line) in &lines[1..] {
        if records.len() == expected {
            return Err(CorpusError::Malformed {
                offset: start,
                reason: format!("more records than the {expected} declared"),
            });
        }
        let raw: R = serde_json::from_slice(line).map_err(|e| parse_err(start, e))?;
        let rec = check(&header, raw).map_err(|reason| CorpusError::Malformed {
            offset: start,
            reason,
        })?;
        records.push(rec);
    }
    if records.len() < expected {
        return Err(CorpusError::Truncated {
            offset: bytes.len(),
            expected,
            found: records.len(),
        });
    }
    Ok((header, records))
}
