//! Newline-delimited JSON files: one object per line, appended atomically.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum NdjsonError {
    #[error("storage full")]
    StorageFull,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

fn classify(e: io::Error) -> NdjsonError {
    if e.kind() == io::ErrorKind::StorageFull || e.raw_os_error() == Some(libc::ENOSPC) {
        NdjsonError::StorageFull
    } else {
        NdjsonError::Io(e)
    }
}

pub fn open_append(path: &Path) -> Result<File, NdjsonError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Writes `value` as one line and syncs it to disk before returning.
pub fn append<T: Serialize>(file: &mut File, value: &T) -> Result<(), NdjsonError> {
    let mut line = serde_json::to_vec(value).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line).map_err(classify)?;
    file.sync_data().map_err(classify)?;
    Ok(())
}

/// Reads every line of `path`. A missing file reads as empty. A final line
/// without its newline is the remnant of an interrupted append and is
/// dropped if it does not parse; any other unparsable line is corruption.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, NdjsonError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let trimmed = buf.trim();
        if trimmed.is_empty() {
            continue;
        }
        match serde_json::from_str(trimmed) {
            Ok(v) => out.push(v),
            Err(_) if !complete => break,
            Err(e) => return Err(NdjsonError::Corrupt { line: line_no, message: e.to_string() }),
        }
    }
    Ok(out)
}

/// Makes the file end on a line boundary so subsequent appends start clean:
/// an interrupted final line is terminated if it parses, truncated if not.
pub fn repair_tail(path: &Path) -> Result<(), NdjsonError> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let mut file = OpenOptions::new().write(true).open(path)?;
    if serde_json::from_slice::<serde_json::Value>(&bytes[keep..]).is_ok() {
        file = OpenOptions::new().append(true).open(path)?;
        file.write_all(b"\n")?;
    } else {
        file.set_len(keep as u64)?;
    }
    file.sync_data()?;
    Ok(())
}
