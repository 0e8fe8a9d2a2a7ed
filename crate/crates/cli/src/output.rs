use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::Format;

/// `--format` when given, else the output extension, else `fallback`.
pub fn resolve(flag: Option<Format>, out: Option<&Path>, fallback: Format) -> Format {
    flag.or_else(|| {
        out.and_then(|p| p.extension()).and_then(|e| match e.to_str()? {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        })
    })
    .unwrap_or(fallback)
}

fn is_stdout(path: Option<&Path>) -> bool {
    path.is_none_or(|p| p.as_os_str() == "-")
}

/// Buffered writer for a file, or stdout for `-`/absent.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if !is_stdout(Some(p)) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

/// Runs `write` against the sink and flushes it.
pub fn emit<F>(path: Option<&Path>, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut w = sink(path)?;
    write(&mut w)?;
    w.flush().with_context(|| format!("writing {}", describe(path)))?;
    Ok(())
}

pub fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    emit(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn describe(path: Option<&Path>) -> String {
    match path {
        Some(p) if !is_stdout(Some(p)) => p.display().to_string(),
        _ => "stdout".to_string(),
    }
}

pub fn out_path(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}
