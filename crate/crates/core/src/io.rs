//! File formats: binary PPM (P6) images, ASCII PGM (P2) heatmaps, and the
//! JSON-Lines corpus manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub group: String,
    pub label: usize,
    pub path: String,
    pub width: usize,
    pub height: usize,
}

/// Write a binary PPM (P6, maxval 255). `rgb` is row-major RGB8.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::DimensionMismatch(format!(
            "ppm buffer is {} bytes, expected {}",
            rgb.len(),
            width * height * 3
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", width, height)?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`]. Strict: P6, maxval 255.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 2];
    r.read_exact(&mut header)
        .map_err(|_| malformed("truncated magic"))?;
    if &header != b"P6" {
        return Err(malformed("not a P6 ppm"));
    }
    // Header tokens may be separated by arbitrary whitespace and comments.
    let mut tokens = Vec::with_capacity(3);
    let mut byte = [0u8; 1];
    let mut current = String::new();
    let mut in_comment = false;
    while tokens.len() < 3 {
        r.read_exact(&mut byte)
            .map_err(|_| malformed("truncated header"))?;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            _ => current.push(b as char),
        }
    }
    let width: usize = tokens[0].parse().map_err(|_| malformed("bad width"))?;
    let height: usize = tokens[1].parse().map_err(|_| malformed("bad height"))?;
    if tokens[2] != "255" {
        return Err(malformed("maxval must be 255"));
    }
    let mut rgb = vec![0u8; width * height * 3];
    r.read_exact(&mut rgb)
        .map_err(|_| malformed("truncated pixel data"))?;
    Ok((width, height, rgb))
}

/// Write an ASCII PGM (P2, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "pgm buffer is {} values, expected {}",
            gray.len(),
            width * height
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P2\n{} {}\n255\n", width, height)?;
    for row in gray.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: format!("line {}: {}", lineno + 1, e),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}
