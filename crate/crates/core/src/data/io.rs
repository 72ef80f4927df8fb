//! Line-delimited JSON files. The first line of every non-empty file is a
//! header `{"format": ..., "version": ...}`; each further line is one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{DemoLibrary, Demonstration, IclSequence, Meta, QuerySample, SequenceDataset};
use crate::error::{Error, Result};

pub const LIBRARY_FORMAT: &str = "taco-library";
pub const QUERIES_FORMAT: &str = "taco-queries";
pub const DATASET_FORMAT: &str = "taco-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shot: Option<usize>,
    #[serde(default, skip_serializing_if = "Meta::is_empty")]
    meta: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    instruction: String,
    icd_ids: Vec<String>,
    query: QuerySample,
    ground_truth_r: Option<String>,
}

fn ingest<T: serde::de::DeserializeOwned>(line: &str, n: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Ingestion { line: n, msg: e.to_string() })
}

/// Non-blank lines with 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn check_header(line: &str, n: usize, format: &str) -> Result<Header> {
    let h: Header = ingest(line, n)?;
    if h.format != format {
        return Err(Error::Ingestion { line: n, msg: format!("expected format `{format}`, found `{}`", h.format) });
    }
    if h.version != FORMAT_VERSION {
        return Err(Error::Ingestion { line: n, msg: format!("unsupported version {}", h.version) });
    }
    Ok(h)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        w.write_all(l.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_library(path: impl AsRef<Path>) -> Result<DemoLibrary> {
    let lines = read_lines(path.as_ref())?;
    let Some(((hn, hl), rest)) = lines.split_first() else {
        return Err(Error::EmptyLibrary);
    };
    let header = check_header(hl, *hn, LIBRARY_FORMAT)?;
    if rest.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    let mut lib = DemoLibrary::new(Vec::new(), header.meta)?;
    for (n, l) in rest {
        let d: Demonstration = ingest(l, *n)?;
        lib.push(d).map_err(|e| Error::Ingestion { line: *n, msg: e.to_string() })?;
    }
    Ok(lib)
}

pub fn save_library(path: impl AsRef<Path>, lib: &DemoLibrary) -> Result<()> {
    let header = Header { format: LIBRARY_FORMAT.into(), version: FORMAT_VERSION, shot: None, meta: lib.meta.clone() };
    let mut lines = vec![serde_json::to_string(&header)?];
    for d in lib.demos() {
        lines.push(serde_json::to_string(d)?);
    }
    write_lines(path.as_ref(), lines)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QuerySample>> {
    let lines = read_lines(path.as_ref())?;
    let Some(((hn, hl), rest)) = lines.split_first() else {
        return Ok(Vec::new());
    };
    check_header(hl, *hn, QUERIES_FORMAT)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (n, l) in rest {
        let q: QuerySample = ingest(l, *n)?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::Ingestion { line: *n, msg: format!("duplicate id `{}`", q.id) });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn save_queries(path: impl AsRef<Path>, queries: &[QuerySample]) -> Result<()> {
    let header = Header { format: QUERIES_FORMAT.into(), version: FORMAT_VERSION, shot: None, meta: Meta::new() };
    let mut lines = vec![serde_json::to_string(&header)?];
    for q in queries {
        lines.push(serde_json::to_string(q)?);
    }
    write_lines(path.as_ref(), lines)
}

/// An empty dataset is written as an empty file.
pub fn save_dataset(path: impl AsRef<Path>, ds: &SequenceDataset) -> Result<()> {
    ds.validate()?;
    if ds.is_empty() {
        return write_lines(path.as_ref(), Vec::<String>::new());
    }
    let header = Header { format: DATASET_FORMAT.into(), version: FORMAT_VERSION, shot: Some(ds.shot), meta: Meta::new() };
    let mut lines = vec![serde_json::to_string(&header)?];
    for s in &ds.sequences {
        let mut query = s.query.clone();
        let gt = query.ground_truth_r.take();
        let rec = SequenceRecord { instruction: s.instruction.clone(), icd_ids: s.icd_ids.clone(), query, ground_truth_r: gt };
        lines.push(serde_json::to_string(&rec)?);
    }
    write_lines(path.as_ref(), lines)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let lines = read_lines(path.as_ref())?;
    let Some(((hn, hl), rest)) = lines.split_first() else {
        return Ok(SequenceDataset::default());
    };
    let header = check_header(hl, *hn, DATASET_FORMAT)?;
    let shot = header.shot.ok_or_else(|| Error::Ingestion { line: *hn, msg: "header lacks `shot`".into() })?;
    let mut sequences = Vec::new();
    for (n, l) in rest {
        let rec: SequenceRecord = ingest(l, *n)?;
        if rec.icd_ids.len() != shot {
            return Err(Error::Validation(format!(
                "line {n}: sequence has {} ICDs, dataset shot is {shot}",
                rec.icd_ids.len()
            )));
        }
        let mut query = rec.query;
        query.ground_truth_r = rec.ground_truth_r;
        sequences.push(IclSequence { instruction: rec.instruction, icd_ids: rec.icd_ids, query });
    }
    SequenceDataset::new(shot, sequences)
}
