//! File formats: CSV traces and POI registries, JSON-lines exports.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{LocationSample, Poi};
use crate::model::{PoiCategory, SimTime, UserId};

pub const TRACE_HEADER: [&str; 6] = ["user", "t", "x", "y", "accuracy", "poi"];
pub const POI_HEADER: [&str; 5] = ["id", "category", "x", "y", "radius"];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("record {record}: {reason}")]
    Field { record: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    user: UserId,
    t: SimTime,
    x: f64,
    y: f64,
    accuracy: f64,
    poi: String,
}

#[derive(Serialize, Deserialize)]
struct PoiRow {
    id: String,
    category: PoiCategory,
    x: f64,
    y: f64,
    radius: f64,
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), FormatError> {
    let found: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if found != expected {
        return Err(FormatError::Header {
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

pub fn write_traces<W: Write, I: IntoIterator<Item = LocationSample>>(out: W, samples: I) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for s in samples {
        w.serialize(TraceRow {
            user: s.user,
            t: s.t,
            x: s.x,
            y: s.y,
            accuracy: s.accuracy_m,
            poi: s.poi.as_deref().unwrap_or("").to_owned(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(input: R) -> Result<Vec<LocationSample>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &TRACE_HEADER)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: TraceRow = row?;
        out.push(LocationSample {
            user: row.user,
            t: row.t,
            x: row.x,
            y: row.y,
            accuracy_m: row.accuracy,
            poi: (!row.poi.is_empty()).then(|| Arc::from(row.poi)),
        });
    }
    Ok(out)
}

pub fn write_pois<W: Write>(out: W, pois: &[Poi]) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(POI_HEADER)?;
    for p in pois {
        w.serialize(PoiRow {
            id: p.id.clone(),
            category: p.category,
            x: p.x,
            y: p.y,
            radius: p.radius_m,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pois<R: Read>(input: R) -> Result<Vec<Poi>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &POI_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let row: PoiRow = row?;
        if !(row.radius.is_finite() && row.radius > 0.0) {
            return Err(FormatError::Field {
                record: i,
                reason: "radius must be positive".into(),
            });
        }
        out.push(Poi {
            id: row.id,
            category: row.category,
            x: row.x,
            y: row.y,
            radius_m: row.radius,
        });
    }
    Ok(out)
}

/// One JSON document per line.
pub fn to_jsonl<'a, T: Serialize + 'a, I: IntoIterator<Item = &'a T>>(items: I) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Parses JSON lines, skipping blank ones.
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| FormatError::Json { line: i + 1, source }))
        .collect()
}
