//! CSV files for aggregate readings and reported counts.
//!
//! Readings: `transformer_id,day,time_index,time_hours,value_kva`, one row per
//! observation, days and time indices starting at 1. Reported counts:
//! `transformer_id,class,reported`, classes starting at 1. Lines starting with
//! `#` are comments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::counts::CountVector;
use crate::error::{Error, Result};
use crate::model::TransformerData;

pub const DATA_HEADER: [&str; 5] = ["transformer_id", "day", "time_index", "time_hours", "value_kva"];
pub const REPORTED_HEADER: [&str; 3] = ["transformer_id", "class", "reported"];

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub(crate) fn open_writer(path: &Path, comment: Option<&str>) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    if let Some(text) = comment {
        for line in text.lines() {
            writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

/// Writes readings and reported counts; `comment` lines go at the top of both files.
pub fn save_data(
    data: &[TransformerData],
    data_path: &Path,
    reported_path: &Path,
    comment: Option<&str>,
) -> Result<()> {
    let mut w = open_writer(data_path, comment)?;
    w.write_record(DATA_HEADER).map_err(|e| csv_err(data_path, e))?;
    for t in data {
        for d in 0..t.days() {
            for (j, &time) in t.times.iter().enumerate() {
                w.write_record([
                    t.transformer_id.to_string(),
                    (d + 1).to_string(),
                    (j + 1).to_string(),
                    time.to_string(),
                    t.y[(j, d)].to_string(),
                ])
                .map_err(|e| csv_err(data_path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(data_path, e))?;
    save_reported(data, reported_path, comment)
}

pub fn save_reported(data: &[TransformerData], path: &Path, comment: Option<&str>) -> Result<()> {
    let mut w = open_writer(path, comment)?;
    w.write_record(REPORTED_HEADER).map_err(|e| csv_err(path, e))?;
    for t in data {
        for (c, r) in t.reported.as_slice().iter().enumerate() {
            w.write_record([t.transformer_id.to_string(), (c + 1).to_string(), r.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn reader(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let line = rdr.position().line();
    if headers.is_empty() {
        return Err(parse_err(path, line, "empty file: no transformers"));
    }
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(
            path,
            line.max(1),
            format!("expected header `{}`", expected.join(",")),
        ));
    }
    Ok(rdr)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, path: &Path) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec
        .get(idx)
        .ok_or_else(|| parse_err(path, line, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| parse_err(path, line, format!("bad value `{raw}` for `{name}`")))
}

/// Reported counts keyed by transformer id.
pub fn load_reported(path: &Path) -> Result<BTreeMap<u32, CountVector>> {
    let mut rdr = reader(path, &REPORTED_HEADER)?;
    let mut raw: BTreeMap<u32, BTreeMap<usize, u32>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u32 = field(&rec, 0, "transformer_id", path)?;
        let class: usize = field(&rec, 1, "class", path)?;
        let count: u32 = field(&rec, 2, "reported", path)?;
        if class == 0 {
            return Err(parse_err(path, line, "classes are numbered from 1"));
        }
        if raw.entry(id).or_default().insert(class, count).is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate class {class} for transformer {id}"),
            ));
        }
    }
    if raw.is_empty() {
        return Err(parse_err(path, 1, "no transformers"));
    }
    let mut out = BTreeMap::new();
    for (id, classes) in raw {
        let c = classes.len();
        if classes.keys().copied().ne(1..=c) {
            return Err(parse_err(
                path,
                0,
                format!("transformer {id}: classes must run 1..{c} without gaps"),
            ));
        }
        out.insert(id, CountVector(classes.into_values().collect()));
    }
    Ok(out)
}

struct Reading {
    line: u64,
    time: f64,
    value: f64,
}

/// Loads readings and attaches the matching reported counts.
pub fn load_data(data_path: &Path, reported_path: &Path) -> Result<Vec<TransformerData>> {
    let mut rdr = reader(data_path, &DATA_HEADER)?;
    let mut raw: BTreeMap<u32, BTreeMap<(usize, usize), Reading>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(data_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: u32 = field(&rec, 0, "transformer_id", data_path)?;
        let day: usize = field(&rec, 1, "day", data_path)?;
        let j: usize = field(&rec, 2, "time_index", data_path)?;
        let time: f64 = field(&rec, 3, "time_hours", data_path)?;
        let value: f64 = field(&rec, 4, "value_kva", data_path)?;
        if day == 0 || j == 0 {
            return Err(parse_err(data_path, line, "days and time indices start at 1"));
        }
        if !value.is_finite() || !time.is_finite() {
            return Err(parse_err(data_path, line, "non-finite value"));
        }
        let prev = raw
            .entry(id)
            .or_default()
            .insert((day, j), Reading { line, time, value });
        if prev.is_some() {
            return Err(parse_err(
                data_path,
                line,
                format!("duplicate reading for transformer {id}, day {day}, time index {j}"),
            ));
        }
    }
    if raw.is_empty() {
        return Err(parse_err(data_path, 1, "no transformers"));
    }
    let reported = load_reported(reported_path)?;

    let mut grid: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(raw.len());
    for (id, readings) in raw {
        let days = readings.keys().map(|k| k.0).max().unwrap_or(0);
        let n = readings.keys().map(|k| k.1).max().unwrap_or(0);
        let mut y = DMatrix::zeros(n, days);
        let mut times = vec![f64::NAN; n];
        for d in 1..=days {
            for j in 1..=n {
                let r = readings.get(&(d, j)).ok_or_else(|| {
                    parse_err(
                        data_path,
                        0,
                        format!("transformer {id}: day {d} lacks time index {j}"),
                    )
                })?;
                if times[j - 1].is_nan() {
                    times[j - 1] = r.time;
                } else if times[j - 1] != r.time {
                    return Err(parse_err(
                        data_path,
                        r.line,
                        format!(
                            "transformer {id}: time index {j} is {} on day {d} but {} earlier",
                            r.time,
                            times[j - 1]
                        ),
                    ));
                }
                y[(j - 1, d - 1)] = r.value;
            }
        }
        match &grid {
            None => grid = Some(times.clone()),
            Some(g) if *g != times => {
                return Err(parse_err(
                    data_path,
                    readings.values().next().map_or(0, |r| r.line),
                    format!("transformer {id} uses a different time grid"),
                ))
            }
            _ => {}
        }
        let rep = reported.get(&id).cloned().ok_or_else(|| {
            parse_err(reported_path, 0, format!("no reported counts for transformer {id}"))
        })?;
        out.push(TransformerData::new(id, y, times, rep)?);
    }
    crate::model::check_consistent(&out)?;
    Ok(out)
}
