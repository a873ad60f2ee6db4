//! Text formats: frame matrices, feature dumps, scene sidecars, JSON
//! reports, line-delimited training logs and comparison tables.
//!
//! Every float is written with 17 significant digits so files round-trip
//! exactly and diff cleanly.

use std::io;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::etf::EtfFrame;
use crate::harness::{ArmSummary, ComparisonTable, EvalRecord, TrainLog};
use crate::metrics::FeatureBatch;
use crate::toy::SceneConfig;

/// `x` with 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::parse(line, format!("not a number: {tok:?}")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(line, format!("not a nonnegative integer: {tok:?}")))
}

/// Nonblank lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    what: &str,
) -> Result<(usize, Vec<&'a str>)> {
    let (no, l) = lines
        .next()
        .ok_or_else(|| Error::parse(1, format!("empty file, expected a {what} header")))?;
    Ok((no, l.split_whitespace().collect()))
}

// ---- frames ----

/// Header `d K alpha`, then `d` rows of `K` values.
pub fn format_frame(frame: &EtfFrame) -> String {
    let m = frame.matrix();
    let mut out = format!("{} {} {}\n", m.nrows(), m.ncols(), fmt_f64(frame.alpha()));
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Reads a frame file. The matrix is not checked for ETF structure.
pub fn parse_frame(text: &str) -> Result<EtfFrame> {
    let mut lines = numbered_lines(text);
    let (hno, h) = header(&mut lines, "`d K alpha`")?;
    if h.len() != 3 {
        return Err(Error::parse(hno, "header must be `d K alpha`"));
    }
    let d = parse_usize(h[0], hno)?;
    let k = parse_usize(h[1], hno)?;
    let alpha = parse_f64(h[2], hno)?;
    if d == 0 || k == 0 {
        return Err(Error::parse(hno, "d and K must be positive"));
    }
    let mut data = Vec::with_capacity(d * k);
    let mut last = hno;
    for r in 0..d {
        let (no, l) = lines.next().ok_or_else(|| {
            Error::parse(last + 1, format!("file ends after {r} of {d} rows"))
        })?;
        last = no;
        let row: Vec<&str> = l.split_whitespace().collect();
        if row.len() != k {
            return Err(Error::parse(no, format!("expected {k} values, found {}", row.len())));
        }
        for t in row {
            data.push(parse_f64(t, no)?);
        }
    }
    if let Some((no, _)) = lines.next() {
        return Err(Error::parse(no, format!("unexpected data after {d} rows")));
    }
    Ok(EtfFrame::from_parts(DMatrix::from_row_slice(d, k, &data), alpha))
}

// ---- feature dumps ----

/// Header `N d K`, then `N` rows of `label f_1 .. f_d` with 1-based labels.
pub fn format_dump(batch: &FeatureBatch) -> String {
    let z = batch.features();
    let mut out = format!("{} {} {}\n", z.nrows(), z.ncols(), batch.classes());
    for (row, &label) in z.row_iter().zip(batch.labels()) {
        out.push_str(&(label + 1).to_string());
        for &x in row.iter() {
            out.push(' ');
            out.push_str(&fmt_f64(x));
        }
        out.push('\n');
    }
    out
}

pub fn parse_dump(text: &str) -> Result<FeatureBatch> {
    let mut lines = numbered_lines(text);
    let (hno, h) = header(&mut lines, "`N d K`")?;
    if h.len() != 3 {
        return Err(Error::parse(hno, "header must be `N d K`"));
    }
    let n = parse_usize(h[0], hno)?;
    let d = parse_usize(h[1], hno)?;
    let k = parse_usize(h[2], hno)?;
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::parse(hno, "N, d and K must be positive"));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut last = hno;
    for r in 0..n {
        let (no, l) = lines.next().ok_or_else(|| {
            Error::parse(last + 1, format!("file ends after {r} of {n} rows"))
        })?;
        last = no;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != d + 1 {
            return Err(Error::parse(
                no,
                format!("expected a label and {d} values, found {} fields", toks.len()),
            ));
        }
        let label = parse_usize(toks[0], no)?;
        if label == 0 || label > k {
            return Err(Error::parse(no, format!("label {label} outside 1..={k}")));
        }
        labels.push(label - 1);
        for t in &toks[1..] {
            data.push(parse_f64(t, no)?);
        }
    }
    if let Some((no, _)) = lines.next() {
        return Err(Error::parse(no, format!("unexpected data after {n} rows")));
    }
    FeatureBatch::new(DMatrix::from_row_slice(n, d, &data), labels, k)
}

// ---- scene sidecar ----

pub fn format_scene_config(cfg: &SceneConfig) -> String {
    format!(
        "height = {}\nwidth = {}\nclasses = {}\nbeta = {}\ninput_dim = {}\nblob_count = {}\n\
         noise_sigma = {}\nsmooth_radius = {}\nseed = {}\nproto_seed = {}\n",
        cfg.height,
        cfg.width,
        cfg.classes,
        fmt_f64(cfg.beta),
        cfg.input_dim,
        cfg.blob_count,
        fmt_f64(cfg.noise_sigma),
        cfg.smooth_radius,
        cfg.seed,
        cfg.proto_seed,
    )
}

/// Reads a `key = value` block. Every key must be present exactly once.
pub fn parse_scene_config(text: &str) -> Result<SceneConfig> {
    const KEYS: [&str; 10] = [
        "height",
        "width",
        "classes",
        "beta",
        "input_dim",
        "blob_count",
        "noise_sigma",
        "smooth_radius",
        "seed",
        "proto_seed",
    ];
    let mut vals: [Option<(usize, &str)>; 10] = [None; 10];
    for (no, l) in numbered_lines(text) {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::parse(no, "expected `key = value`"))?;
        let k = k.trim();
        let slot = KEYS
            .iter()
            .position(|&key| key == k)
            .ok_or_else(|| Error::parse(no, format!("unknown key {k:?}")))?;
        if vals[slot].is_some() {
            return Err(Error::parse(no, format!("duplicate key {k:?}")));
        }
        vals[slot] = Some((no, v.trim()));
    }
    let end = text.lines().count() + 1;
    let get = |i: usize| vals[i].ok_or_else(|| Error::parse(end, format!("missing key {:?}", KEYS[i])));
    let uint = |i: usize| get(i).and_then(|(no, v)| parse_usize(v, no));
    let float = |i: usize| get(i).and_then(|(no, v)| parse_f64(v, no));
    let seed = |i: usize| {
        get(i).and_then(|(no, v)| {
            v.parse::<u64>()
                .map_err(|_| Error::parse(no, format!("not a seed: {v:?}")))
        })
    };
    Ok(SceneConfig {
        height: uint(0)?,
        width: uint(1)?,
        classes: uint(2)?,
        beta: float(3)?,
        input_dim: uint(4)?,
        blob_count: uint(5)?,
        noise_sigma: float(6)?,
        smooth_radius: uint(7)?,
        seed: seed(8)?,
        proto_seed: seed(9)?,
    })
}

// ---- JSON ----

/// serde_json formatter that writes floats with 17 significant digits.
/// Non-finite values become `null`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(fmt_f64(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
}

/// Compact single-line JSON with full-precision floats.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Numeric(format!("json encoding failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
}

/// One JSON object per evaluation record.
pub fn format_log(log: &TrainLog) -> Result<String> {
    let mut out = String::new();
    for r in &log.records {
        out.push_str(&to_json(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_log(text: &str) -> Result<TrainLog> {
    let records = numbered_lines(text)
        .map(|(no, l)| {
            serde_json::from_str::<EvalRecord>(l).map_err(|e| Error::parse(no, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainLog { records })
}

// ---- tables ----

pub const TABLE_HEADER: [&str; 10] = [
    "pr_mode",
    "cc_mode",
    "lambda",
    "accuracy",
    "head_accuracy",
    "common_accuracy",
    "tail_accuracy",
    "equiang_std_centers",
    "maxangle_avg_centers",
    "self_duality_gap",
];

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

/// Serialized name of a unit enum variant.
fn variant_name<T: Serialize>(v: &T) -> Result<String> {
    to_json(v).map(|s| s.trim_matches('"').to_string())
}

/// Comma-separated table with a header row, one row per arm.
pub fn format_table(table: &ComparisonTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            variant_name(&r.pr_mode)?,
            variant_name(&r.cc_mode)?,
            fmt_f64(r.lambda),
            fmt_f64(r.accuracy),
            fmt_f64(r.head_accuracy),
            fmt_f64(r.common_accuracy),
            fmt_f64(r.tail_accuracy),
            fmt_f64(r.equiang_std_centers),
            fmt_f64(r.maxangle_avg_centers),
            fmt_f64(r.self_duality_gap),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
}

pub fn parse_table(text: &str) -> Result<ComparisonTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let hdr = r.headers().map_err(csv_err)?;
    if hdr.iter().ne(TABLE_HEADER) {
        return Err(Error::parse(1, "unexpected table header"));
    }
    let rows = r
        .deserialize::<ArmSummary>()
        .map(|row| row.map_err(csv_err))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable { rows })
}
