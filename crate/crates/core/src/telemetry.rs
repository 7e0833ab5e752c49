//! Raw telemetry records and trace files.
//!
//! A trace is a list of per-tick samples (1 Hz by default) plus optional
//! per-window QoE labels. Two on-disk encodings are supported, CSV and
//! NDJSON, both keyed by the same six field names. Labels live in a
//! separate `window_index,qoe` CSV next to the trace.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CSV_HEADER: [&str; 6] = [
    "ts_ms",
    "throughput_mbps",
    "jitter_ms",
    "loss_rate",
    "loss_count",
    "speed_kmh",
];

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("malformed row {line}: field {field}")]
    MalformedRow { line: usize, field: String },
    #[error("non-monotonic timestamp at row {line}: {ts_ms} after {prev_ms}")]
    NonMonotonicTimestamp {
        line: usize,
        prev_ms: u64,
        ts_ms: u64,
    },
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("invalid label for window {window}: {qoe}")]
    InvalidLabel { window: usize, qoe: f64 },
    #[error("invalid tick period {0}")]
    InvalidTick(f64),
    #[error("unknown trace format {0:?}")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub ts_ms: u64,
    pub throughput_mbps: f64,
    pub jitter_ms: f64,
    /// Fraction of packets lost over the tick, in `[0, 1]`.
    pub loss_rate: f64,
    pub loss_count: u64,
    pub speed_kmh: f64,
}

impl TelemetrySample {
    /// Name of the first field violating its physical bound.
    pub fn invalid_field(&self) -> Option<&'static str> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.throughput_mbps) {
            Some("throughput_mbps")
        } else if !nonneg(self.jitter_ms) {
            Some("jitter_ms")
        } else if !(nonneg(self.loss_rate) && self.loss_rate <= 1.0) {
            Some("loss_rate")
        } else if !nonneg(self.speed_kmh) {
            Some("speed_kmh")
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLabel {
    pub window_index: usize,
    pub qoe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    samples: Vec<TelemetrySample>,
    tick_s: f64,
    labels: Option<Vec<WindowLabel>>,
}

impl Trace {
    pub fn new(
        samples: Vec<TelemetrySample>,
        tick_s: f64,
        labels: Option<Vec<WindowLabel>>,
    ) -> Result<Self, TelemetryError> {
        if samples.is_empty() {
            return Err(TelemetryError::EmptyTrace);
        }
        if !(tick_s.is_finite() && tick_s > 0.0) {
            return Err(TelemetryError::InvalidTick(tick_s));
        }
        for (i, pair) in samples.windows(2).enumerate() {
            if pair[1].ts_ms <= pair[0].ts_ms {
                return Err(TelemetryError::NonMonotonicTimestamp {
                    line: i + 2,
                    prev_ms: pair[0].ts_ms,
                    ts_ms: pair[1].ts_ms,
                });
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if let Some(field) = s.invalid_field() {
                return Err(TelemetryError::MalformedRow {
                    line: i + 1,
                    field: field.into(),
                });
            }
        }
        if let Some(labels) = &labels {
            for l in labels {
                if !(0.0..=100.0).contains(&l.qoe) {
                    return Err(TelemetryError::InvalidLabel {
                        window: l.window_index,
                        qoe: l.qoe,
                    });
                }
            }
        }
        Ok(Self {
            samples,
            tick_s,
            labels,
        })
    }

    pub fn samples(&self) -> &[TelemetrySample] {
        &self.samples
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_s
    }

    pub fn tick_ms(&self) -> u64 {
        (self.tick_s * 1000.0).round() as u64
    }

    pub fn labels(&self) -> Option<&[WindowLabel]> {
        self.labels.as_deref()
    }

    pub fn label_for(&self, window: usize) -> Option<f64> {
        self.labels
            .as_ref()?
            .iter()
            .find(|l| l.window_index == window)
            .map(|l| l.qoe)
    }

    pub fn with_labels(mut self, labels: Option<Vec<WindowLabel>>) -> Result<Self, TelemetryError> {
        let samples = std::mem::take(&mut self.samples);
        Self::new(samples, self.tick_s, labels)
    }

    /// Covered span: last timestamp plus one tick.
    pub fn duration_ms(&self) -> u64 {
        self.samples.last().map_or(0, |s| s.ts_ms) + self.tick_ms()
    }

    /// Number of windows of `window_s` seconds the trace spans.
    pub fn window_count(&self, window_s: u32) -> usize {
        let w = u64::from(window_s) * 1000;
        self.duration_ms().div_ceil(w) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Ndjson,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Ndjson => "ndjson",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(TraceFormat::Csv),
            "ndjson" | "jsonl" => Some(TraceFormat::Ndjson),
            _ => None,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = TelemetryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "ndjson" => Ok(TraceFormat::Ndjson),
            other => Err(TelemetryError::UnknownFormat(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedRow {
    pub line: usize,
    pub reason: String,
}

/// Side information from a load: blank rows skipped and ignored fields.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub skipped: Vec<SkippedRow>,
    pub ignored_fields: Vec<String>,
}

fn malformed(line: usize, field: &str) -> TelemetryError {
    TelemetryError::MalformedRow {
        line,
        field: field.into(),
    }
}

fn parse_f64(raw: &str, line: usize, field: &str) -> Result<f64, TelemetryError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(line, field))
}

fn parse_u64(raw: &str, line: usize, field: &str) -> Result<u64, TelemetryError> {
    raw.trim()
        .parse::<u64>()
        .map_err(|_| malformed(line, field))
}

fn checked(sample: TelemetrySample, line: usize) -> Result<TelemetrySample, TelemetryError> {
    match sample.invalid_field() {
        Some(field) => Err(malformed(line, field)),
        None => Ok(sample),
    }
}

/// Decode one NDJSON object. Returns the sample and the names of keys that
/// are not telemetry fields.
pub fn sample_from_json(
    value: &Value,
    line: usize,
) -> Result<(TelemetrySample, Vec<String>), TelemetryError> {
    let obj = value.as_object().ok_or_else(|| malformed(line, "object"))?;
    let num = |field: &str| -> Result<f64, TelemetryError> {
        obj.get(field)
            .and_then(Value::as_f64)
            .filter(|v| v.is_finite())
            .ok_or_else(|| malformed(line, field))
    };
    let int = |field: &str| -> Result<u64, TelemetryError> {
        obj.get(field)
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(line, field))
    };
    let sample = TelemetrySample {
        ts_ms: int("ts_ms")?,
        throughput_mbps: num("throughput_mbps")?,
        jitter_ms: num("jitter_ms")?,
        loss_rate: num("loss_rate")?,
        loss_count: int("loss_count")?,
        speed_kmh: num("speed_kmh")?,
    };
    let extra = obj
        .keys()
        .filter(|k| !CSV_HEADER.contains(&k.as_str()))
        .cloned()
        .collect();
    Ok((checked(sample, line)?, extra))
}

fn push_ordered(
    samples: &mut Vec<TelemetrySample>,
    sample: TelemetrySample,
    line: usize,
) -> Result<(), TelemetryError> {
    if let Some(prev) = samples.last() {
        if sample.ts_ms <= prev.ts_ms {
            return Err(TelemetryError::NonMonotonicTimestamp {
                line,
                prev_ms: prev.ts_ms,
                ts_ms: sample.ts_ms,
            });
        }
    }
    samples.push(sample);
    Ok(())
}

/// Parse CSV telemetry. Row numbers in errors count data rows from 1.
pub fn read_csv(reader: impl Read) -> Result<(Vec<TelemetrySample>, LoadReport), TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TelemetryError::MissingColumn(name.into()))?;
    }
    let mut report = LoadReport {
        ignored_fields: headers
            .iter()
            .filter(|h| !CSV_HEADER.contains(h))
            .map(str::to_string)
            .collect(),
        ..Default::default()
    };
    for name in &report.ignored_fields {
        log::warn!("ignoring unknown telemetry column {name:?}");
    }
    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            report.skipped.push(SkippedRow {
                line,
                reason: "blank row".into(),
            });
            continue;
        }
        let field = |k: usize| record.get(cols[k]).unwrap_or("");
        let sample = TelemetrySample {
            ts_ms: parse_u64(field(0), line, CSV_HEADER[0])?,
            throughput_mbps: parse_f64(field(1), line, CSV_HEADER[1])?,
            jitter_ms: parse_f64(field(2), line, CSV_HEADER[2])?,
            loss_rate: parse_f64(field(3), line, CSV_HEADER[3])?,
            loss_count: parse_u64(field(4), line, CSV_HEADER[4])?,
            speed_kmh: parse_f64(field(5), line, CSV_HEADER[5])?,
        };
        push_ordered(&mut samples, checked(sample, line)?, line)?;
        report.rows += 1;
    }
    Ok((samples, report))
}

pub fn read_ndjson(
    reader: impl BufRead,
) -> Result<(Vec<TelemetrySample>, LoadReport), TelemetryError> {
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            report.skipped.push(SkippedRow {
                line,
                reason: "blank line".into(),
            });
            continue;
        }
        let value: Value = serde_json::from_str(&text).map_err(|_| malformed(line, "json"))?;
        let (sample, extra) = sample_from_json(&value, line)?;
        for name in extra {
            if !report.ignored_fields.contains(&name) {
                log::warn!("ignoring unknown telemetry field {name:?}");
                report.ignored_fields.push(name);
            }
        }
        push_ordered(&mut samples, sample, line)?;
        report.rows += 1;
    }
    Ok((samples, report))
}

/// Labels file path that accompanies a trace file: `x.csv` -> `x.labels.csv`.
pub fn labels_path(trace_path: &Path) -> PathBuf {
    let stem = trace_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    trace_path.with_file_name(format!("{stem}.labels.csv"))
}

/// Load a trace. Labels are attached when the sibling labels file exists.
pub fn load_trace(
    path: &Path,
    format: TraceFormat,
    tick_s: f64,
) -> Result<(Trace, LoadReport), TelemetryError> {
    let file = BufReader::new(File::open(path)?);
    let (samples, report) = match format {
        TraceFormat::Csv => read_csv(file)?,
        TraceFormat::Ndjson => read_ndjson(file)?,
    };
    let lpath = labels_path(path);
    let labels = if lpath.exists() {
        Some(read_labels(BufReader::new(File::open(lpath)?))?)
    } else {
        None
    };
    Ok((Trace::new(samples, tick_s, labels)?, report))
}

pub fn read_labels(reader: impl Read) -> Result<Vec<WindowLabel>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TelemetryError::MissingColumn(name.into()))
    };
    let (wi, qi) = (col("window_index")?, col("qoe")?);
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 1;
        let window_index = parse_u64(record.get(wi).unwrap_or(""), line, "window_index")? as usize;
        let qoe = parse_f64(record.get(qi).unwrap_or(""), line, "qoe")?;
        if !(0.0..=100.0).contains(&qoe) {
            return Err(malformed(line, "qoe"));
        }
        labels.push(WindowLabel { window_index, qoe });
    }
    Ok(labels)
}

pub fn write_csv(samples: &[TelemetrySample], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for s in samples {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.ts_ms, s.throughput_mbps, s.jitter_ms, s.loss_rate, s.loss_count, s.speed_kmh
        )?;
    }
    Ok(())
}

pub fn write_ndjson(samples: &[TelemetrySample], mut out: impl Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_labels(labels: &[WindowLabel], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "window_index,qoe")?;
    for l in labels {
        writeln!(out, "{},{}", l.window_index, l.qoe)?;
    }
    Ok(())
}

/// Write a trace and, when it carries labels, its sibling labels file.
pub fn write_trace(trace: &Trace, path: &Path, format: TraceFormat) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        TraceFormat::Csv => write_csv(trace.samples(), &mut out)?,
        TraceFormat::Ndjson => write_ndjson(trace.samples(), &mut out)?,
    }
    out.flush()?;
    if let Some(labels) = trace.labels() {
        let mut lout = BufWriter::new(File::create(labels_path(path))?);
        write_labels(labels, &mut lout)?;
        lout.flush()?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Gap {
    /// Index of the sample after which ticks are missing.
    pub after_index: usize,
    pub missing_ticks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub gaps: Vec<Gap>,
    pub out_of_range: Vec<(usize, &'static str)>,
    /// Labeled windows over spanned windows; 0 when the trace has no labels.
    pub label_coverage: f64,
}

pub fn validate_trace(trace: &Trace, window_s: u32) -> ValidationReport {
    let tick = trace.tick_ms().max(1);
    let gaps = trace
        .samples()
        .windows(2)
        .enumerate()
        .filter_map(|(i, p)| {
            let steps = (p[1].ts_ms - p[0].ts_ms) / tick;
            (steps > 1).then_some(Gap {
                after_index: i,
                missing_ticks: steps - 1,
            })
        })
        .collect();
    let out_of_range = trace
        .samples()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.invalid_field().map(|f| (i, f)))
        .collect();
    let windows = trace.window_count(window_s);
    let label_coverage = match trace.labels() {
        Some(labels) if windows > 0 => {
            let mut seen = vec![false; windows];
            for l in labels {
                if l.window_index < windows {
                    seen[l.window_index] = true;
                }
            }
            seen.iter().filter(|&&s| s).count() as f64 / windows as f64
        }
        _ => 0.0,
    };
    ValidationReport {
        gaps,
        out_of_range,
        label_coverage,
    }
}
