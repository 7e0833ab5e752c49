//! Traces to model-ready datasets.
//!
//! Each trace is cut into fixed windows (10 s by default) of six aggregate
//! features. Windows are min-max scaled with statistics fitted on training
//! windows only, grouped into stride-1 contexts of five windows whose target
//! is the next window's QoE, and split chronologically 70/10/20.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synthgen::{qoe_oracle, WindowStats};
use crate::telemetry::{TelemetrySample, Trace};
use crate::{CONTEXT_LEN, FEATURE_NAMES, N_FEATURES, QOE_FEATURE};

/// Minimum share of a window's expected ticks for it to be kept.
pub const MIN_TICK_COVERAGE: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("trace has no window with enough ticks")]
    NoCompleteWindow,
    #[error("need at least 2 training windows to fit a scaler, got {0}")]
    InsufficientData(usize),
    #[error("trace {trace_id}: {windows} windows cannot fill a context of {needed}")]
    TraceTooShort {
        trace_id: usize,
        windows: usize,
        needed: usize,
    },
    #[error("need at least 10 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("dataset file {path}: {msg}")]
    BadDatasetFile { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub window_index: usize,
    /// Window start relative to the trace start.
    pub start_ms: u64,
    /// `[thr_mean_mbps, jitter_mean_ms, loss_rate_mean, loss_count_sum, speed_mean_kmh, qoe]`
    pub features: [f64; N_FEATURES],
}

impl WindowFeatures {
    pub fn qoe(&self) -> f64 {
        self.features[QOE_FEATURE]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedTrace {
    pub windows: Vec<WindowFeatures>,
    /// Indices of windows dropped for low tick coverage.
    pub dropped: Vec<usize>,
}

/// Running sums of one window's ticks, shared by the offline and streaming
/// paths so both produce bit-identical features.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowAccumulator {
    sums: [f64; 5],
    count: usize,
}

impl WindowAccumulator {
    pub fn push(&mut self, s: &TelemetrySample) {
        self.sums[0] += s.throughput_mbps;
        self.sums[1] += s.jitter_ms;
        self.sums[2] += s.loss_rate;
        self.sums[3] += s.loss_count as f64;
        self.sums[4] += s.speed_kmh;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Enough ticks out of `expected` to form a window.
    pub fn is_covered(&self, expected: f64) -> bool {
        self.count > 0 && (self.count as f64) >= MIN_TICK_COVERAGE * expected
    }

    /// Oracle inputs: mean throughput, loss in percent, mean jitter.
    pub fn stats(&self) -> WindowStats {
        let c = self.count as f64;
        WindowStats {
            thr_mbps: self.sums[0] / c,
            loss_pct: 100.0 * (self.sums[2] / c),
            jitter_ms: self.sums[1] / c,
        }
    }

    pub fn features(&self, qoe: f64) -> [f64; N_FEATURES] {
        let c = self.count as f64;
        [
            self.sums[0] / c,
            self.sums[1] / c,
            self.sums[2] / c,
            self.sums[3],
            self.sums[4] / c,
            qoe,
        ]
    }
}

/// Ticks a full window should contain.
pub fn expected_ticks(window_s: u32, tick_ms: u64) -> f64 {
    (f64::from(window_s) * 1000.0 / tick_ms.max(1) as f64).round()
}

/// Per-window means of the samples (sums for the loss count). QoE comes from
/// the trace's labels; unlabeled windows fall back to the oracle chained on
/// the previous kept window's QoE.
pub fn window_trace(trace: &Trace, window_s: u32) -> Result<WindowedTrace, PipelineError> {
    if window_s == 0 {
        return Err(PipelineError::InvalidConfig(
            "window_s must be positive".into(),
        ));
    }
    let w_ms = u64::from(window_s) * 1000;
    let n = trace.window_count(window_s);
    let expected = expected_ticks(window_s, trace.tick_ms());
    let mut acc = vec![WindowAccumulator::default(); n];
    for s in trace.samples() {
        acc[(s.ts_ms / w_ms) as usize].push(s);
    }
    let mut windows = Vec::new();
    let mut dropped = Vec::new();
    let mut prev_qoe: Option<f64> = None;
    for (k, a) in acc.into_iter().enumerate() {
        if !a.is_covered(expected) {
            dropped.push(k);
            prev_qoe = None;
            continue;
        }
        let qoe = trace
            .label_for(k)
            .unwrap_or_else(|| qoe_oracle(a.stats(), prev_qoe));
        prev_qoe = Some(qoe);
        windows.push(WindowFeatures {
            window_index: k,
            start_ms: k as u64 * w_ms,
            features: a.features(qoe),
        });
    }
    if windows.is_empty() {
        return Err(PipelineError::NoCompleteWindow);
    }
    Ok(WindowedTrace { windows, dropped })
}

/// Min-max statistics of the six features. The target shares the QoE
/// feature's range so the autoregressive input and the output live on one
/// scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mins: [f64; N_FEATURES],
    pub maxs: [f64; N_FEATURES],
    pub target_min: f64,
    pub target_max: f64,
    pub degenerate: [bool; N_FEATURES],
}

pub fn fit_scaler<'a>(
    windows: impl IntoIterator<Item = &'a WindowFeatures>,
) -> Result<ScalerStats, PipelineError> {
    let mut mins = [f64::INFINITY; N_FEATURES];
    let mut maxs = [f64::NEG_INFINITY; N_FEATURES];
    let mut count = 0;
    for w in windows {
        for (j, &v) in w.features.iter().enumerate() {
            mins[j] = mins[j].min(v);
            maxs[j] = maxs[j].max(v);
        }
        count += 1;
    }
    if count < 2 {
        return Err(PipelineError::InsufficientData(count));
    }
    let degenerate = std::array::from_fn(|j| maxs[j] == mins[j]);
    Ok(ScalerStats {
        mins,
        maxs,
        target_min: mins[QOE_FEATURE],
        target_max: maxs[QOE_FEATURE],
        degenerate,
    })
}

impl ScalerStats {
    pub fn scale_feature(&self, j: usize, x: f64) -> f64 {
        if self.degenerate[j] {
            0.0
        } else {
            (x - self.mins[j]) / (self.maxs[j] - self.mins[j])
        }
    }

    pub fn scale(&self, features: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| self.scale_feature(j, features[j]))
    }

    pub fn scale_target(&self, qoe: f64) -> f64 {
        if self.target_max == self.target_min {
            0.0
        } else {
            (qoe - self.target_min) / (self.target_max - self.target_min)
        }
    }

    /// Scaled prediction back to VMAF units.
    pub fn inverse_target(&self, y: f64) -> f64 {
        self.target_min + y * (self.target_max - self.target_min)
    }

    /// CRC-32 of the canonical JSON form; equal statistics give equal sums.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(serde_json::to_string(self).expect("plain data").as_bytes())
    }
}

/// Where a sequence comes from on the dataset timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub trace_id: usize,
    pub first_window: usize,
    /// Start of the target window on the dataset-wide timeline.
    pub target_ts_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// Context windows, oldest first.
    pub inputs: Vec<[f64; N_FEATURES]>,
    pub target: f64,
    pub origin: SampleOrigin,
}

impl SequenceSample {
    /// Flattened row-major inputs.
    pub fn flat_inputs(&self) -> Vec<f64> {
        self.inputs.iter().flatten().copied().collect()
    }
}

/// Stride-1 contexts over consecutive windows. `offset_ms` places the trace
/// on the dataset timeline.
pub fn make_sequences(
    windows: &[WindowFeatures],
    trace_id: usize,
    offset_ms: u64,
    context: usize,
    horizon: usize,
) -> Result<Vec<SequenceSample>, PipelineError> {
    if context == 0 || horizon == 0 {
        return Err(PipelineError::InvalidConfig(
            "context and horizon must be positive".into(),
        ));
    }
    let span = context + horizon;
    if windows.len() < span {
        return Err(PipelineError::TraceTooShort {
            trace_id,
            windows: windows.len(),
            needed: span,
        });
    }
    let mut out = Vec::new();
    for i in 0..=windows.len() - span {
        let run = &windows[i..i + span];
        let contiguous = run
            .windows(2)
            .all(|p| p[1].window_index == p[0].window_index + 1);
        if !contiguous {
            continue;
        }
        let target = &run[span - 1];
        out.push(SequenceSample {
            inputs: run[..context].iter().map(|w| w.features).collect(),
            target: target.qoe(),
            origin: SampleOrigin {
                trace_id,
                first_window: run[0].window_index,
                target_ts_ms: offset_ms + target.start_ms,
            },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    /// Last target timestamp of train and of validation.
    pub train_end_ms: u64,
    pub val_end_ms: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `max(train) < min(val) <= max(val) < min(test)` on target timestamps.
    pub fn is_chronological(&self) -> bool {
        let ts = |s: &[SequenceSample]| s.iter().map(|x| x.origin.target_ts_ms).collect::<Vec<_>>();
        let (tr, va, te) = (ts(&self.train), ts(&self.val), ts(&self.test));
        let max = |v: &[u64]| v.iter().copied().max();
        let min = |v: &[u64]| v.iter().copied().min();
        let ordered = |a: Option<u64>, b: Option<u64>| match (a, b) {
            (Some(a), Some(b)) => a < b,
            _ => true,
        };
        ordered(max(&tr), min(&va)) && ordered(max(&va), min(&te)) && ordered(max(&tr), min(&te))
    }
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.70, 0.10, 0.20);

/// Sort by target time, then take the earliest `train` share, the next `val`
/// share (both floored) and leave the remainder to test.
pub fn chrono_split(
    mut sequences: Vec<SequenceSample>,
    fractions: (f64, f64, f64),
) -> Result<DatasetSplit, PipelineError> {
    let n = sequences.len();
    if n < 10 {
        return Err(PipelineError::TooFewSequences(n));
    }
    let (ft, fv, fte) = fractions;
    if ft <= 0.0 || fv < 0.0 || fte <= 0.0 || ((ft + fv + fte) - 1.0).abs() > 1e-9 {
        return Err(PipelineError::InvalidConfig(format!(
            "split fractions {fractions:?}"
        )));
    }
    sequences.sort_by_key(|s| {
        (
            s.origin.target_ts_ms,
            s.origin.trace_id,
            s.origin.first_window,
        )
    });
    // the epsilon absorbs representation error such as 0.7 * 30 = 20.999...
    let n_train = (ft * n as f64 + 1e-9).floor() as usize;
    let n_val = (fv * n as f64 + 1e-9).floor() as usize;
    let test = sequences.split_off(n_train + n_val);
    let val = sequences.split_off(n_train);
    let train = sequences;
    let last = |s: &[SequenceSample]| s.last().map_or(0, |x| x.origin.target_ts_ms);
    Ok(DatasetSplit {
        train_end_ms: last(&train),
        val_end_ms: if val.is_empty() {
            last(&train)
        } else {
            last(&val)
        },
        train,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window_s: u32,
    pub context: usize,
    pub horizon: usize,
    pub fractions: (f64, f64, f64),
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_s: 10,
            context: CONTEXT_LEN,
            horizon: 1,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

/// Scaled, split sequences with the statistics used to scale them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub config: PipelineConfig,
    pub scaler: ScalerStats,
    pub split: DatasetSplit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PrepareReport {
    /// Per trace: (kept windows, dropped window indices).
    pub traces: Vec<(usize, Vec<usize>)>,
    pub sequences: usize,
    pub train_windows: usize,
}

/// Raw (unscaled) windows and sequences of a list of traces laid end to end
/// on one timeline.
pub struct RawDataset {
    pub windows: Vec<Vec<WindowFeatures>>,
    pub sequences: Vec<SequenceSample>,
    pub report: PrepareReport,
}

pub fn window_and_sequence(
    traces: &[Trace],
    config: &PipelineConfig,
) -> Result<RawDataset, PipelineError> {
    let mut offset_ms = 0;
    let mut windows = Vec::with_capacity(traces.len());
    let mut sequences = Vec::new();
    let mut report = PrepareReport::default();
    let w_ms = u64::from(config.window_s) * 1000;
    for (trace_id, trace) in traces.iter().enumerate() {
        let wt = window_trace(trace, config.window_s)?;
        sequences.extend(make_sequences(
            &wt.windows,
            trace_id,
            offset_ms,
            config.context,
            config.horizon,
        )?);
        report.traces.push((wt.windows.len(), wt.dropped));
        windows.push(wt.windows);
        offset_ms += trace.window_count(config.window_s) as u64 * w_ms;
    }
    report.sequences = sequences.len();
    Ok(RawDataset {
        windows,
        sequences,
        report,
    })
}

/// Windows referenced (as input or target) by any of `sequences`.
pub fn covered_windows<'a>(
    windows: &'a [Vec<WindowFeatures>],
    sequences: &[SequenceSample],
    config: &PipelineConfig,
) -> Vec<&'a WindowFeatures> {
    let span = config.context + config.horizon;
    let keys: BTreeSet<(usize, usize)> = sequences
        .iter()
        .flat_map(|s| (0..span).map(move |k| (s.origin.trace_id, s.origin.first_window + k)))
        .collect();
    keys.into_iter()
        .filter_map(|(t, w)| windows[t].iter().find(|x| x.window_index == w))
        .collect()
}

fn scale_samples(samples: &mut [SequenceSample], scaler: &ScalerStats) {
    for s in samples {
        for row in &mut s.inputs {
            *row = scaler.scale(row);
        }
        s.target = scaler.scale_target(s.target);
    }
}

pub fn prepare_dataset(
    traces: &[Trace],
    config: &PipelineConfig,
) -> Result<(PreparedDataset, PrepareReport), PipelineError> {
    let raw = window_and_sequence(traces, config)?;
    let mut split = chrono_split(raw.sequences, config.fractions)?;
    let train_windows = covered_windows(&raw.windows, &split.train, config);
    let scaler = fit_scaler(train_windows.iter().copied())?;
    let mut report = raw.report;
    report.train_windows = train_windows.len();
    scale_samples(&mut split.train, &scaler);
    scale_samples(&mut split.val, &scaler);
    scale_samples(&mut split.test, &scaler);
    Ok((
        PreparedDataset {
            config: config.clone(),
            scaler,
            split,
        },
        report,
    ))
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    origin: SampleOrigin,
    inputs: Vec<f64>,
    target: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    window_s: u32,
    context: usize,
    horizon: usize,
    fractions: (f64, f64, f64),
    feature_order: Vec<String>,
    scaler: ScalerStats,
    train_end_ms: u64,
    val_end_ms: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
}

pub fn write_sequences(
    samples: &[SequenceSample],
    mut out: impl Write,
) -> Result<(), PipelineError> {
    for s in samples {
        let rec = SequenceRecord {
            origin: s.origin,
            inputs: s.flat_inputs(),
            target: s.target,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sequences(
    reader: impl BufRead,
    context: usize,
) -> Result<Vec<SequenceSample>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line)?;
        if rec.inputs.len() != context * N_FEATURES {
            return Err(PipelineError::BadDatasetFile {
                path: format!("line {}", i + 1),
                msg: format!(
                    "expected {} inputs, got {}",
                    context * N_FEATURES,
                    rec.inputs.len()
                ),
            });
        }
        out.push(SequenceSample {
            inputs: rec
                .inputs
                .chunks(N_FEATURES)
                .map(|c| std::array::from_fn(|j| c[j]))
                .collect(),
            target: rec.target,
            origin: rec.origin,
        });
    }
    Ok(out)
}

impl PreparedDataset {
    /// `dataset.json` plus `train/val/test.ndjson` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        let meta = DatasetMeta {
            window_s: self.config.window_s,
            context: self.config.context,
            horizon: self.config.horizon,
            fractions: self.config.fractions,
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            scaler: self.scaler.clone(),
            train_end_ms: self.split.train_end_ms,
            val_end_ms: self.split.val_end_ms,
            n_train: self.split.train.len(),
            n_val: self.split.val.len(),
            n_test: self.split.test.len(),
        };
        let mut f = BufWriter::new(File::create(dir.join("dataset.json"))?);
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n")?;
        f.flush()?;
        for (name, part) in [
            ("train", &self.split.train),
            ("val", &self.split.val),
            ("test", &self.split.test),
        ] {
            let mut f = BufWriter::new(File::create(dir.join(format!("{name}.ndjson")))?);
            write_sequences(part, &mut f)?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let meta_path = dir.join("dataset.json");
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))?;
        if meta.feature_order != FEATURE_NAMES {
            return Err(PipelineError::BadDatasetFile {
                path: meta_path.display().to_string(),
                msg: format!("feature order {:?}", meta.feature_order),
            });
        }
        let read = |name: &str| -> Result<Vec<SequenceSample>, PipelineError> {
            let f = BufReader::new(File::open(dir.join(format!("{name}.ndjson")))?);
            read_sequences(f, meta.context)
        };
        let split = DatasetSplit {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
            train_end_ms: meta.train_end_ms,
            val_end_ms: meta.val_end_ms,
        };
        for (name, got, want) in [
            ("train", split.train.len(), meta.n_train),
            ("val", split.val.len(), meta.n_val),
            ("test", split.test.len(), meta.n_test),
        ] {
            if got != want {
                return Err(PipelineError::BadDatasetFile {
                    path: dir.join(format!("{name}.ndjson")).display().to_string(),
                    msg: format!("{got} records, metadata says {want}"),
                });
            }
        }
        Ok(Self {
            config: PipelineConfig {
                window_s: meta.window_s,
                context: meta.context,
                horizon: meta.horizon,
                fractions: meta.fractions,
            },
            scaler: meta.scaler,
            split,
        })
    }
}

/// Distinct `(trace_id, window)` keys a set of sequences touches.
pub fn window_keys(sequences: &[SequenceSample], span: usize) -> HashSet<(usize, usize)> {
    sequences
        .iter()
        .flat_map(|s| (0..span).map(move |k| (s.origin.trace_id, s.origin.first_window + k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{TelemetrySample, WindowLabel};

    fn tick(ts_ms: u64, thr: f64) -> TelemetrySample {
        TelemetrySample {
            ts_ms,
            throughput_mbps: thr,
            jitter_ms: 40.0,
            loss_rate: 0.01,
            loss_count: 3,
            speed_kmh: 20.0,
        }
    }

    fn window(k: usize, thr: f64, qoe: f64) -> WindowFeatures {
        WindowFeatures {
            window_index: k,
            start_ms: k as u64 * 10_000,
            features: [thr, 40.0, 0.01, 30.0, 20.0, qoe],
        }
    }

    #[test]
    fn window_means_and_sums() {
        let trace = Trace::new(
            (0..10).map(|i| tick(i * 1000, 10.0 + i as f64)).collect(),
            1.0,
            None,
        )
        .unwrap();
        let w = window_trace(&trace, 10).unwrap();
        assert_eq!(w.windows.len(), 1);
        assert_eq!(w.windows[0].features[0], 14.5);
        assert_eq!(w.windows[0].features[3], 30.0);
    }

    #[test]
    fn sixty_ticks_six_windows() {
        let trace = Trace::new((0..60).map(|i| tick(i * 1000, 20.0)).collect(), 1.0, None).unwrap();
        assert_eq!(window_trace(&trace, 10).unwrap().windows.len(), 6);
    }

    #[test]
    fn sparse_window_dropped_and_labels_used() {
        // window 1 keeps only 7 of 10 ticks
        let samples = (0..30)
            .filter(|i| !(12..15).contains(i))
            .map(|i| tick(i * 1000, 20.0))
            .collect();
        let labels = vec![WindowLabel {
            window_index: 0,
            qoe: 12.5,
        }];
        let trace = Trace::new(samples, 1.0, Some(labels)).unwrap();
        let w = window_trace(&trace, 10).unwrap();
        assert_eq!(w.dropped, vec![1]);
        assert_eq!(
            w.windows.iter().map(|x| x.window_index).collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert_eq!(w.windows[0].qoe(), 12.5);
        // unlabeled window 2 restarts the oracle chain after the gap
        let expected = qoe_oracle(
            WindowStats {
                thr_mbps: 20.0,
                loss_pct: 1.0,
                jitter_ms: 40.0,
            },
            None,
        );
        assert_eq!(w.windows[1].qoe(), expected);
    }

    #[test]
    fn scaler_extremes_and_degenerate() {
        let ws = [window(0, 5.0, 0.0), window(1, 50.0, 100.0)];
        let s = fit_scaler(&ws).unwrap();
        assert_eq!((s.mins[0], s.maxs[0]), (5.0, 50.0));
        assert_eq!((s.target_min, s.target_max), (0.0, 100.0));
        assert!(s.degenerate[1]);
        assert!(!s.degenerate[0]);
        assert_eq!(s.scale_feature(0, 27.5), 0.5);
        assert_eq!(s.scale_feature(1, 40.0), 0.0);
        assert!((s.inverse_target(0.17377) - 17.377).abs() < 1e-12);
        assert!(matches!(
            fit_scaler(&ws[..1]),
            Err(PipelineError::InsufficientData(1))
        ));
    }

    #[test]
    fn sequence_counts() {
        let ws: Vec<_> = (0..60).map(|k| window(k, 10.0, 50.0)).collect();
        assert_eq!(make_sequences(&ws, 0, 0, 5, 1).unwrap().len(), 55);
        assert_eq!(make_sequences(&ws[..6], 0, 0, 5, 1).unwrap().len(), 1);
        assert!(matches!(
            make_sequences(&ws[..5], 0, 0, 5, 1),
            Err(PipelineError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn sequences_skip_dropped_windows() {
        let ws: Vec<_> = (0..12)
            .filter(|&k| k != 6)
            .map(|k| window(k, k as f64, 50.0))
            .collect();
        let seqs = make_sequences(&ws, 3, 0, 5, 1).unwrap();
        // runs 0..=5 (one sequence) and 7..=11 (too short)
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].origin.first_window, 0);
        assert_eq!(seqs[0].inputs[4][0], 4.0);
        assert_eq!(seqs[0].origin.target_ts_ms, 50_000);
    }

    fn seqs(n: usize) -> Vec<SequenceSample> {
        let ws: Vec<_> = (0..n + 5).map(|k| window(k, 10.0, 50.0)).collect();
        make_sequences(&ws, 0, 0, 5, 1).unwrap()
    }

    #[test]
    fn split_proportions() {
        let s = chrono_split(seqs(100), DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let s = chrono_split(seqs(10), DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(matches!(
            chrono_split(seqs(9), DEFAULT_FRACTIONS),
            Err(PipelineError::TooFewSequences(9))
        ));
        for n in 10..200 {
            let s = chrono_split(seqs(n), DEFAULT_FRACTIONS).unwrap();
            assert_eq!(s.train.len(), (n * 7) / 10, "n = {n}");
            assert_eq!(s.val.len(), n / 10, "n = {n}");
        }
    }

    #[test]
    fn split_sorts_first() {
        let mut shuffled = seqs(30);
        shuffled.reverse();
        shuffled.swap(3, 17);
        let s = chrono_split(shuffled, DEFAULT_FRACTIONS).unwrap();
        assert!(s.is_chronological());
        assert_eq!(s.train[0].origin.first_window, 0);
    }
}
