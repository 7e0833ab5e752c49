//! Test-set metrics in VMAF units, inference latency, rankings and
//! absolute-error densities.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::Tensor;
use crate::pipeline::{PreparedDataset, SequenceSample};
use crate::train::predict_samples;
use crate::zoo::{last_value_baseline, Model, ModelBundle, VariantId, ZooError};
use crate::{CONTEXT_LEN, N_FEATURES};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("bundle scaler {bundle:08x} differs from dataset scaler {dataset:08x}")]
    ScalerMismatch { bundle: u32, dataset: u32 },
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub batch: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// `mean_ms / batch`.
    pub per_sample_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub variant_id: VariantId,
    pub rmse: f64,
    pub mae: f64,
    pub latency: Option<LatencyStats>,
    pub n_test: usize,
    /// Absolute errors in VMAF units, test-set order.
    #[serde(skip)]
    pub abs_errors: Vec<f64>,
}

/// `(mae, rmse)` of signed errors.
pub fn error_metrics(errors: &[f64]) -> (f64, f64) {
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    (mae, rmse)
}

fn report(
    variant_id: VariantId,
    pred: &[f64],
    samples: &[SequenceSample],
    dataset: &PreparedDataset,
) -> MetricsReport {
    let s = &dataset.scaler;
    let errors: Vec<f64> = pred
        .iter()
        .zip(samples)
        .map(|(p, t)| s.inverse_target(*p) - s.inverse_target(t.target))
        .collect();
    let (mae, rmse) = error_metrics(&errors);
    assert!(rmse >= mae, "rmse {rmse} < mae {mae}");
    MetricsReport {
        variant_id,
        rmse,
        mae,
        latency: None,
        n_test: samples.len(),
        abs_errors: errors.iter().map(|e| e.abs()).collect(),
    }
}

/// Test-set metrics of a bundle; the bundle must carry the dataset's scaler.
pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &PreparedDataset,
) -> Result<MetricsReport, EvalError> {
    let (b, d) = (bundle.scaler.checksum(), dataset.scaler.checksum());
    if b != d {
        return Err(EvalError::ScalerMismatch {
            bundle: b,
            dataset: d,
        });
    }
    let test = &dataset.split.test;
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let pred = predict_samples(&bundle.model()?, test)?;
    Ok(report(bundle.variant_id, &pred, test, dataset))
}

/// Metrics of the last-value baseline on the test set.
pub fn evaluate_last_value(dataset: &PreparedDataset) -> Result<(f64, f64), EvalError> {
    let test = &dataset.split.test;
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let x = crate::zoo::batch_inputs(test.iter().map(|s| s.inputs.as_slice()))?;
    let pred = last_value_baseline(&x)?;
    let s = &dataset.scaler;
    let errors: Vec<f64> = pred
        .iter()
        .zip(test)
        .map(|(p, t)| s.inverse_target(*p) - s.inverse_target(t.target))
        .collect();
    Ok(error_metrics(&errors))
}

/// Seeded `[batch, 5, 6]` payload in `[0, 1)`.
pub fn latency_payload(batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, CONTEXT_LEN, N_FEATURES], |_| rng.random::<f64>())
}

/// Wall time of inference on one batch, after `warmup` untimed calls.
pub fn benchmark_latency(
    model: &Model,
    batch: usize,
    warmup: usize,
    reps: usize,
) -> Result<LatencyStats, EvalError> {
    let x = latency_payload(batch.max(1), 0x1a7e);
    for _ in 0..warmup {
        std::hint::black_box(model.predict(&x)?);
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(model.predict(&x)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median_ms = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    let p95_ms = times[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(LatencyStats {
        batch,
        reps: n,
        mean_ms,
        median_ms,
        p95_ms,
        per_sample_ms: mean_ms / batch as f64,
    })
}

/// Ascending by RMSE, then MAE, then variant name.
pub fn rank_variants(reports: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut out = reports.to_vec();
    out.sort_by(|a, b| {
        a.rmse
            .total_cmp(&b.rmse)
            .then(a.mae.total_cmp(&b.mae))
            .then_with(|| a.variant_id.name().cmp(b.variant_id.name()))
    });
    out
}

fn fmt_latency(l: &Option<LatencyStats>, f: impl Fn(&LatencyStats) -> f64) -> String {
    l.as_ref()
        .map(|l| format!("{:.4}", f(l)))
        .unwrap_or_default()
}

pub const METRICS_HEADER: &str = "variant_id,rmse,mae,latency_ms_batch16,latency_ms_sample,n_test";

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{},{},{}",
            r.variant_id,
            r.rmse,
            r.mae,
            fmt_latency(&r.latency, |l| l.mean_ms),
            fmt_latency(&r.latency, |l| l.per_sample_ms),
            r.n_test
        );
    }
    s
}

/// Fixed-width text table of the best `top` reports.
pub fn ranking_table(reports: &[MetricsReport], top: usize) -> String {
    let mut s = format!(
        "{:<16}{:>8}{:>8}{:>14}\n",
        "variant", "RMSE", "MAE", "latency (ms)"
    );
    for r in rank_variants(reports).iter().take(top) {
        let lat = r
            .latency
            .as_ref()
            .map_or("-".to_string(), |l| format!("{:.3}", l.mean_ms));
        let _ = writeln!(
            s,
            "{:<16}{:>8.3}{:>8.3}{:>14}",
            r.variant_id.name(),
            r.rmse,
            r.mae,
            lat
        );
    }
    s
}

/// Grouping used for error densities: linear and dense models share a curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DensityClass {
    Gru,
    Lstm,
    Transformer,
    LinearDnn,
}

impl DensityClass {
    pub fn of(v: VariantId) -> Self {
        use crate::zoo::ModelClass::*;
        match v.class() {
            Gru => Self::Gru,
            Lstm => Self::Lstm,
            Transformer => Self::Transformer,
            Dnn | Linear => Self::LinearDnn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gru => "gru",
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
            Self::LinearDnn => "linear_dnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityBin {
    pub left: f64,
    pub right: f64,
    pub density: f64,
}

/// Histogram over `[0, max]` normalized to unit area. If every error is
/// zero the range is `[0, 1)` and the mass sits in the first bin.
pub fn error_density(abs_errors: &[f64], bins: usize) -> Vec<DensityBin> {
    let bins = bins.max(1);
    let mut hi = abs_errors.iter().copied().fold(0.0, f64::max);
    if hi == 0.0 {
        hi = 1.0;
    }
    let width = hi / bins as f64;
    let mut counts = vec![0usize; bins];
    for &e in abs_errors {
        counts[((e / width) as usize).min(bins - 1)] += 1;
    }
    let n = abs_errors.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| DensityBin {
            left: i as f64 * width,
            right: if i + 1 == bins {
                hi
            } else {
                (i + 1) as f64 * width
            },
            density: c as f64 / (n * width),
        })
        .collect()
}

/// `density_<class>.csv` per class present in `reports`.
pub fn export_error_density(
    reports: &[MetricsReport],
    bins: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir)?;
    let mut classes: Vec<DensityClass> = reports
        .iter()
        .map(|r| DensityClass::of(r.variant_id))
        .collect();
    classes.sort();
    classes.dedup();
    let mut paths = Vec::new();
    for class in classes {
        let errors: Vec<f64> = reports
            .iter()
            .filter(|r| DensityClass::of(r.variant_id) == class)
            .flat_map(|r| r.abs_errors.iter().copied())
            .collect();
        let mut s = String::from("bin_left,bin_right,density\n");
        for b in error_density(&errors, bins) {
            let _ = writeln!(s, "{},{},{}", b.left, b.right, b.density);
        }
        let path = dir.join(format!("density_{}.csv", class.name()));
        fs::write(&path, s)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyBudget {
    pub inference_ms: f64,
    pub capture_ms: f64,
    pub uplink_ms: f64,
    pub downlink_ms: f64,
    pub render_ms: f64,
}

impl LatencyBudget {
    /// Onboard feature extraction 18 ms, two 20 ms radio hops, 7 ms rendering.
    pub fn with_inference(inference_ms: f64) -> Self {
        Self {
            inference_ms,
            capture_ms: 18.0,
            uplink_ms: 20.0,
            downlink_ms: 20.0,
            render_ms: 7.0,
        }
    }

    pub fn total_ms(&self) -> f64 {
        self.inference_ms + self.capture_ms + self.uplink_ms + self.downlink_ms + self.render_ms
    }

    /// Time left to react within a forecast horizon.
    pub fn margin_ms(&self, horizon_s: f64) -> f64 {
        horizon_s * 1000.0 - self.total_ms()
    }
}

pub fn latency_budget(
    inference_ms: f64,
    capture_ms: f64,
    uplink_ms: f64,
    downlink_ms: f64,
    render_ms: f64,
) -> f64 {
    LatencyBudget {
        inference_ms,
        capture_ms,
        uplink_ms,
        downlink_ms,
        render_ms,
    }
    .total_ms()
}
