//! Short-horizon video QoE forecasting for teleoperated vehicles.
//!
//! The crate covers the whole offline and online workflow:
//!
//! - [`telemetry`]: raw per-tick network/vehicle measurements and trace files.
//! - [`synthgen`]: seeded synthetic traces inside a fixed impairment envelope,
//!   labeled by a closed-form QoE oracle.
//! - [`pipeline`]: 10 s windows, min-max scaling fitted on training data,
//!   5-window contexts and a chronological train/val/test split.
//! - [`nn`]: tensors with reverse-mode differentiation.
//! - [`zoo`]: the recurrent, transformer, dense and linear forecasters and
//!   their serialized bundles.
//! - [`train`], [`eval`], [`explain`]: fitting, metrics/latency, attributions.
//! - [`serve`]: streaming inference with feedback decisions.

pub mod eval;
pub mod explain;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod serve;
pub mod synthgen;
pub mod telemetry;
pub mod train;
pub mod zoo;

pub use pipeline::{DatasetSplit, PreparedDataset, ScalerStats, SequenceSample, WindowFeatures};
pub use serve::{Action, FeedbackPolicy, ForecastDecision};
pub use telemetry::{TelemetrySample, Trace};
pub use zoo::{Model, ModelBundle, ModelClass, VariantId};

/// Number of per-window features fed to every model.
pub const N_FEATURES: usize = 6;
/// Windows of history in one model input.
pub const CONTEXT_LEN: usize = 5;
/// Feature names in model input order. The last one is the window's own QoE.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "thr_mean_mbps",
    "jitter_mean_ms",
    "loss_rate_mean",
    "loss_count_sum",
    "speed_mean_kmh",
    "qoe",
];
/// Index of the QoE feature inside a window's feature vector.
pub const QOE_FEATURE: usize = 5;
