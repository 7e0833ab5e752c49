//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use qoecast::pipeline::{fit_scaler, WindowFeatures};
use qoecast::serve::Forecaster;
use qoecast::zoo::{build_variant, BundleMeta};
use qoecast::{Model, ModelBundle, TelemetrySample, VariantId};

/// One model per architecture family.
pub const FAMILIES: [VariantId; 5] = [
    VariantId::GruBasic,
    VariantId::LstmBasic,
    VariantId::TrBasic,
    VariantId::DnnBasic,
    VariantId::LinBasic,
];

pub fn model(variant: VariantId) -> Model {
    build_variant(variant, 7).expect("registered variant")
}

/// Untrained bundle with a plausible scaler; speed does not depend on weights.
pub fn bundle(variant: VariantId) -> ModelBundle {
    let lo = WindowFeatures {
        window_index: 0,
        start_ms: 0,
        features: [5.0, 10.0, 0.0, 0.0, 0.0, 0.0],
    };
    let hi = WindowFeatures {
        window_index: 1,
        start_ms: 10_000,
        features: [50.0, 100.0, 0.05, 500.0, 80.0, 100.0],
    };
    let scaler = fit_scaler([&lo, &hi]).expect("two windows");
    ModelBundle::new(&model(variant), scaler, 10, BundleMeta::default())
}

pub fn forecaster(variant: VariantId) -> Arc<Forecaster> {
    Arc::new(Forecaster::from_bundle(&bundle(variant)).expect("valid bundle"))
}

/// `seconds` of 1 Hz ticks with a slow throughput swing.
pub fn ticks(seconds: u64) -> Vec<TelemetrySample> {
    (0..seconds)
        .map(|t| TelemetrySample {
            ts_ms: t * 1000,
            throughput_mbps: 25.0 + 15.0 * (t as f64 / 40.0).sin(),
            jitter_ms: 30.0,
            loss_rate: 0.005,
            loss_count: 5,
            speed_kmh: 50.0,
        })
        .collect()
}
