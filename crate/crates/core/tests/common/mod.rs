//! Fixtures shared by the streaming tests and the acceptance run.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use qoecast::pipeline::{
    make_sequences, prepare_dataset, window_trace, PipelineConfig, WindowFeatures,
};
use qoecast::serve::{run_stream, FixedClock, Forecaster, ServeConfig, StreamState};
use qoecast::synthgen::{generate_trace, generate_traces, GeneratorConfig};
use qoecast::train::{train_variant, TrainConfig};
use qoecast::zoo::batch_inputs;
use qoecast::{ModelBundle, Trace, VariantId};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub const GOLDEN_TRACE: &str = "golden_trace.ndjson";
pub const GOLDEN_BUNDLE: &str = "golden_bundle.json";
pub const GOLDEN_DECISIONS: &str = "golden_decisions.ndjson";

pub fn golden_config() -> ServeConfig {
    ServeConfig {
        explain_on_alert: true,
        ..ServeConfig::default()
    }
}

pub fn load_golden_bundle() -> ModelBundle {
    ModelBundle::load(&fixture(GOLDEN_BUNDLE)).expect("golden bundle")
}

/// Decisions for the golden trace with a frozen clock.
pub fn render_golden(bundle: &ModelBundle) -> String {
    let input = std::fs::read_to_string(fixture(GOLDEN_TRACE)).expect("golden trace");
    let forecaster = Arc::new(Forecaster::from_bundle(bundle).unwrap());
    let state = StreamState::new(forecaster, golden_config())
        .unwrap()
        .with_clock(Arc::new(FixedClock(0.0)));
    let mut out = Vec::new();
    run_stream(state, input.as_bytes(), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

/// One NDJSON line per sample. `qoe_every_tick` puts the window label on
/// every tick; otherwise only the listed windows carry it, on their last tick.
pub fn trace_to_ndjson(trace: &Trace, labeled: impl Fn(usize) -> bool) -> String {
    let mut out = String::new();
    let n = trace.samples().len();
    for (i, s) in trace.samples().iter().enumerate() {
        let mut v = serde_json::to_value(s).unwrap();
        let k = (s.ts_ms / 10_000) as usize;
        let last_in_window = i + 1 == n || trace.samples()[i + 1].ts_ms / 10_000 != k as u64;
        if last_in_window && labeled(k) {
            if let Some(q) = trace.label_for(k) {
                v["qoe"] = q.into();
            }
        }
        writeln!(out, "{v}").unwrap();
    }
    out
}

/// Rebuild all golden files. Run with `QOECAST_BLESS=1`.
pub fn bless() {
    let traces = generate_traces(&GeneratorConfig::default(), 6).unwrap();
    let (ds, _) = prepare_dataset(&traces, &PipelineConfig::default()).unwrap();
    let (bundle, _) = train_variant(VariantId::GruBasic, &ds, &TrainConfig::default()).unwrap();
    bundle.save(&fixture(GOLDEN_BUNDLE)).unwrap();

    let gen = GeneratorConfig {
        seed: 15,
        duration_s: 120,
        ..GeneratorConfig::default()
    };
    // a drop from good links and a slow recovery
    let trace = generate_trace(&gen).unwrap();
    let mut lines: Vec<String> = trace_to_ndjson(&trace, |k| k != 6 && k != 9)
        .lines()
        .map(String::from)
        .collect();
    // a repeated tick and a corrupt line exercise the error records
    let dup = lines[31].clone();
    lines.insert(33, dup);
    lines.insert(
        70,
        "{\"ts_ms\": 70500, \"throughput_mbps\": \"n/a\"}".into(),
    );
    std::fs::write(fixture(GOLDEN_TRACE), lines.join("\n") + "\n").unwrap();

    let bundle = load_golden_bundle();
    std::fs::write(fixture(GOLDEN_DECISIONS), render_golden(&bundle)).unwrap();
}

/// Offline path: windows from the labeled trace, scaled with the bundle's
/// statistics and forecast in one batch. Returns (target window start, pred).
pub fn offline_predictions(bundle: &ModelBundle, trace: &Trace) -> Vec<(u64, f64)> {
    let windows: Vec<WindowFeatures> = window_trace(trace, bundle.window_s).unwrap().windows;
    let scaled: Vec<WindowFeatures> = windows
        .iter()
        .map(|w| WindowFeatures {
            features: bundle.scaler.scale(&w.features),
            ..w.clone()
        })
        .collect();
    let seqs = make_sequences(&scaled, 0, 0, 5, 1).unwrap();
    let model = bundle.model().unwrap();
    let x = batch_inputs(seqs.iter().map(|s| s.inputs.as_slice())).unwrap();
    let y = model.predict(&x).unwrap();
    seqs.iter()
        .zip(y)
        .map(|(s, y)| (s.origin.target_ts_ms, bundle.scaler.inverse_target(y)))
        .collect()
}

/// Streaming path over the same trace with every window's label in-band.
pub fn streamed_predictions(bundle: &ModelBundle, trace: &Trace) -> Vec<(u64, f64)> {
    let input = trace_to_ndjson(trace, |_| true);
    let forecaster = Arc::new(Forecaster::from_bundle(bundle).unwrap());
    let state = StreamState::new(forecaster, ServeConfig::default()).unwrap();
    let mut out = Vec::new();
    run_stream(state, input.as_bytes(), &mut out).unwrap();
    String::from_utf8(out)
        .unwrap()
        .lines()
        .filter_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            // render and re-parse, as a consumer of the stream would
            Some((v.get("ts_ms")?.as_u64()?, v["qoe_pred"].as_f64()?))
        })
        .collect()
}

/// Trace with a gap that drops one window, so the context chain restarts.
pub fn equivalence_trace(seed: u64) -> Trace {
    let trace = generate_trace(&GeneratorConfig {
        seed,
        duration_s: 300,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let samples: Vec<_> = trace
        .samples()
        .iter()
        .filter(|s| !(152_000..159_000).contains(&s.ts_ms))
        .copied()
        .collect();
    Trace::new(samples, trace.tick_s(), trace.labels().map(|l| l.to_vec())).unwrap()
}

/// Largest |stream - offline| over matched targets, and the match count.
pub fn equivalence_gap(bundle: &ModelBundle, trace: &Trace) -> (f64, usize) {
    let offline = offline_predictions(bundle, trace);
    let streamed = streamed_predictions(bundle, trace);
    let mut matched = 0;
    let mut worst = 0.0f64;
    for (ts, p) in &offline {
        let s = streamed
            .iter()
            .find(|(t, _)| t == ts)
            .unwrap_or_else(|| panic!("no streamed forecast for {ts}"));
        worst = worst.max((s.1 - p).abs());
        matched += 1;
    }
    (worst, matched)
}
