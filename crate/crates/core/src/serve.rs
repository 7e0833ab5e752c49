//! Streaming inference: per-tick telemetry in, one forecast and feedback
//! action per completed window out.
//!
//! Windows are aligned to `ts_ms = 0`, exactly as in the offline pipeline,
//! so a stream and [`crate::pipeline::window_trace`] see the same windows.
//! A window completes when a tick reaches its end (`ts + tick >= end`) or
//! when a sample from a later window arrives. Once five consecutive windows
//! are buffered every completed window yields a [`ForecastDecision`] for the
//! following window, so the horizon is one window (10 s at defaults). Latency
//! figures quoted elsewhere for a two-second-ahead forecast do not apply to
//! this horizon.
//!
//! The sixth feature of a live window is its measured QoE when the stream
//! carries a `"qoe"` field, else the forecast made for that window, else the
//! closed-form oracle chained on the previous window.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::explain::{integrated_gradients, top_k, ExplainError, DEFAULT_IG_STEPS};
use crate::pipeline::{expected_ticks, ScalerStats, WindowAccumulator};
use crate::synthgen::qoe_oracle;
use crate::telemetry::{sample_from_json, TelemetryError, TelemetrySample};
use crate::zoo::{batch_inputs, Model, ModelBundle, VariantId, ZooError};
use crate::{CONTEXT_LEN, N_FEATURES};

/// Attributions attached to an alert.
pub const ALERT_TOP_K: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("sample at {ts_ms} ms does not follow {last_ms} ms")]
    OutOfOrderSample { last_ms: u64, ts_ms: u64 },
    #[error("bundle scaler has no usable QoE range")]
    ScalerMissing,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServeError {
    /// Stable tag used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::OutOfOrderSample { .. } => "out_of_order_sample",
            Self::ScalerMissing => "scaler_missing",
            Self::InvalidPolicy(_) => "invalid_policy",
            Self::InvalidConfig(_) => "invalid_config",
            Self::BadRecord { .. } => "bad_record",
            Self::Telemetry(_) => "telemetry",
            Self::Zoo(_) => "model",
            Self::Explain(_) => "explain",
            Self::Io(_) => "io",
        }
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    #[default]
    None,
    ReduceBitrate,
    Alert,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ReduceBitrate => "reduce_bitrate",
            Self::Alert => "alert",
        }
    }
}

/// Thresholds in VMAF units. The defaults are operating choices, not
/// measured values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub reduce_bitrate_threshold: f64,
    pub alert_threshold: f64,
    pub hysteresis: f64,
}

impl Default for FeedbackPolicy {
    fn default() -> Self {
        Self {
            reduce_bitrate_threshold: 70.0,
            alert_threshold: 50.0,
            hysteresis: 3.0,
        }
    }
}

impl FeedbackPolicy {
    pub fn validate(&self) -> Result<(), ServeError> {
        let finite = [
            self.reduce_bitrate_threshold,
            self.alert_threshold,
            self.hysteresis,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(ServeError::InvalidPolicy(
                "thresholds must be finite".into(),
            ));
        }
        if self.alert_threshold >= self.reduce_bitrate_threshold {
            return Err(ServeError::InvalidPolicy(format!(
                "alert threshold {} must be below reduce-bitrate threshold {}",
                self.alert_threshold, self.reduce_bitrate_threshold
            )));
        }
        if self.hysteresis < 0.0 {
            return Err(ServeError::InvalidPolicy(format!(
                "negative hysteresis {}",
                self.hysteresis
            )));
        }
        Ok(())
    }
}

/// Threshold the prediction. An action is held until the prediction clears
/// its threshold by more than the hysteresis.
pub fn decide(policy: &FeedbackPolicy, qoe_pred: f64, previous: Action) -> Action {
    let h = policy.hysteresis;
    if qoe_pred < policy.alert_threshold
        || (previous == Action::Alert && qoe_pred <= policy.alert_threshold + h)
    {
        Action::Alert
    } else if qoe_pred < policy.reduce_bitrate_threshold
        || (previous >= Action::ReduceBitrate && qoe_pred <= policy.reduce_bitrate_threshold + h)
    {
        Action::ReduceBitrate
    } else {
        Action::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub window: usize,
    pub feature: String,
    /// Contribution in VMAF units relative to an all-zero scaled input.
    pub attribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastDecision {
    /// End of the last context window; the forecast covers the next window.
    pub ts_ms: u64,
    pub horizon_s: u32,
    pub qoe_pred: f64,
    pub action: Action,
    /// Time from receiving the completing sample to the decision.
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explain: Option<Vec<ExplainEntry>>,
}

/// Time source for latency measurement.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() * 1e3
    }
}

/// Frozen time: every latency reads zero. Makes output reproducible.
#[derive(Clone, Copy, Debug, Default)]
pub struct FixedClock(pub f64);

impl Clock for FixedClock {
    fn now_ms(&self) -> f64 {
        self.0
    }
}

/// A bundle ready for inference. Shared read-only between streams.
#[derive(Debug)]
pub struct Forecaster {
    model: Model,
    scaler: ScalerStats,
    window_s: u32,
}

impl Forecaster {
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self, ServeError> {
        if bundle.context_len != CONTEXT_LEN {
            return Err(ServeError::InvalidConfig(format!(
                "bundle context {} differs from {CONTEXT_LEN}",
                bundle.context_len
            )));
        }
        let s = &bundle.scaler;
        if !(s.target_min.is_finite() && s.target_max.is_finite() && s.target_max > s.target_min) {
            return Err(ServeError::ScalerMissing);
        }
        Ok(Self {
            model: bundle.model()?,
            scaler: bundle.scaler.clone(),
            window_s: bundle.window_s,
        })
    }

    pub fn variant(&self) -> VariantId {
        self.model.variant()
    }

    pub fn window_s(&self) -> u32 {
        self.window_s
    }

    pub fn scaler(&self) -> &ScalerStats {
        &self.scaler
    }

    pub fn scale_context(&self, raw: &[[f64; N_FEATURES]]) -> Vec<[f64; N_FEATURES]> {
        raw.iter().map(|w| self.scaler.scale(w)).collect()
    }

    /// Next-window QoE in VMAF units from raw context windows.
    pub fn forecast(&self, raw: &[[f64; N_FEATURES]]) -> Result<f64, ServeError> {
        let scaled = self.scale_context(raw);
        let x = batch_inputs(std::iter::once(scaled.as_slice()))?;
        let y = self.model.predict(&x)?[0];
        Ok(self.scaler.inverse_target(y))
    }

    /// Largest integrated-gradient attributions, rescaled to VMAF units.
    pub fn explain(
        &self,
        raw: &[[f64; N_FEATURES]],
        k: usize,
        steps: usize,
    ) -> Result<Vec<ExplainEntry>, ServeError> {
        let scaled = self.scale_context(raw);
        let attr = integrated_gradients(&self.model, &scaled, None, steps)?;
        let range = self.scaler.target_max - self.scaler.target_min;
        Ok(top_k(&attr.values, k)
            .into_iter()
            .map(|t| ExplainEntry {
                window: t.window,
                feature: t.feature,
                attribution: t.value * range,
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub policy: FeedbackPolicy,
    /// Nominal sampling period of the input.
    pub tick_ms: u64,
    pub explain_on_alert: bool,
    pub ig_steps: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            policy: FeedbackPolicy::default(),
            tick_ms: 1000,
            explain_on_alert: false,
            ig_steps: DEFAULT_IG_STEPS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub none: u64,
    pub reduce_bitrate: u64,
    pub alert: u64,
}

impl ActionCounts {
    fn bump(&mut self, a: Action) {
        match a {
            Action::None => self.none += 1,
            Action::ReduceBitrate => self.reduce_bitrate += 1,
            Action::Alert => self.alert += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub ticks: u64,
    pub windows: u64,
    pub dropped_windows: u64,
    pub forecasts: u64,
    pub errors: u64,
    pub actions: ActionCounts,
}

/// One stream's state machine.
pub struct StreamState {
    forecaster: Arc<Forecaster>,
    config: ServeConfig,
    clock: Arc<dyn Clock>,
    window_ms: u64,
    expected: f64,
    current: Option<usize>,
    acc: WindowAccumulator,
    inband_qoe: Option<f64>,
    ring: VecDeque<[f64; N_FEATURES]>,
    prev_window: Option<usize>,
    prev_qoe: Option<f64>,
    last_pred: Option<f64>,
    last_ts: Option<u64>,
    last_action: Action,
    summary: StreamSummary,
}

impl StreamState {
    pub fn new(forecaster: Arc<Forecaster>, config: ServeConfig) -> Result<Self, ServeError> {
        config.policy.validate()?;
        let window_ms = u64::from(forecaster.window_s()) * 1000;
        if config.tick_ms == 0 || 2 * config.tick_ms > window_ms {
            return Err(ServeError::InvalidConfig(format!(
                "tick of {} ms does not fit a {window_ms} ms window",
                config.tick_ms
            )));
        }
        Ok(Self {
            expected: expected_ticks(forecaster.window_s(), config.tick_ms),
            forecaster,
            config,
            clock: Arc::new(SystemClock::default()),
            window_ms,
            current: None,
            acc: WindowAccumulator::default(),
            inband_qoe: None,
            ring: VecDeque::with_capacity(CONTEXT_LEN),
            prev_window: None,
            prev_qoe: None,
            last_pred: None,
            last_ts: None,
            last_action: Action::None,
            summary: StreamSummary::default(),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn summary(&self) -> &StreamSummary {
        &self.summary
    }

    /// Completed windows currently buffered.
    pub fn buffered(&self) -> usize {
        self.ring.len()
    }

    pub fn last_action(&self) -> Action {
        self.last_action
    }

    /// Feed one tick, optionally with the QoE measured for it.
    pub fn ingest(
        &mut self,
        sample: &TelemetrySample,
        qoe: Option<f64>,
    ) -> Result<Option<ForecastDecision>, ServeError> {
        let t0 = self.clock.now_ms();
        if let Some(last_ms) = self.last_ts {
            if sample.ts_ms <= last_ms {
                return Err(ServeError::OutOfOrderSample {
                    last_ms,
                    ts_ms: sample.ts_ms,
                });
            }
        }
        if let Some(q) = qoe {
            if !(q.is_finite() && (0.0..=100.0).contains(&q)) {
                return Err(ServeError::BadRecord {
                    line: 0,
                    message: format!("qoe {q} outside [0, 100]"),
                });
            }
        }
        let k = (sample.ts_ms / self.window_ms) as usize;
        let mut decision = None;
        if self.current.is_some_and(|c| c != k) {
            decision = self.close_window(t0)?;
        }
        self.current = Some(k);
        self.acc.push(sample);
        if qoe.is_some() {
            self.inband_qoe = qoe;
        }
        self.last_ts = Some(sample.ts_ms);
        self.summary.ticks += 1;
        if sample.ts_ms + self.config.tick_ms >= (k as u64 + 1) * self.window_ms {
            // a single tick never covers a window, so this cannot forecast
            // when a decision is already pending
            let late = self.close_window(t0)?;
            debug_assert!(decision.is_none() || late.is_none());
            decision = decision.or(late);
        }
        Ok(decision)
    }

    /// Close a trailing partial window at end of input.
    pub fn finish(&mut self) -> Result<Option<ForecastDecision>, ServeError> {
        let t0 = self.clock.now_ms();
        if self.current.is_some() {
            self.close_window(t0)
        } else {
            Ok(None)
        }
    }

    fn reset_chain(&mut self) {
        self.ring.clear();
        self.prev_window = None;
        self.prev_qoe = None;
        self.last_pred = None;
    }

    fn close_window(&mut self, t0: f64) -> Result<Option<ForecastDecision>, ServeError> {
        let Some(k) = self.current.take() else {
            return Ok(None);
        };
        let acc = std::mem::take(&mut self.acc);
        let inband = self.inband_qoe.take();
        self.summary.windows += 1;
        if !acc.is_covered(self.expected) {
            self.summary.dropped_windows += 1;
            self.reset_chain();
            return Ok(None);
        }
        if self.prev_window.is_none_or(|p| p + 1 != k) {
            self.reset_chain();
        }
        let qoe = inband
            .or(self.last_pred)
            .unwrap_or_else(|| qoe_oracle(acc.stats(), self.prev_qoe));
        if self.ring.len() == CONTEXT_LEN {
            self.ring.pop_front();
        }
        self.ring.push_back(acc.features(qoe));
        self.prev_window = Some(k);
        self.prev_qoe = Some(qoe);
        if self.ring.len() < CONTEXT_LEN {
            self.last_pred = None;
            return Ok(None);
        }
        let context: Vec<[f64; N_FEATURES]> = self.ring.iter().copied().collect();
        let qoe_pred = self.forecaster.forecast(&context)?;
        let action = decide(&self.config.policy, qoe_pred, self.last_action);
        let explain = if action == Action::Alert && self.config.explain_on_alert {
            Some(
                self.forecaster
                    .explain(&context, ALERT_TOP_K, self.config.ig_steps)?,
            )
        } else {
            None
        };
        self.last_pred = Some(qoe_pred);
        self.last_action = action;
        self.summary.forecasts += 1;
        self.summary.actions.bump(action);
        Ok(Some(ForecastDecision {
            ts_ms: (k as u64 + 1) * self.window_ms,
            horizon_s: self.forecaster.window_s(),
            qoe_pred,
            action,
            latency_ms: self.clock.now_ms() - t0,
            explain,
        }))
    }
}

fn parse_line(text: &str, line: usize) -> Result<(TelemetrySample, Option<f64>), ServeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ServeError::BadRecord {
        line,
        message: e.to_string(),
    })?;
    let (sample, _) = sample_from_json(&value, line)?;
    let qoe = match value.get("qoe") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| ServeError::BadRecord {
            line,
            message: "qoe is not a number".into(),
        })?),
    };
    Ok((sample, qoe))
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    line: usize,
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
enum Record<'a> {
    #[serde(rename = "error")]
    Error(ErrorBody<'a>),
    #[serde(rename = "summary")]
    Summary(StreamSummary),
}

fn error_record(line: usize, err: &ServeError) -> Record<'_> {
    let message = match err {
        ServeError::BadRecord { message, .. } => message.clone(),
        other => other.to_string(),
    };
    Record::Error(ErrorBody {
        line,
        kind: err.kind(),
        message,
    })
}

fn write_record(out: &mut impl Write, value: &impl Serialize) -> Result<(), ServeError> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Read NDJSON telemetry until end of input, writing one record per
/// decision and per rejected line, then a summary record. Only I/O
/// failures end the stream early.
pub fn run_stream(
    mut state: StreamState,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<StreamSummary, ServeError> {
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let result =
            parse_line(&text, line_no).and_then(|(sample, qoe)| state.ingest(&sample, qoe));
        match result {
            Ok(Some(decision)) => write_record(&mut output, &decision)?,
            Ok(None) => {}
            Err(ServeError::Io(e)) => return Err(ServeError::Io(e)),
            Err(e) => {
                log::debug!("line {line_no}: {e}");
                state.summary.errors += 1;
                write_record(&mut output, &error_record(line_no, &e))?;
            }
        }
    }
    match state.finish() {
        Ok(Some(decision)) => write_record(&mut output, &decision)?,
        Ok(None) => {}
        Err(e) => {
            state.summary.errors += 1;
            write_record(&mut output, &error_record(0, &e))?;
        }
    }
    let summary = state.summary;
    write_record(&mut output, &Record::Summary(summary))?;
    output.flush()?;
    Ok(summary)
}

/// Serve each TCP connection as an independent stream on its own thread.
/// Stops accepting after `max_connections` when given and waits for the
/// open streams to end.
pub fn serve_tcp(
    listener: TcpListener,
    forecaster: Arc<Forecaster>,
    config: ServeConfig,
    max_connections: Option<usize>,
) -> Result<(), ServeError> {
    config.policy.validate()?;
    let mut handles = Vec::new();
    for (n, conn) in listener.incoming().enumerate() {
        let conn = conn?;
        let peer = conn.peer_addr().ok();
        let state = StreamState::new(Arc::clone(&forecaster), config)?;
        handles.push(thread::spawn(move || {
            let reader = match conn.try_clone() {
                Ok(c) => BufReader::new(c),
                Err(e) => return log::warn!("{peer:?}: {e}"),
            };
            match run_stream(state, reader, &conn) {
                Ok(s) => log::info!("{peer:?}: {} forecasts, {} errors", s.forecasts, s.errors),
                Err(e) => log::warn!("{peer:?}: {e}"),
            }
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::fit_scaler;
    use crate::pipeline::WindowFeatures;
    use crate::zoo::{build_variant, BundleMeta};
    use proptest::prelude::*;

    const PRED_CASES: [(f64, Action, Action); 10] = [
        (80.0, Action::None, Action::None),
        (65.0, Action::None, Action::ReduceBitrate),
        (71.0, Action::ReduceBitrate, Action::ReduceBitrate),
        (73.0, Action::ReduceBitrate, Action::ReduceBitrate),
        (73.5, Action::ReduceBitrate, Action::None),
        (49.9, Action::None, Action::Alert),
        (52.0, Action::Alert, Action::Alert),
        (53.5, Action::Alert, Action::ReduceBitrate),
        (72.0, Action::Alert, Action::ReduceBitrate),
        (75.0, Action::Alert, Action::None),
    ];

    #[test]
    fn decide_examples() {
        let p = FeedbackPolicy::default();
        for (pred, prev, want) in PRED_CASES {
            assert_eq!(decide(&p, pred, prev), want, "pred {pred} prev {prev:?}");
        }
    }

    #[test]
    fn policy_validation() {
        assert!(FeedbackPolicy::default().validate().is_ok());
        let inverted = FeedbackPolicy {
            alert_threshold: 80.0,
            ..Default::default()
        };
        assert!(inverted.validate().is_err());
        let negative = FeedbackPolicy {
            hysteresis: -1.0,
            ..Default::default()
        };
        assert!(negative.validate().is_err());
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        prop_oneof![
            Just(Action::None),
            Just(Action::ReduceBitrate),
            Just(Action::Alert)
        ]
    }

    proptest! {
        #[test]
        fn lower_prediction_never_deescalates(
            a in 0.0..100.0f64,
            b in 0.0..100.0f64,
            prev in arb_action(),
            alert in 20.0..60.0f64,
            gap in 1.0..30.0f64,
            h in 0.0..10.0f64,
        ) {
            let p = FeedbackPolicy { alert_threshold: alert, reduce_bitrate_threshold: alert + gap, hysteresis: h };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(decide(&p, lo, prev) >= decide(&p, hi, prev));
        }

        #[test]
        fn without_hysteresis_history_is_irrelevant(pred in 0.0..100.0f64, prev in arb_action()) {
            prop_assume!(pred != 50.0 && pred != 70.0);
            let p = FeedbackPolicy { hysteresis: 0.0, ..Default::default() };
            prop_assert_eq!(decide(&p, pred, prev), decide(&p, pred, Action::None));
        }
    }

    fn forecaster(variant: VariantId) -> Arc<Forecaster> {
        let windows: Vec<WindowFeatures> = (0..4)
            .map(|i| WindowFeatures {
                window_index: i,
                start_ms: 0,
                features: [
                    i as f64 * 8.0,
                    5.0 + i as f64,
                    0.01 * i as f64,
                    20.0 * i as f64,
                    20.0 * i as f64,
                    25.0 * i as f64,
                ],
            })
            .collect();
        let scaler = fit_scaler(&windows).unwrap();
        let model = build_variant(variant, 3).unwrap();
        let bundle = ModelBundle::new(&model, scaler, 10, BundleMeta::default());
        Arc::new(Forecaster::from_bundle(&bundle).unwrap())
    }

    fn tick(ts_ms: u64) -> TelemetrySample {
        TelemetrySample {
            ts_ms,
            throughput_mbps: 12.0,
            jitter_ms: 25.0,
            loss_rate: 0.01,
            loss_count: 10,
            speed_kmh: 40.0,
        }
    }

    fn state(variant: VariantId, config: ServeConfig) -> StreamState {
        StreamState::new(forecaster(variant), config)
            .unwrap()
            .with_clock(Arc::new(FixedClock(0.0)))
    }

    #[test]
    fn first_decision_at_fifth_window() {
        let mut s = state(VariantId::GruBasic, ServeConfig::default());
        for t in 0..49 {
            assert!(
                s.ingest(&tick(t * 1000), None).unwrap().is_none(),
                "tick {t}"
            );
        }
        assert_eq!(s.buffered(), 4);
        let d = s.ingest(&tick(49_000), None).unwrap().expect("decision");
        assert_eq!(d.ts_ms, 50_000);
        assert_eq!(d.horizon_s, 10);
        assert_eq!(s.buffered(), CONTEXT_LEN);
        // then one per window
        let mut n = 0;
        for t in 50..100 {
            n += usize::from(s.ingest(&tick(t * 1000), None).unwrap().is_some());
            assert!(s.buffered() <= CONTEXT_LEN);
        }
        assert_eq!(n, 5);
    }

    #[test]
    fn out_of_order_leaves_state_unchanged() {
        let mut s = state(VariantId::GruBasic, ServeConfig::default());
        for t in 0..15 {
            s.ingest(&tick(t * 1000), None).unwrap();
        }
        let before = (*s.summary(), s.buffered(), s.acc, s.last_ts);
        for ts in [14_000, 3_000] {
            let err = s.ingest(&tick(ts), None).unwrap_err();
            assert!(matches!(
                err,
                ServeError::OutOfOrderSample {
                    last_ms: 14_000,
                    ..
                }
            ));
        }
        assert_eq!((*s.summary(), s.buffered(), s.acc, s.last_ts), before);
    }

    #[test]
    fn sparse_window_resets_context() {
        let mut s = state(VariantId::LinBasic, ServeConfig::default());
        for t in 0..40 {
            s.ingest(&tick(t * 1000), None).unwrap();
        }
        assert_eq!(s.buffered(), 4);
        // window 4 gets only 3 ticks
        for t in [40, 41, 42] {
            s.ingest(&tick(t * 1000), None).unwrap();
        }
        s.ingest(&tick(50_000), None).unwrap();
        assert_eq!(s.buffered(), 0);
        assert_eq!(s.summary().dropped_windows, 1);
    }

    #[test]
    fn empty_window_gap_resets_context() {
        let mut s = state(VariantId::LinBasic, ServeConfig::default());
        for t in (0..30).chain(40..50) {
            s.ingest(&tick(t * 1000), None).unwrap();
        }
        assert_eq!(s.buffered(), 1);
    }

    #[test]
    fn empty_input_gives_zero_summary() {
        let mut out = Vec::new();
        let summary = run_stream(
            state(VariantId::GruBasic, ServeConfig::default()),
            &b""[..],
            &mut out,
        )
        .unwrap();
        assert_eq!(summary, StreamSummary::default());
        let text = String::from_utf8(out).unwrap();
        let v: Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["summary"]["forecasts"], 0);
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn bad_lines_become_error_records() {
        let input = "{\"ts_ms\": 0}\nnot json\n{\"ts_ms\":0,\"throughput_mbps\":1,\"jitter_ms\":1,\"loss_rate\":0,\"loss_count\":0,\"speed_kmh\":1,\"qoe\":\"x\"}\n";
        let mut out = Vec::new();
        let summary = run_stream(
            state(VariantId::GruBasic, ServeConfig::default()),
            input.as_bytes(),
            &mut out,
        )
        .unwrap();
        assert_eq!(summary.errors, 3);
        let lines: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["error"]["line"], 1);
        assert_eq!(lines[1]["error"]["kind"], "bad_record");
        assert_eq!(lines[2]["error"]["line"], 3);
    }

    #[test]
    fn alerts_carry_three_attributions() {
        // every forecast alerts under an unreachable threshold
        let policy = FeedbackPolicy {
            alert_threshold: 1e6,
            reduce_bitrate_threshold: 2e6,
            hysteresis: 0.0,
        };
        let config = ServeConfig {
            policy,
            explain_on_alert: true,
            ..Default::default()
        };
        for variant in [VariantId::GruBasic, VariantId::LinBasic] {
            let mut s = state(variant, config);
            let mut alerts = 0;
            for t in 0..80 {
                if let Some(d) = s.ingest(&tick(t * 1000), None).unwrap() {
                    assert_eq!(d.action, Action::Alert);
                    assert_eq!(d.explain.as_ref().map(Vec::len), Some(ALERT_TOP_K));
                    alerts += 1;
                }
            }
            assert_eq!(alerts, 4);
        }
        // no explanation without the flag
        let mut s = state(
            VariantId::GruBasic,
            ServeConfig {
                explain_on_alert: false,
                ..config
            },
        );
        for t in 0..50 {
            if let Some(d) = s.ingest(&tick(t * 1000), None).unwrap() {
                assert!(d.explain.is_none());
            }
        }
    }

    #[test]
    fn rejects_degenerate_scaler_and_bad_tick() {
        let model = build_variant(VariantId::GruBasic, 1).unwrap();
        let w = WindowFeatures {
            window_index: 0,
            start_ms: 0,
            features: [1.0; N_FEATURES],
        };
        let scaler = fit_scaler([&w, &w]).unwrap();
        let bundle = ModelBundle::new(&model, scaler, 10, BundleMeta::default());
        assert!(matches!(
            Forecaster::from_bundle(&bundle),
            Err(ServeError::ScalerMissing)
        ));
        let f = forecaster(VariantId::GruBasic);
        assert!(StreamState::new(
            f,
            ServeConfig {
                tick_ms: 6000,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn decision_record_shape() {
        let d = ForecastDecision {
            ts_ms: 50_000,
            horizon_s: 10,
            qoe_pred: 61.25,
            action: Action::ReduceBitrate,
            latency_ms: 0.0,
            explain: None,
        };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"ts_ms":50000,"horizon_s":10,"qoe_pred":61.25,"action":"reduce_bitrate","latency_ms":0.0}"#
        );
    }
}
