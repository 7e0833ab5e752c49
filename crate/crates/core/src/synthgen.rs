//! Seeded synthetic telemetry inside a fixed impairment envelope.
//!
//! Link conditions move between four states (good, degraded, handover,
//! congested) in gamma-distributed episodes. Each state owns a sub-range of
//! every metric, nested inside the global envelope. Entering a state draws an
//! episode level per metric; the link drops toward it quickly, recovers
//! slowly, and ticks scatter around the result. Windows are labeled with [`qoe_oracle`]
//! plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::derive_seed;
use crate::telemetry::{TelemetryError, TelemetrySample, Trace, WindowLabel};

/// Nominal packet rate used to turn a loss fraction into a count.
pub const PACKETS_PER_SECOND: f64 = 1000.0;
/// Standard deviation of the per-tick speed random walk, km/h.
pub const SPEED_STEP_SIGMA: f64 = 2.0;
/// Probability weight of moving into `Handover` at full speed, per state exit.
const HANDOVER_AT_FULL_SPEED: f64 = 0.5;
/// Gamma shape of episode durations; the mean stays `episode_mean_len_s`.
pub const DWELL_SHAPE: f64 = 8.0;
/// Relaxation time constants toward the episode level, seconds: impairments
/// set in quickly and clear slowly.
pub const ONSET_TAU_S: f64 = 2.0;
pub const RECOVERY_TAU_S: f64 = 30.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("span [{start_s}, {end_s}) s outside trace of {duration_s} s")]
    SpanOutOfRange {
        start_s: u64,
        end_s: u64,
        duration_s: u64,
    },
    #[error(transparent)]
    Trace(#[from] TelemetryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub duration_s: u32,
    pub tick_s: f64,
    pub window_s: u32,
    /// Packet loss in percent.
    pub loss_pct_range: (f64, f64),
    pub jitter_ms_range: (f64, f64),
    pub throughput_mbps_range: (f64, f64),
    pub speed_kmh_range: (f64, f64),
    pub episode_mean_len_s: f64,
    /// Label noise standard deviation in VMAF units.
    pub label_noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 600,
            tick_s: 1.0,
            window_s: 10,
            loss_pct_range: (0.0, 5.0),
            jitter_ms_range: (10.0, 100.0),
            throughput_mbps_range: (5.0, 50.0),
            speed_kmh_range: (0.0, 80.0),
            episode_mean_len_s: 30.0,
            label_noise_sigma: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(self.tick_s.is_finite() && self.tick_s > 0.0) {
            return bad(format!("tick_s {}", self.tick_s));
        }
        if self.window_s == 0 {
            return bad("window_s must be positive".into());
        }
        if self.duration_s < self.window_s {
            return bad(format!(
                "duration {} s shorter than one {} s window",
                self.duration_s, self.window_s
            ));
        }
        for (name, (lo, hi)) in [
            ("loss_pct_range", self.loss_pct_range),
            ("jitter_ms_range", self.jitter_ms_range),
            ("throughput_mbps_range", self.throughput_mbps_range),
            ("speed_kmh_range", self.speed_kmh_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return bad(format!("{name} ({lo}, {hi})"));
            }
        }
        if self.loss_pct_range.1 > 100.0 {
            return bad("loss above 100%".into());
        }
        if !(self.episode_mean_len_s.is_finite() && self.episode_mean_len_s > 0.0) {
            return bad(format!("episode_mean_len_s {}", self.episode_mean_len_s));
        }
        if !(self.label_noise_sigma.is_finite() && self.label_noise_sigma >= 0.0) {
            return bad(format!("label_noise_sigma {}", self.label_noise_sigma));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (f64::from(self.duration_s) / self.tick_s).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Good,
    Degraded,
    Handover,
    Congested,
}

/// Fractional position `[lo, hi]` inside a global metric range.
type Frac = (f64, f64);

impl LinkState {
    pub const ALL: [LinkState; 4] = [
        LinkState::Good,
        LinkState::Degraded,
        LinkState::Handover,
        LinkState::Congested,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Sub-range fractions for (throughput, loss, jitter).
    fn fractions(self) -> [Frac; 3] {
        match self {
            LinkState::Good => [(0.45, 1.0), (0.0, 0.1), (0.0, 0.2)],
            LinkState::Degraded => [(0.2, 0.55), (0.1, 0.4), (0.15, 0.5)],
            LinkState::Handover => [(0.0, 0.25), (0.4, 1.0), (0.45, 1.0)],
            LinkState::Congested => [(0.0, 0.15), (0.2, 0.7), (0.35, 0.9)],
        }
    }

    /// Relative preference when leaving another state for this one.
    fn entry_weight(self) -> f64 {
        match self {
            LinkState::Good => 3.0,
            LinkState::Degraded => 2.0,
            LinkState::Handover => 0.0,
            LinkState::Congested => 1.0,
        }
    }

    /// Absolute (throughput, loss_pct, jitter) sub-ranges under `config`.
    pub fn sub_ranges(self, config: &GeneratorConfig) -> [(f64, f64); 3] {
        let globals = [
            config.throughput_mbps_range,
            config.loss_pct_range,
            config.jitter_ms_range,
        ];
        let mut out = [(0.0, 0.0); 3];
        for (o, ((glo, ghi), (flo, fhi))) in
            out.iter_mut().zip(globals.iter().zip(self.fractions()))
        {
            *o = (glo + flo * (ghi - glo), glo + fhi * (ghi - glo));
        }
        out
    }
}

/// State chosen when an episode ends: zero diagonal, rows sum to 1.
pub fn jump_matrix(speed_kmh: f64) -> [[f64; 4]; 4] {
    let handover = HANDOVER_AT_FULL_SPEED * (speed_kmh / 80.0).clamp(0.0, 1.0);
    let mut m = [[0.0; 4]; 4];
    for from in LinkState::ALL {
        let row = &mut m[from.index()];
        let h_share = if from == LinkState::Handover {
            0.0
        } else {
            handover
        };
        row[LinkState::Handover.index()] = h_share;
        let others: Vec<LinkState> = LinkState::ALL
            .into_iter()
            .filter(|&s| s != from && s != LinkState::Handover)
            .collect();
        let total: f64 = others.iter().map(|s| s.entry_weight()).sum();
        for s in others {
            row[s.index()] = (1.0 - h_share) * s.entry_weight() / total;
        }
    }
    m
}

/// Row-stochastic one-tick transition matrix of the equivalent memoryless
/// chain: stay with probability `1 - tick/mean`, otherwise jump.
pub fn transition_matrix(tick_s: f64, episode_mean_len_s: f64, speed_kmh: f64) -> [[f64; 4]; 4] {
    let leave = (tick_s / episode_mean_len_s).min(1.0);
    let mut m = jump_matrix(speed_kmh);
    for (i, row) in m.iter_mut().enumerate() {
        for (j, p) in row.iter_mut().enumerate() {
            *p = if i == j { 1.0 - leave } else { leave * *p };
        }
    }
    m
}

/// Per-window means consumed by the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    pub thr_mbps: f64,
    pub loss_pct: f64,
    pub jitter_ms: f64,
}

/// Closed-form QoE label on the 0-100 scale, optionally smoothed with the
/// previous window's value. Non-decreasing in throughput, non-increasing in
/// loss and jitter.
pub fn qoe_oracle(stats: WindowStats, prev_qoe: Option<f64>) -> f64 {
    let raw = 100.0
        * (stats.thr_mbps / 25.0).clamp(0.0, 1.0)
        * (-0.35 * stats.loss_pct).exp()
        * (-0.01 * (stats.jitter_ms - 20.0).max(0.0)).exp();
    let q = match prev_qoe {
        None => raw,
        Some(p) => 0.7 * raw + 0.3 * p,
    };
    q.clamp(0.0, 100.0)
}

/// Means of the samples falling in each `window_s` window; `None` for empty
/// windows.
pub fn window_stats(
    samples: &[TelemetrySample],
    window_s: u32,
    n_windows: usize,
) -> Vec<Option<WindowStats>> {
    let w = u64::from(window_s) * 1000;
    let mut acc = vec![(0.0, 0.0, 0.0, 0usize); n_windows];
    for s in samples {
        let k = (s.ts_ms / w) as usize;
        if let Some(a) = acc.get_mut(k) {
            a.0 += s.throughput_mbps;
            a.1 += s.loss_rate;
            a.2 += s.jitter_ms;
            a.3 += 1;
        }
    }
    acc.into_iter()
        .map(|(t, l, j, n)| {
            (n > 0).then(|| {
                let n = n as f64;
                WindowStats {
                    thr_mbps: t / n,
                    loss_pct: 100.0 * l / n,
                    jitter_ms: j / n,
                }
            })
        })
        .collect()
}

/// Noise-free oracle labels, chained through the smoothing term. A window
/// without samples restarts the chain.
pub fn clean_labels(
    samples: &[TelemetrySample],
    window_s: u32,
    n_windows: usize,
) -> Vec<Option<f64>> {
    let mut prev = None;
    window_stats(samples, window_s, n_windows)
        .into_iter()
        .map(|s| {
            let q = s.map(|s| qoe_oracle(s, prev));
            prev = q;
            q
        })
        .collect()
}

struct Episode {
    levels: [f64; 3],
}

impl Episode {
    fn draw(state: LinkState, config: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut levels = [0.0; 3];
        for (l, (lo, hi)) in levels.iter_mut().zip(state.sub_ranges(config)) {
            *l = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
        }
        Self { levels }
    }

    /// One tick: (throughput, loss_pct, jitter), scattered around the levels
    /// by up to 10% of the sub-range width and clamped into it.
    fn tick(&self, state: LinkState, config: &GeneratorConfig, rng: &mut impl Rng) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ((o, level), (lo, hi)) in out
            .iter_mut()
            .zip(self.levels)
            .zip(state.sub_ranges(config))
        {
            let spread = 0.1 * (hi - lo);
            let v = if spread > 0.0 {
                level + rng.random_range(-spread..=spread)
            } else {
                level
            };
            *o = v.clamp(lo, hi);
        }
        out
    }
}

fn to_sample(ts_ms: u64, metrics: [f64; 3], speed_kmh: f64) -> TelemetrySample {
    let loss_rate = metrics[1] / 100.0;
    TelemetrySample {
        ts_ms,
        throughput_mbps: metrics[0],
        jitter_ms: metrics[2],
        loss_rate,
        loss_count: (loss_rate * PACKETS_PER_SECOND).round() as u64,
        speed_kmh,
    }
}

fn pick(row: &[f64; 4], u: f64) -> LinkState {
    let mut acc = 0.0;
    for s in LinkState::ALL {
        acc += row[s.index()];
        if u < acc {
            return s;
        }
    }
    LinkState::Good
}

/// Label every full window: oracle on the window means, plus Gaussian noise,
/// clamped to [0, 100].
fn label_windows(samples: &[TelemetrySample], config: &GeneratorConfig) -> Vec<WindowLabel> {
    let n_windows = (config.duration_s / config.window_s) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "labels"));
    let noise = Normal::new(0.0, config.label_noise_sigma).expect("validated sigma");
    clean_labels(samples, config.window_s, n_windows)
        .into_iter()
        .enumerate()
        .filter_map(|(window_index, q)| {
            let e = noise.sample(&mut rng);
            q.map(|q| WindowLabel {
                window_index,
                qoe: (q + e).clamp(0.0, 100.0),
            })
        })
        .collect()
}

pub fn generate_trace(config: &GeneratorConfig) -> Result<Trace, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "telemetry"));
    let (smin, smax) = config.speed_kmh_range;
    let step = Normal::new(0.0, SPEED_STEP_SIGMA).expect("finite sigma");
    let tick_ms = (config.tick_s * 1000.0).round() as u64;

    let dwell_dist = Gamma::new(DWELL_SHAPE, config.episode_mean_len_s / DWELL_SHAPE)
        .expect("validated episode length");
    let onset = 1.0 - (-config.tick_s / ONSET_TAU_S).exp();
    let recovery = 1.0 - (-config.tick_s / RECOVERY_TAU_S).exp();

    let mut speed = if smax > smin {
        rng.random_range(smin..=smax)
    } else {
        smin
    };
    let mut state = LinkState::Good;
    let mut episode = Episode::draw(state, config, &mut rng);
    let mut current: Option<[f64; 3]> = None;
    let mut elapsed = 0.0;
    let mut dwell = dwell_dist.sample(&mut rng);
    let mut samples = Vec::with_capacity(config.sample_count());
    for i in 0..config.sample_count() {
        if i > 0 {
            speed = (speed + step.sample(&mut rng)).clamp(smin, smax);
            elapsed += config.tick_s;
            if elapsed >= dwell {
                state = pick(&jump_matrix(speed)[state.index()], rng.random::<f64>());
                episode = Episode::draw(state, config, &mut rng);
                elapsed = 0.0;
                dwell = dwell_dist.sample(&mut rng);
            }
        }
        let target = episode.tick(state, config, &mut rng);
        let metrics = match current {
            None => target,
            Some(c) => std::array::from_fn(|k| {
                // throughput falling, or loss and jitter rising, is an onset
                let worse = if k == 0 {
                    target[k] < c[k]
                } else {
                    target[k] > c[k]
                };
                let a = if worse { onset } else { recovery };
                c[k] + a * (target[k] - c[k])
            }),
        };
        current = Some(metrics);
        samples.push(to_sample(i as u64 * tick_ms, metrics, speed));
    }
    let labels = label_windows(&samples, config);
    Ok(Trace::new(samples, config.tick_s, Some(labels))?)
}

/// `count` independent traces; trace `i` uses a seed derived from
/// `config.seed` and `i`.
pub fn generate_traces(config: &GeneratorConfig, count: usize) -> Result<Vec<Trace>, SynthError> {
    (0..count)
        .map(|i| {
            generate_trace(&GeneratorConfig {
                seed: derive_seed(config.seed, &format!("trace-{i}")),
                ..config.clone()
            })
        })
        .collect()
}

/// Re-draw the samples in `[start_s, start_s + len_s)` from `state`'s
/// sub-ranges. Samples outside the span are untouched; labels move by the
/// change in the noise-free oracle chain.
pub fn inject_episode(
    trace: &Trace,
    start_s: u64,
    len_s: u64,
    state: LinkState,
    seed: u64,
    config: &GeneratorConfig,
) -> Result<Trace, SynthError> {
    let duration_s = trace.duration_ms() / 1000;
    if start_s + len_s > duration_s || start_s >= duration_s {
        return Err(SynthError::SpanOutOfRange {
            start_s,
            end_s: start_s + len_s,
            duration_s,
        });
    }
    if len_s == 0 {
        return Ok(trace.clone());
    }
    let (lo_ms, hi_ms) = (start_s * 1000, (start_s + len_s) * 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inject"));
    let episode = Episode::draw(state, config, &mut rng);
    let samples: Vec<TelemetrySample> = trace
        .samples()
        .iter()
        .map(|s| {
            if (lo_ms..hi_ms).contains(&s.ts_ms) {
                to_sample(s.ts_ms, episode.tick(state, config, &mut rng), s.speed_kmh)
            } else {
                *s
            }
        })
        .collect();
    let labels = trace.labels().map(|labels| {
        let n = trace.window_count(config.window_s);
        let before = clean_labels(trace.samples(), config.window_s, n);
        let after = clean_labels(&samples, config.window_s, n);
        labels
            .iter()
            .map(
                |l| match (before.get(l.window_index), after.get(l.window_index)) {
                    (Some(Some(b)), Some(Some(a))) if a != b => WindowLabel {
                        window_index: l.window_index,
                        qoe: (l.qoe + (a - b)).clamp(0.0, 100.0),
                    },
                    _ => *l,
                },
            )
            .collect()
    });
    Ok(Trace::new(samples, trace.tick_s(), labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(thr: f64, loss: f64, jit: f64) -> WindowStats {
        WindowStats {
            thr_mbps: thr,
            loss_pct: loss,
            jitter_ms: jit,
        }
    }

    #[test]
    fn oracle_spot_values() {
        assert!((qoe_oracle(stats(50.0, 0.0, 10.0), None) - 100.0).abs() < 1e-12);
        // 100 * exp(-1.75) evaluated independently
        let expected = 100.0 * (-1.75f64).exp();
        assert!((expected - 17.377).abs() < 1e-3);
        assert!((qoe_oracle(stats(50.0, 5.0, 10.0), None) - expected).abs() < 1e-12);
        assert!((qoe_oracle(stats(5.0, 0.0, 20.0), None) - 20.0).abs() < 1e-12);
        assert!((qoe_oracle(stats(5.0, 0.0, 20.0), Some(100.0)) - 44.0).abs() < 1e-12);
    }

    #[test]
    fn default_trace_shape_and_envelope() {
        let config = GeneratorConfig::default();
        let trace = generate_trace(&config).unwrap();
        assert_eq!(trace.samples().len(), 600);
        assert_eq!(trace.labels().unwrap().len(), 60);
        assert!(trace.samples().iter().all(|s| s.loss_rate <= 0.05));
    }

    #[test]
    fn generation_is_deterministic() {
        let config = GeneratorConfig::default();
        assert_eq!(
            generate_trace(&config).unwrap(),
            generate_trace(&config).unwrap()
        );
        let other = GeneratorConfig {
            seed: 2,
            ..config.clone()
        };
        assert_ne!(
            generate_trace(&config).unwrap(),
            generate_trace(&other).unwrap()
        );
    }

    #[test]
    fn too_short_for_a_window() {
        let config = GeneratorConfig {
            duration_s: 9,
            ..Default::default()
        };
        assert!(matches!(
            generate_trace(&config),
            Err(SynthError::InvalidConfig(_))
        ));
    }

    #[test]
    fn sub_ranges_nested_in_envelope() {
        let config = GeneratorConfig::default();
        for s in LinkState::ALL {
            let [thr, loss, jit] = s.sub_ranges(&config);
            assert!(thr.0 >= 5.0 && thr.1 <= 50.0 && thr.0 < thr.1);
            assert!(loss.0 >= 0.0 && loss.1 <= 5.0 && loss.0 < loss.1);
            assert!(jit.0 >= 10.0 && jit.1 <= 100.0 && jit.0 < jit.1);
        }
    }

    #[test]
    fn handover_probability_linear_in_speed() {
        let p = |v: f64| transition_matrix(1.0, 30.0, v)[0][LinkState::Handover.index()];
        assert_eq!(p(0.0), 0.0);
        assert!((p(40.0) - 0.5 * p(80.0)).abs() < 1e-15);
    }

    #[test]
    fn congested_injection_lowers_throughput() {
        let config = GeneratorConfig::default();
        let trace = generate_trace(&config).unwrap();
        let span_mean = |t: &Trace| {
            let v: Vec<f64> = t.samples()[100..130]
                .iter()
                .map(|s| s.throughput_mbps)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        // start from a trace whose span is in good condition
        let good = inject_episode(&trace, 100, 30, LinkState::Good, 3, &config).unwrap();
        let bad = inject_episode(&good, 100, 30, LinkState::Congested, 4, &config).unwrap();
        assert!(span_mean(&bad) < span_mean(&good));
        assert_eq!(&bad.samples()[..100], &good.samples()[..100]);
        assert_eq!(&bad.samples()[130..], &good.samples()[130..]);
        // windows 10..=12 overlap the span; window 9 and earlier keep their labels
        let (lg, lb) = (good.labels().unwrap(), bad.labels().unwrap());
        assert_eq!(&lg[..10], &lb[..10]);
        assert!(lb[10].qoe < lg[10].qoe);
    }

    #[test]
    fn empty_and_out_of_range_spans() {
        let config = GeneratorConfig::default();
        let trace = generate_trace(&config).unwrap();
        assert_eq!(
            inject_episode(&trace, 50, 0, LinkState::Handover, 1, &config).unwrap(),
            trace
        );
        assert!(matches!(
            inject_episode(&trace, 700, 10, LinkState::Handover, 1, &config),
            Err(SynthError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn previous_window_changes_next_label() {
        // noise-free chain: window 1's label moves when only window 0 changes
        let mk = |thr0: f64| -> Vec<TelemetrySample> {
            (0..20)
                .map(|i| {
                    to_sample(
                        i * 1000,
                        [if i < 10 { thr0 } else { 20.0 }, 1.0, 30.0],
                        10.0,
                    )
                })
                .collect()
        };
        let a = clean_labels(&mk(40.0), 10, 2);
        let b = clean_labels(&mk(10.0), 10, 2);
        assert_ne!(a[1], b[1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn samples_stay_in_envelope(seed in any::<u64>()) {
            let config = GeneratorConfig { seed, duration_s: 120, ..Default::default() };
            let trace = generate_trace(&config).unwrap();
            for s in trace.samples() {
                prop_assert!((5.0..=50.0).contains(&s.throughput_mbps));
                prop_assert!((10.0..=100.0).contains(&s.jitter_ms));
                prop_assert!((0.0..=0.05).contains(&s.loss_rate));
                prop_assert!((0.0..=80.0).contains(&s.speed_kmh));
            }
            for l in trace.labels().unwrap() {
                prop_assert!((0.0..=100.0).contains(&l.qoe));
            }
        }

        #[test]
        fn transition_rows_are_stochastic(speed in 0.0f64..80.0, tick in 0.1f64..5.0, len in 1.0f64..100.0) {
            for row in transition_matrix(tick, len, speed) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn oracle_monotone_per_coordinate(
            thr in 0.0f64..60.0, loss in 0.0f64..6.0, jit in 0.0f64..120.0,
            d in 0.0f64..20.0, prev in prop::option::of(0.0f64..100.0),
        ) {
            let base = qoe_oracle(stats(thr, loss, jit), prev);
            prop_assert!(qoe_oracle(stats(thr + d, loss, jit), prev) >= base);
            prop_assert!(qoe_oracle(stats(thr, loss + d, jit), prev) <= base);
            prop_assert!(qoe_oracle(stats(thr, loss, jit + d), prev) <= base);
            prop_assert!((0.0..=100.0).contains(&base));
        }
    }
}
