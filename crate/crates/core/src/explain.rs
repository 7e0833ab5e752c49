//! Post-hoc explanations of single forecasts: integrated gradients,
//! attention weights and a local linear surrogate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{NnError, Tape, Tensor};
use crate::pipeline::SampleOrigin;
#[cfg(test)]
use crate::zoo::build_variant;
use crate::zoo::{batch_inputs, Architecture, Mode, Model, VariantId, ZooError};
use crate::{CONTEXT_LEN, FEATURE_NAMES, N_FEATURES};

/// Printed next to every attention-based explanation.
pub const ATTENTION_DISCLAIMER: &str =
    "Caution: raw attention weights may not perfectly align with causal explanations.";

pub const DEFAULT_IG_STEPS: usize = 64;
/// Integration points evaluated per forward/backward pass.
const IG_CHUNK: usize = 128;

pub type Window = [f64; N_FEATURES];
pub type Matrix = [[f64; N_FEATURES]; CONTEXT_LEN];

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("{0} has no attention component")]
    NoAttentionComponent(VariantId),
    #[error("perturbations are degenerate: {0}")]
    DegeneratePerturbations(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    IntegratedGradients,
    Attention,
    Lime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Window by feature, in scaled input space.
    pub values: Matrix,
    pub prediction: f64,
    pub baseline_prediction: f64,
    /// `|sum(values) - (prediction - baseline_prediction)|`.
    pub completeness_gap: f64,
    pub baseline: String,
    /// Riemann steps; 0 when the attribution is closed-form.
    pub steps: usize,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.values.iter().flatten().sum()
    }

    /// Gap relative to the prediction delta; 0 when both vanish.
    pub fn relative_gap(&self) -> f64 {
        let delta = (self.prediction - self.baseline_prediction).abs();
        if delta == 0.0 {
            if self.completeness_gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.completeness_gap / delta
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionMap {
    /// One weight per context window.
    Recurrent { weights: Vec<f64> },
    /// `heads` row-stochastic 5x5 matrices (query by key).
    Transformer { heads: Vec<Vec<Vec<f64>>> },
}

impl AttentionMap {
    pub fn rows(&self) -> Vec<&[f64]> {
        match self {
            Self::Recurrent { weights } => vec![weights.as_slice()],
            Self::Transformer { heads } => heads.iter().flatten().map(Vec::as_slice).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub samples: usize,
    pub sigma: f64,
    pub kernel_width: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            sigma: 0.1,
            kernel_width: 0.75,
            ridge: 1e-3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSurrogate {
    /// Flattened window-major coefficients.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Kernel-weighted coefficient of determination on the perturbation set.
    pub r2: f64,
    pub kernel_width: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub window: usize,
    pub feature: String,
    pub value: f64,
}

/// The explanation output document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub variant_id: VariantId,
    pub input_origin: Option<SampleOrigin>,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributions: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionMap>,
    pub top_k: Vec<TopK>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completeness_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disclaimer: Option<String>,
}

impl Explanation {
    pub fn from_attribution(
        variant_id: VariantId,
        origin: Option<SampleOrigin>,
        a: &Attribution,
        k: usize,
    ) -> Self {
        Self {
            variant_id,
            input_origin: origin,
            method: Method::IntegratedGradients,
            attributions: Some(a.values),
            attention: None,
            top_k: top_k(&a.values, k),
            completeness_gap: Some(a.completeness_gap),
            r2: None,
            disclaimer: None,
        }
    }

    pub fn from_attention(
        variant_id: VariantId,
        origin: Option<SampleOrigin>,
        map: AttentionMap,
    ) -> Self {
        Self {
            variant_id,
            input_origin: origin,
            method: Method::Attention,
            attributions: None,
            attention: Some(map),
            top_k: Vec::new(),
            completeness_gap: None,
            r2: None,
            disclaimer: Some(ATTENTION_DISCLAIMER.to_string()),
        }
    }

    pub fn from_surrogate(
        variant_id: VariantId,
        origin: Option<SampleOrigin>,
        s: &LocalSurrogate,
        k: usize,
    ) -> Self {
        let values = to_matrix(&s.coefficients);
        Self {
            variant_id,
            input_origin: origin,
            method: Method::Lime,
            attributions: Some(values),
            attention: None,
            top_k: top_k(&values, k),
            completeness_gap: None,
            r2: Some(s.r2),
            disclaimer: None,
        }
    }
}

fn to_matrix(flat: &[f64]) -> Matrix {
    let mut m = [[0.0; N_FEATURES]; CONTEXT_LEN];
    for (i, v) in flat.iter().enumerate().take(CONTEXT_LEN * N_FEATURES) {
        m[i / N_FEATURES][i % N_FEATURES] = *v;
    }
    m
}

/// The `k` entries of largest magnitude, largest first; ties keep
/// window-major order.
pub fn top_k(values: &Matrix, k: usize) -> Vec<TopK> {
    let mut cells: Vec<(usize, usize, f64)> = values
        .iter()
        .enumerate()
        .flat_map(|(w, row)| row.iter().enumerate().map(move |(f, &v)| (w, f, v)))
        .collect();
    cells.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
    cells
        .into_iter()
        .take(k)
        .map(|(window, f, value)| TopK {
            window,
            feature: FEATURE_NAMES[f].to_string(),
            value,
        })
        .collect()
}

fn check_context(x: &[Window]) -> Result<(), ExplainError> {
    if x.len() != CONTEXT_LEN {
        return Err(ExplainError::InvalidArgument(format!(
            "context of {} windows",
            x.len()
        )));
    }
    Ok(())
}

fn predict_one(model: &Model, x: &[Window]) -> Result<f64, ExplainError> {
    Ok(model.predict(&batch_inputs([x])?)?[0])
}

/// Integrated gradients from `baseline` (all-zero scaled input when `None`)
/// to `x`, midpoint rule with `steps` points. Linear variants get the exact
/// attribution `w_i * (x_i - x'_i)`.
pub fn integrated_gradients(
    model: &Model,
    x: &[Window],
    baseline: Option<&[Window]>,
    steps: usize,
) -> Result<Attribution, ExplainError> {
    check_context(x)?;
    let zero = [[0.0; N_FEATURES]; CONTEXT_LEN];
    let (base, label) = match baseline {
        Some(b) => {
            check_context(b)?;
            (b, "custom")
        }
        None => (&zero[..], "zero"),
    };
    if steps == 0 {
        return Err(ExplainError::InvalidArgument(
            "steps must be positive".into(),
        ));
    }
    let prediction = predict_one(model, x)?;
    let baseline_prediction = predict_one(model, base)?;
    let flat_x: Vec<f64> = x.iter().flatten().copied().collect();
    let flat_b: Vec<f64> = base.iter().flatten().copied().collect();
    let diff: Vec<f64> = flat_x.iter().zip(&flat_b).map(|(a, b)| a - b).collect();

    let (flat, used_steps) = if let Architecture::Linear { .. } = model.variant().architecture() {
        let w = model.params().get("weight").expect("linear weight").data();
        (
            diff.iter().zip(w).map(|(d, w)| d * w).collect::<Vec<f64>>(),
            0,
        )
    } else {
        let mut grad_sum = vec![0.0; diff.len()];
        let n = CONTEXT_LEN * N_FEATURES;
        let mut k = 0;
        while k < steps {
            let m = IG_CHUNK.min(steps - k);
            let mut data = Vec::with_capacity(m * n);
            for j in k..k + m {
                let alpha = (j as f64 + 0.5) / steps as f64;
                data.extend(flat_b.iter().zip(&diff).map(|(b, d)| b + alpha * d));
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![m, CONTEXT_LEN, N_FEATURES], data)?);
            let (out, _) = model.forward(&mut tape, xv, Mode::Eval)?;
            // rows are independent, so the gradient of the sum is per-row
            let total = tape.sum(out.pred);
            let grads = tape.backward(total)?;
            let g = grads.tensor(xv);
            for row in g.data().chunks(n) {
                for (s, v) in grad_sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            k += m;
        }
        let flat = diff
            .iter()
            .zip(&grad_sum)
            .map(|(d, g)| d * g / steps as f64)
            .collect();
        (flat, steps)
    };
    let values = to_matrix(&flat);
    let sum: f64 = flat.iter().sum();
    Ok(Attribution {
        values,
        prediction,
        baseline_prediction,
        completeness_gap: (sum - (prediction - baseline_prediction)).abs(),
        baseline: label.to_string(),
        steps: used_steps,
    })
}

/// Attention weights from the inference pass on `x`, with the prediction
/// they accompany.
pub fn attention_map(model: &Model, x: &[Window]) -> Result<(f64, AttentionMap), ExplainError> {
    check_context(x)?;
    let (pred, attention) = model.predict_with_attention(&batch_inputs([x])?)?;
    let a = attention.ok_or(ExplainError::NoAttentionComponent(model.variant()))?;
    let map = match *a.shape() {
        [1, t] => AttentionMap::Recurrent {
            weights: a.data()[..t].to_vec(),
        },
        [1, h, q, k] => AttentionMap::Transformer {
            heads: (0..h)
                .map(|hi| {
                    (0..q)
                        .map(|qi| a.data()[(hi * q + qi) * k..(hi * q + qi + 1) * k].to_vec())
                        .collect()
                })
                .collect(),
        },
        ref s => {
            return Err(ExplainError::InvalidArgument(format!(
                "attention of shape {s:?}"
            )));
        }
    };
    Ok((pred[0], map))
}

/// Kernel-weighted ridge surrogate fitted to Gaussian perturbations of the
/// flattened input.
pub fn lime_local(
    model: &Model,
    x: &[Window],
    config: &LimeConfig,
) -> Result<LocalSurrogate, ExplainError> {
    check_context(x)?;
    if !(config.sigma.is_finite() && config.sigma > 0.0) {
        return Err(ExplainError::DegeneratePerturbations(format!(
            "sigma {}",
            config.sigma
        )));
    }
    if config.samples < 2 {
        return Err(ExplainError::DegeneratePerturbations(format!(
            "{} samples",
            config.samples
        )));
    }
    if !(config.kernel_width.is_finite() && config.kernel_width > 0.0) {
        return Err(ExplainError::InvalidArgument(format!(
            "kernel width {}",
            config.kernel_width
        )));
    }
    let p = CONTEXT_LEN * N_FEATURES;
    let center: Vec<f64> = x.iter().flatten().copied().collect();
    let noise = Normal::new(0.0, config.sigma).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = DMatrix::zeros(config.samples, p);
    let mut weights = DVector::zeros(config.samples);
    for i in 0..config.samples {
        let mut d2 = 0.0;
        for j in 0..p {
            let e = noise.sample(&mut rng);
            z[(i, j)] = center[j] + e;
            d2 += e * e;
        }
        weights[i] = (-d2 / (config.kernel_width * config.kernel_width)).exp();
    }
    let wsum = weights.sum();
    if wsum.is_nan() || wsum <= 0.0 {
        return Err(ExplainError::DegeneratePerturbations(
            "all kernel weights vanish".into(),
        ));
    }
    let data: Vec<f64> = (0..config.samples)
        .flat_map(|i| z.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    let y = DVector::from_vec(model.predict(&Tensor::new(
        vec![config.samples, CONTEXT_LEN, N_FEATURES],
        data,
    )?)?);

    // weighted centering keeps the intercept out of the penalty
    let zmean: Vec<f64> = (0..p).map(|j| z.column(j).dot(&weights) / wsum).collect();
    let ymean = y.dot(&weights) / wsum;
    let zc = DMatrix::from_fn(config.samples, p, |i, j| {
        (z[(i, j)] - zmean[j]) * weights[i].sqrt()
    });
    let yc = DVector::from_fn(config.samples, |i, _| (y[i] - ymean) * weights[i].sqrt());
    let mut gram = zc.transpose() * &zc;
    for j in 0..p {
        gram[(j, j)] += config.ridge;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| ExplainError::DegeneratePerturbations("singular surrogate system".into()))?;
    let coef = chol.solve(&(zc.transpose() * &yc));
    let intercept = ymean - coef.iter().zip(&zmean).map(|(c, m)| c * m).sum::<f64>();

    let fitted = &z * &coef;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..config.samples {
        ss_res += weights[i] * (y[i] - intercept - fitted[i]).powi(2);
        ss_tot += weights[i] * (y[i] - ymean).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(LocalSurrogate {
        coefficients: coef.as_slice().to_vec(),
        intercept,
        r2,
        kernel_width: config.kernel_width,
        samples: config.samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::Rng;

    fn input(seed: u64) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..CONTEXT_LEN)
            .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
            .collect()
    }

    #[test]
    fn zero_path_gives_zero_attribution() {
        let model = build_variant(VariantId::GruBasic, 3).unwrap();
        let x = vec![[0.0; N_FEATURES]; CONTEXT_LEN];
        let a = integrated_gradients(&model, &x, None, 16).unwrap();
        assert!(a.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(a.completeness_gap, 0.0);
    }

    #[test]
    fn linear_attribution_is_closed_form() {
        let model = build_variant(VariantId::LinBasic, 5).unwrap();
        let x = input(1);
        let a = integrated_gradients(&model, &x, None, 64).unwrap();
        let w = model.params().get("weight").unwrap().data().to_vec();
        for (i, v) in x.iter().flatten().enumerate() {
            assert_eq!(a.values[i / N_FEATURES][i % N_FEATURES], w[i] * v);
        }
        assert!(a.completeness_gap < 1e-12);
    }

    #[test]
    fn completeness_for_neural_variants() {
        for v in [
            VariantId::GruBasic,
            VariantId::LstmDeep,
            VariantId::Tr4Heads,
            VariantId::DnnElu,
        ] {
            let model = build_variant(v, 11).unwrap();
            let a = integrated_gradients(&model, &input(2), None, 256).unwrap();
            assert!(a.relative_gap() <= 0.01, "{v}: {}", a.relative_gap());
        }
    }

    #[test]
    fn chunking_does_not_change_the_sum() {
        // 300 steps spans three chunks
        let model = build_variant(VariantId::GruBasic, 4).unwrap();
        let x = input(9);
        let a = integrated_gradients(&model, &x, None, 300).unwrap();
        let b = integrated_gradients(&model, &x, None, 300).unwrap();
        assert_eq!(a, b);
        assert!(a.relative_gap() < 0.01);
    }

    #[test]
    fn attention_shapes_and_prediction() {
        let x = input(4);
        let gru = build_variant(VariantId::GruBasic, 1).unwrap();
        let (p, map) = attention_map(&gru, &x).unwrap();
        assert_eq!(
            p,
            gru.predict(&batch_inputs([x.as_slice()]).unwrap()).unwrap()[0]
        );
        let AttentionMap::Recurrent { weights } = &map else {
            panic!("recurrent map")
        };
        assert_eq!(weights.len(), 5);
        let tr = build_variant(VariantId::Tr4Heads, 1).unwrap();
        let (_, map) = attention_map(&tr, &x).unwrap();
        let AttentionMap::Transformer { heads } = &map else {
            panic!("transformer map")
        };
        assert_eq!(heads.len(), 4);
        assert!(heads
            .iter()
            .all(|h| h.len() == 5 && h.iter().all(|r| r.len() == 5)));
        for row in map.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let dnn = build_variant(VariantId::DnnBasic, 1).unwrap();
        assert!(matches!(
            attention_map(&dnn, &x),
            Err(ExplainError::NoAttentionComponent(_))
        ));
    }

    #[test]
    fn lime_recovers_linear_weights() {
        let model = build_variant(VariantId::LinBasic, 8).unwrap();
        let s = lime_local(&model, &input(3), &LimeConfig::default()).unwrap();
        let w = model.params().get("weight").unwrap().data();
        for (c, w) in s.coefficients.iter().zip(w) {
            assert!((c - w).abs() < 1e-2, "{c} vs {w}");
        }
        assert!(s.r2 >= 0.999);
        assert_eq!(s.samples, 500);
    }

    #[test]
    fn lime_guards_and_determinism() {
        let model = build_variant(VariantId::DnnBasic, 2).unwrap();
        let x = input(5);
        let bad = LimeConfig {
            sigma: 0.0,
            ..LimeConfig::default()
        };
        assert!(matches!(
            lime_local(&model, &x, &bad),
            Err(ExplainError::DegeneratePerturbations(_))
        ));
        let a = lime_local(&model, &x, &LimeConfig::default()).unwrap();
        let b = lime_local(&model, &x, &LimeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.r2 <= 1.0);
    }

    #[test]
    fn top_k_orders_by_magnitude() {
        let mut m = [[0.0; N_FEATURES]; CONTEXT_LEN];
        m[4][5] = -3.0;
        m[0][0] = 2.0;
        m[2][1] = 1.0;
        let t = top_k(&m, 2);
        assert_eq!(
            (t[0].window, t[0].feature.as_str(), t[0].value),
            (4, "qoe", -3.0)
        );
        assert_eq!((t[1].window, t[1].feature.as_str()), (0, "thr_mean_mbps"));
    }

    #[test]
    fn explanation_document_fields() {
        let model = build_variant(VariantId::GruBasic, 3).unwrap();
        let a = integrated_gradients(&model, &input(6), None, 32).unwrap();
        let doc = Explanation::from_attribution(VariantId::GruBasic, None, &a, 3);
        let v = serde_json::to_value(&doc).unwrap();
        assert_eq!(v["method"], "integrated_gradients");
        assert_eq!(v["top_k"].as_array().unwrap().len(), 3);
        assert!(v.get("r2").is_none());
        let (_, map) = attention_map(&model, &input(6)).unwrap();
        let doc = Explanation::from_attention(VariantId::GruBasic, None, map);
        assert_eq!(doc.disclaimer.as_deref(), Some(ATTENTION_DISCLAIMER));
    }
}
