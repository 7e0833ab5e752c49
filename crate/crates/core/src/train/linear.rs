use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{finish_bundle, loss_mse, EpochRecord, TrainConfig, TrainError, TrainHistory};
use crate::nn::{LayerParams, Tensor};
use crate::pipeline::PreparedDataset;
use crate::zoo::{Architecture, Model, ModelBundle, VariantId};

/// Coordinate descent stops once no coefficient moves by this much in a sweep.
pub const SWEEP_TOL: f64 = 1e-8;
pub const MAX_SWEEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Coordinate-descent sweeps; 0 for closed-form fits.
    pub sweeps: usize,
}

impl LinearFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }
}

fn dims(x: &[Vec<f64>], y: &[f64]) -> Result<(usize, usize), TrainError> {
    if x.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch(x.len(), y.len()));
    }
    let p = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != p) {
        return Err(TrainError::LengthMismatch(r.len(), p));
    }
    Ok((x.len(), p))
}

/// Column means, centered design and centered targets.
fn center(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, DMatrix<f64>, f64, DVector<f64>) {
    let (n, p) = (x.len(), x[0].len());
    let means: Vec<f64> = (0..p)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let xc = DMatrix::from_fn(n, p, |i, j| x[i][j] - means[j]);
    let ym = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    (means, xc, ym, yc)
}

fn with_intercept(means: &[f64], ym: f64, w: Vec<f64>, sweeps: usize) -> LinearFit {
    let bias = ym - means.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>();
    LinearFit {
        weights: w,
        bias,
        sweeps,
    }
}

/// Least squares with intercept; the minimum-norm solution when the design
/// is rank deficient.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<LinearFit, TrainError> {
    let (n, p) = dims(x, y)?;
    let a = DMatrix::from_fn(n, p + 1, |i, j| if j < p { x[i][j] } else { 1.0 });
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (n.max(p + 1) as f64) * f64::EPSILON;
    let sol = svd.solve(&b, eps).map_err(|_| TrainError::SingularSystem)?;
    Ok(LinearFit {
        weights: sol.as_slice()[..p].to_vec(),
        bias: sol[p],
        sweeps: 0,
    })
}

/// Minimizer of `mse + lambda * |w|^2` with an unpenalized intercept:
/// `(Xc'Xc + n lambda I) w = Xc'yc`.
pub fn ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LinearFit, TrainError> {
    let (n, p) = dims(x, y)?;
    let (means, xc, ym, yc) = center(x, y);
    let mut m = xc.transpose() * &xc;
    for j in 0..p {
        m[(j, j)] += n as f64 * lambda;
    }
    let rhs = xc.transpose() * yc;
    let scale = m.diagonal().max().max(f64::MIN_POSITIVE);
    let chol = m.cholesky().ok_or(TrainError::SingularSystem)?;
    let l = chol.l();
    if (0..p).any(|j| l[(j, j)].powi(2) <= scale * 1e-12) {
        return Err(TrainError::SingularSystem);
    }
    let w = chol.solve(&rhs);
    Ok(with_intercept(&means, ym, w.as_slice().to_vec(), 0))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on `mse + l1 * sum|w| + l2 * sum w^2`,
/// intercept unpenalized.
pub fn coordinate_descent(
    x: &[Vec<f64>],
    y: &[f64],
    l1: f64,
    l2: f64,
) -> Result<LinearFit, TrainError> {
    let (n, p) = dims(x, y)?;
    let (means, xc, ym, yc) = center(x, y);
    let nf = n as f64;
    let cols: Vec<DVector<f64>> = (0..p).map(|j| xc.column(j).into_owned()).collect();
    let sq: Vec<f64> = cols.iter().map(|c| c.norm_squared()).collect();
    let mut w = vec![0.0; p];
    let mut r = yc;
    for sweep in 1..=MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let a = 2.0 / nf * sq[j] + 2.0 * l2;
            if a == 0.0 {
                continue;
            }
            let rho = 2.0 / nf * (cols[j].dot(&r) + sq[j] * w[j]);
            let new = soft_threshold(rho, l1) / a;
            let delta = new - w[j];
            if delta != 0.0 {
                r.axpy(-delta, &cols[j], 1.0);
                w[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < SWEEP_TOL {
            return Ok(with_intercept(&means, ym, w, sweep));
        }
    }
    Err(TrainError::NoConvergence(MAX_SWEEPS))
}

/// Largest violation of the subgradient optimality conditions of the
/// elastic-net objective at `fit`.
pub fn kkt_residual(x: &[Vec<f64>], y: &[f64], fit: &LinearFit, l1: f64, l2: f64) -> f64 {
    let n = x.len() as f64;
    let resid: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(row, &t)| t - fit.predict(row))
        .collect();
    let mut worst = (resid.iter().sum::<f64>() * 2.0 / n).abs();
    for (j, &wj) in fit.weights.iter().enumerate() {
        let g =
            -2.0 / n * x.iter().zip(&resid).map(|(row, r)| row[j] * r).sum::<f64>() + 2.0 * l2 * wj;
        let v = if wj != 0.0 {
            (g + l1 * wj.signum()).abs()
        } else {
            (g.abs() - l1).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Fit a linear variant on the train split (mean-squared-error objective).
pub fn fit_linear(
    variant: VariantId,
    dataset: &PreparedDataset,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory), TrainError> {
    let Architecture::Linear { l1, l2 } = variant.architecture() else {
        return Err(TrainError::WrongVariant(variant));
    };
    let started = Instant::now();
    let train = &dataset.split.train;
    let x: Vec<Vec<f64>> = train.iter().map(|s| s.flat_inputs()).collect();
    let y: Vec<f64> = train.iter().map(|s| s.target).collect();
    let fit = match (l1 > 0.0, l2 > 0.0) {
        (false, false) => ols(&x, &y)?,
        (false, true) => ridge(&x, &y, l2)?,
        _ => coordinate_descent(&x, &y, l1, l2)?,
    };
    let p = fit.weights.len();
    let params = LayerParams::new(vec![
        (
            "weight".into(),
            Tensor::new(vec![p, 1], fit.weights.clone())?,
        ),
        ("bias".into(), Tensor::new(vec![1], vec![fit.bias])?),
    ])?;
    let model = Model::from_params(variant, params)?;
    let bundle = finish_bundle(&model, dataset, config, fit.sweeps.max(1))?;
    let history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 1,
            train_loss: bundle.meta.train_loss,
            val_loss: bundle.meta.val_loss,
            lr: 0.0,
            seconds: started.elapsed().as_secs_f64(),
        }],
        best_epoch: 1,
        initial_train_loss: loss_mse(&vec![0.0; y.len()], &y)?,
    };
    Ok((bundle, history))
}
