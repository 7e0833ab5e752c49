//! Fitting: mini-batch Adam with early stopping and plateau learning-rate
//! reduction for the neural variants, direct solvers for the linear ones.

mod callbacks;
mod linear;
mod run;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{logcosh, LayerParams, NnError, Tape, Tensor};
use crate::pipeline::{PreparedDataset, SequenceSample};
use crate::seed::{derive_seed, splitmix64};
use crate::zoo::{
    batch_inputs, build_variant, BundleMeta, Mode, Model, ModelBundle, VariantId, ZooError,
};

pub use callbacks::{EpochDecision, Monitor};
pub use linear::{
    coordinate_descent, fit_linear, kkt_residual, ols, ridge, LinearFit, MAX_SWEEPS, SWEEP_TOL,
};
pub use run::{run_all_variants, run_variants_with, RunSummary, VariantOutcome, SUMMARY_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("prediction and target lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("linear system is singular")]
    SingularSystem,
    #[error("coordinate descent did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("{0} cannot be fitted this way")]
    WrongVariant(VariantId),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    LogCosh,
    Mse,
}

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<(), TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(TrainError::EmptySplit("prediction"));
    }
    Ok(())
}

/// Mean of `log(cosh(pred - target))`, overflow-free.
pub fn loss_logcosh(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check_lengths(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| logcosh(p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    check_lengths(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

impl LossKind {
    pub fn eval(self, pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
        match self {
            Self::LogCosh => loss_logcosh(pred, target),
            Self::Mse => loss_mse(pred, target),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub patience: usize,
    /// Smallest decrease of the validation loss that counts as improvement.
    pub min_delta: f64,
    pub restore_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub early_stop: EarlyStopConfig,
    pub plateau: PlateauConfig,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_size: 32,
            max_epochs: 200,
            adam: AdamConfig::default(),
            early_stop: EarlyStopConfig {
                patience: 10,
                min_delta: 1e-7,
                restore_best: true,
            },
            plateau: PlateauConfig {
                factor: 0.5,
                patience: 5,
                min_lr: 1e-5,
            },
            loss: LossKind::LogCosh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.early_stop.patience == 0 || self.plateau.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return bad("plateau factor must be in (0, 1)");
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 || self.plateau.min_lr < 0.0 {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Full-train-set loss of the initial weights, inference mode.
    pub initial_train_loss: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

impl TrainHistory {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{HISTORY_HEADER}")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            )?;
        }
        Ok(())
    }
}

/// Adam with the bias correction folded into the step size.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &LayerParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut LayerParams, grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr_t = lr * (1.0 - beta2.powi(self.t)).sqrt() / (1.0 - beta1.powi(self.t));
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= lr_t * *m / (v.sqrt() + eps);
            }
        }
    }
}

fn batch_of(samples: &[SequenceSample], idx: &[usize]) -> Result<(Tensor, Vec<f64>), TrainError> {
    let x = batch_inputs(idx.iter().map(|&i| samples[i].inputs.as_slice()))?;
    Ok((x, idx.iter().map(|&i| samples[i].target).collect()))
}

/// Inference-mode predictions over a whole split, in chunks.
pub fn predict_samples(model: &Model, samples: &[SequenceSample]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let x = batch_inputs(chunk.iter().map(|s| s.inputs.as_slice()))?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

fn split_loss(
    model: &Model,
    samples: &[SequenceSample],
    loss: LossKind,
) -> Result<f64, TrainError> {
    let pred = predict_samples(model, samples)?;
    let target: Vec<f64> = samples.iter().map(|s| s.target).collect();
    loss.eval(&pred, &target)
}

/// Loss on the tape for one mini-batch; returns the loss value after the
/// optimizer step.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    x: Tensor,
    target: Vec<f64>,
    loss: LossKind,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let n = target.len();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (out, params) = model.forward(&mut tape, xv, Mode::Train { seed: dropout_seed })?;
    let t = tape.constant(Tensor::new(vec![n], target)?);
    let diff = tape.sub(out.pred, t)?;
    let per = match loss {
        LossKind::LogCosh => tape.logcosh(diff),
        LossKind::Mse => tape.square(diff),
    };
    let l = tape.mean(per);
    let value = tape.value(l).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(l)?;
    let gs: Vec<&[f64]> = params
        .iter()
        .map(|&p| grads.get(p).expect("parameter gradient"))
        .collect();
    adam.step(model.params_mut(), &gs, lr);
    Ok(value)
}

/// Train a neural variant on the dataset's train split, monitoring the
/// validation split. Returns the bundle of the restored best weights.
pub fn train_neural(
    mut model: Model,
    dataset: &PreparedDataset,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory), TrainError> {
    config.validate()?;
    if !model.variant().class().is_neural() {
        return Err(TrainError::WrongVariant(model.variant()));
    }
    let (train, val) = (&dataset.split.train, &dataset.split.val);
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut history = TrainHistory {
        initial_train_loss: split_loss(&model, train, config.loss)?,
        ..TrainHistory::default()
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let dropout_root = derive_seed(config.seed, "dropout");
    let mut adam = Adam::new(config.adam.clone(), model.params());
    let mut monitor = Monitor::new(config);
    let mut best_params = model.params().clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_count: u64 = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = monitor.lr();
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for idx in order.chunks(config.batch_size) {
            let (x, target) = batch_of(train, idx)?;
            step_count += 1;
            let l = train_step(
                &mut model,
                &mut adam,
                x,
                target,
                config.loss,
                lr,
                splitmix64(dropout_root ^ step_count),
            )?;
            if !l.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            weighted += l * idx.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        let val_loss = split_loss(&model, val, config.loss)?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        let decision = monitor.on_epoch_end(epoch, val_loss);
        if decision.improved {
            best_params = model.params().clone();
        }
        if decision.stop {
            break;
        }
    }
    history.best_epoch = monitor.best_epoch();
    if config.early_stop.restore_best {
        *model.params_mut() = best_params;
    } else {
        history.best_epoch = history.epochs.len();
    }
    let bundle = finish_bundle(&model, dataset, config, history.epochs.len())?;
    Ok((bundle, history))
}

/// Bundle of `model` with its losses measured through the stored (32-bit)
/// parameters, so the numbers match what a loaded bundle reproduces.
fn finish_bundle(
    model: &Model,
    dataset: &PreparedDataset,
    config: &TrainConfig,
    epochs: usize,
) -> Result<ModelBundle, TrainError> {
    let mut bundle = ModelBundle::new(
        model,
        dataset.scaler.clone(),
        dataset.config.window_s,
        BundleMeta::default(),
    );
    let stored = bundle.model()?;
    let loss = if model.variant().class().is_neural() {
        config.loss
    } else {
        LossKind::Mse
    };
    let val_loss = if dataset.split.val.is_empty() {
        f64::NAN
    } else {
        split_loss(&stored, &dataset.split.val, loss)?
    };
    bundle.meta = BundleMeta {
        seed: config.seed,
        epochs,
        train_loss: split_loss(&stored, &dataset.split.train, loss)?,
        val_loss,
    };
    Ok(bundle)
}

/// Train or fit `variant` with seeds derived from `config.seed`.
pub fn train_variant(
    variant: VariantId,
    dataset: &PreparedDataset,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory), TrainError> {
    if variant.class().is_neural() {
        let model = build_variant(variant, derive_seed(config.seed, "init"))?;
        train_neural(model, dataset, config)
    } else {
        fit_linear(variant, dataset, config)
    }
}
