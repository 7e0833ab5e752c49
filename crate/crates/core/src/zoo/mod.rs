//! The forecaster catalogue: 18 variants in five classes behind one
//! interface, plus serialized bundles.

mod arch;
mod bundle;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{init_params, LayerParams, NnError, ParamSpec, Tape, Tensor, Var};
use crate::{CONTEXT_LEN, N_FEATURES, QOE_FEATURE};

pub use arch::{
    positional_encoding, Activation, Architecture, CellKind, ForwardOutput, Mode, ATTENTION_UNITS,
    D_MODEL,
};
pub use bundle::{BundleMeta, ModelBundle, ParamRecord, BUNDLE_FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bundle checksum {stored:08x} does not match parameters ({computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelClass {
    Lstm,
    Gru,
    Transformer,
    Dnn,
    Linear,
}

impl ModelClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Gru => "gru",
            Self::Transformer => "transformer",
            Self::Dnn => "dnn",
            Self::Linear => "linear",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Self::Linear
    }
}

macro_rules! variants {
    ($($v:ident => $name:literal),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum VariantId { $($v),* }

        impl VariantId {
            /// Registry order, also the order of every report.
            pub const ALL: [VariantId; 18] = [$(VariantId::$v),*];

            pub fn name(self) -> &'static str {
                match self { $(VariantId::$v => $name),* }
            }
        }

        impl FromStr for VariantId {
            type Err = ZooError;
            fn from_str(s: &str) -> Result<Self, ZooError> {
                match s {
                    $($name => Ok(VariantId::$v),)*
                    other => Err(ZooError::UnknownVariant(other.to_string())),
                }
            }
        }
    };
}

variants! {
    LstmBasic => "lstm_basic",
    LstmWide => "lstm_wide",
    LstmDeep => "lstm_deep",
    GruBasic => "gru_basic",
    GruWide => "gru_wide",
    GruDeep => "gru_deep",
    TrBasic => "tr_basic",
    Tr4Heads => "tr_4heads",
    TrLargeFf => "tr_largeff",
    TrLowDrop => "tr_lowdrop",
    DnnBasic => "dnn_basic",
    DnnDeep => "dnn_deep",
    DnnElu => "dnn_elu",
    DnnHighDrop => "dnn_highdrop",
    LinBasic => "lin_basic",
    LinL1 => "lin_l1",
    LinL2 => "lin_l2",
    LinElasticNet => "lin_elasticnet",
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl VariantId {
    pub fn class(self) -> ModelClass {
        use VariantId::*;
        match self {
            LstmBasic | LstmWide | LstmDeep => ModelClass::Lstm,
            GruBasic | GruWide | GruDeep => ModelClass::Gru,
            TrBasic | Tr4Heads | TrLargeFf | TrLowDrop => ModelClass::Transformer,
            DnnBasic | DnnDeep | DnnElu | DnnHighDrop => ModelClass::Dnn,
            LinBasic | LinL1 | LinL2 | LinElasticNet => ModelClass::Linear,
        }
    }

    pub fn architecture(self) -> Architecture {
        use VariantId::*;
        let rec = |cell, units, layers, dropout| Architecture::Recurrent {
            cell,
            units,
            layers,
            dropout,
        };
        let tr = |heads, ff, dropout| Architecture::Transformer { heads, ff, dropout };
        let dnn = |hidden: &'static [usize], activation, dropout| Architecture::Dense {
            hidden,
            activation,
            dropout,
        };
        let lin = |l1, l2| Architecture::Linear { l1, l2 };
        match self {
            LstmBasic => rec(CellKind::Lstm, 32, 1, 0.0),
            LstmWide => rec(CellKind::Lstm, 100, 1, 0.0),
            LstmDeep => rec(CellKind::Lstm, 32, 3, 0.2),
            GruBasic => rec(CellKind::Gru, 32, 1, 0.0),
            GruWide => rec(CellKind::Gru, 64, 1, 0.0),
            GruDeep => rec(CellKind::Gru, 32, 3, 0.2),
            TrBasic => tr(2, 64, 0.10),
            Tr4Heads => tr(4, 64, 0.10),
            TrLargeFf => tr(2, 128, 0.10),
            TrLowDrop => tr(2, 64, 0.05),
            DnnBasic => dnn(&[64, 32], Activation::Relu, 0.2),
            DnnDeep => dnn(&[128, 64, 32], Activation::Relu, 0.2),
            DnnElu => dnn(&[64, 32], Activation::Elu, 0.2),
            DnnHighDrop => dnn(&[64, 32], Activation::Relu, 0.4),
            LinBasic => lin(0.0, 0.0),
            LinL1 => lin(0.01, 0.0),
            LinL2 => lin(0.0, 0.01),
            LinElasticNet => lin(0.005, 0.005),
        }
    }

    pub fn param_specs(self) -> Vec<ParamSpec> {
        self.architecture().param_specs()
    }
}

/// A variant with concrete parameters. Immutable during inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    variant: VariantId,
    params: LayerParams,
}

pub fn build_variant(id: VariantId, seed: u64) -> Result<Model, ZooError> {
    let params = init_params(&id.param_specs(), seed)?;
    Ok(Model {
        variant: id,
        params,
    })
}

impl Model {
    /// Wrap existing parameters after checking names and shapes.
    pub fn from_params(variant: VariantId, params: LayerParams) -> Result<Self, ZooError> {
        let specs = variant.param_specs();
        if specs.len() != params.len() {
            return Err(ZooError::ShapeMismatch(format!(
                "{variant} has {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ZooError::ShapeMismatch(format!(
                    "{variant}: expected {} {:?}, got {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { variant, params })
    }

    pub fn variant(&self) -> VariantId {
        self.variant
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Record the parameters as leaves and run the forward pass on `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
    ) -> Result<(ForwardOutput, Vec<Var>), ZooError> {
        let params = self.params.record(tape);
        let out = self
            .variant
            .architecture()
            .forward(tape, &params, x, mode)?;
        Ok((out, params))
    }

    /// Scaled predictions for a `[B, 5, 6]` batch, inference mode.
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<f64>, ZooError> {
        Ok(self.predict_with_attention(inputs)?.0)
    }

    /// Predictions plus the attention weights where the architecture has them:
    /// `[B, 5]` for recurrent models, `[B, heads, 5, 5]` for transformers.
    pub fn predict_with_attention(
        &self,
        inputs: &Tensor,
    ) -> Result<(Vec<f64>, Option<Tensor>), ZooError> {
        check_input(inputs)?;
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let (out, _) = self.forward(&mut tape, x, Mode::Eval)?;
        let attention = out.attention.map(|a| tape.value(a).clone());
        Ok((tape.value(out.pred).data().to_vec(), attention))
    }
}

pub fn check_input(inputs: &Tensor) -> Result<(), ZooError> {
    match inputs.shape() {
        [b, CONTEXT_LEN, N_FEATURES] if *b > 0 => Ok(()),
        s => Err(ZooError::ShapeMismatch(format!(
            "expected [B, {CONTEXT_LEN}, {N_FEATURES}] inputs, got {s:?}"
        ))),
    }
}

/// Stack `[5, 6]` samples into one `[B, 5, 6]` tensor.
pub fn batch_inputs<'a>(
    samples: impl IntoIterator<Item = &'a [[f64; N_FEATURES]]>,
) -> Result<Tensor, ZooError> {
    let mut data = Vec::new();
    let mut b = 0;
    for s in samples {
        if s.len() != CONTEXT_LEN {
            return Err(ZooError::ShapeMismatch(format!(
                "context of {} windows",
                s.len()
            )));
        }
        data.extend(s.iter().flatten());
        b += 1;
    }
    Ok(Tensor::new(vec![b, CONTEXT_LEN, N_FEATURES], data)?)
}

/// The last context window's scaled QoE, unchanged.
pub fn last_value_baseline(inputs: &Tensor) -> Result<Vec<f64>, ZooError> {
    check_input(inputs)?;
    let per = CONTEXT_LEN * N_FEATURES;
    Ok(inputs
        .data()
        .chunks(per)
        .map(|s| s[(CONTEXT_LEN - 1) * N_FEATURES + QOE_FEATURE])
        .collect())
}

#[cfg(test)]
mod tests;
