use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    pub tol_rel: f64,
    /// Magnitude below which errors are measured absolutely instead of
    /// relatively: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check a seeded sample of at most this many coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol_rel: 1e-5,
            floor: 1e-3,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Smallest distance of a ReLU input to its kink at the check point.
    /// Central differences are unreliable when it is below `eps`.
    pub kink_margin: f64,
}

/// Compare analytic gradients of a scalar function of `inputs` with central
/// finite differences. `forward` must be deterministic.
pub fn gradient_check<F>(
    forward: F,
    inputs: &[Tensor],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = forward(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let kink_margin = tape.kink_margin();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var);
        let n = inputs[ti].len();
        let coords: Vec<usize> = match config.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_err: f64 = 0.0;
        for &c in &coords {
            let orig = inputs[ti].data()[c];
            work[ti].data_mut()[c] = orig + config.eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - config.eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorCheck {
            index: ti,
            checked: coords.len(),
            max_rel_error: max_err,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= config.tol_rel,
        tensors,
        max_rel_error,
        kink_margin,
    })
}
