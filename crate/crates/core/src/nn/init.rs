use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LayerParams, NnError, Tensor};
use crate::seed::derive_seed;

/// Initialization rule for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) of a `[fan_in, fan_out]` kernel.
    GlorotUniform,
    /// Each consecutive square `[n, n]` column block is orthogonal.
    OrthogonalBlocks,
    Zeros,
    Ones,
    /// Zeros except `[start, start + len)`, which is set to one.
    ZerosWithOnes {
        start: usize,
        len: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Initialize every spec deterministically. Each tensor draws from its own
/// stream keyed by `(seed, name)`.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<LayerParams, NnError> {
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &spec.name));
        let t = match &spec.init {
            Init::GlorotUniform => glorot_uniform(&spec.shape, &mut rng)?,
            Init::OrthogonalBlocks => {
                let [rows, cols] = spec.shape[..] else {
                    return Err(NnError::ShapeMismatch(format!(
                        "orthogonal init of {:?}",
                        spec.shape
                    )));
                };
                if cols % rows != 0 {
                    return Err(NnError::ShapeMismatch(format!(
                        "orthogonal blocks of {:?}",
                        spec.shape
                    )));
                }
                let mut data = vec![0.0; rows * cols];
                for b in 0..cols / rows {
                    let q = orthogonal(rows, &mut rng);
                    for r in 0..rows {
                        for c in 0..rows {
                            data[r * cols + b * rows + c] = q[r * rows + c];
                        }
                    }
                }
                Tensor::new(spec.shape.clone(), data)?
            }
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::filled(&spec.shape, 1.0),
            Init::ZerosWithOnes { start, len } => {
                let mut t = Tensor::zeros(&spec.shape);
                let n = t.len();
                if start + len > n {
                    return Err(NnError::ShapeMismatch(format!(
                        "ones slice beyond {:?}",
                        spec.shape
                    )));
                }
                t.data_mut()[*start..start + len].fill(1.0);
                t
            }
        };
        entries.push((spec.name.clone(), t));
    }
    LayerParams::new(entries)
}

pub fn glorot_uniform(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor, NnError> {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => return Err(NnError::ShapeMismatch(format!("glorot init of {shape:?}"))),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| rng.random_range(-limit..limit)))
}

/// Random `n x n` orthogonal matrix (row-major), the Q factor of a Gaussian
/// matrix with positive R diagonal.
pub fn orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Columns of the Gaussian matrix, orthonormalized in place.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..n {
        // Two passes of modified Gram-Schmidt keep Q orthogonal to ~1e-15.
        for _ in 0..2 {
            for i in 0..j {
                let (head, tail) = cols.split_at_mut(j);
                let d: f64 = head[i].iter().zip(&tail[0]).map(|(a, b)| a * b).sum();
                for (x, q) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= d * q;
                }
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; n * n];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * n + c] = *v;
        }
    }
    out
}
