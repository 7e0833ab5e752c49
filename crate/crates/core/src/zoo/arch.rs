use crate::nn::{Init, NnError, ParamSpec, Tape, Tensor, Var};
use crate::seed::splitmix64;
use crate::{CONTEXT_LEN, N_FEATURES};

/// Width of the additive attention scorer on recurrent outputs.
pub const ATTENTION_UNITS: usize = 128;
/// Transformer model width.
pub const D_MODEL: usize = 32;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            Self::Gru => 3,
            Self::Lstm => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Stacked cells, each returning its full sequence, then additive
    /// attention over the last layer's five states and a dense output.
    Recurrent {
        cell: CellKind,
        units: usize,
        layers: usize,
        /// Applied between layers only.
        dropout: f64,
    },
    /// One post-norm encoder block of width [`D_MODEL`] with mean pooling.
    Transformer {
        heads: usize,
        ff: usize,
        dropout: f64,
    },
    /// Dense stack on the flattened 30 inputs, dropout after every hidden layer.
    Dense {
        hidden: &'static [usize],
        activation: Activation,
        dropout: f64,
    },
    /// Affine map of the flattened inputs. The penalties are used at fit time.
    Linear { l1: f64, l2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks derive from `seed` and the dropout site.
    Train {
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B]` scaled predictions.
    pub pred: Var,
    pub attention: Option<Var>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Result<Var, NnError> {
        let v =
            self.vars.get(self.pos).copied().ok_or_else(|| {
                NnError::InvalidArgument(format!("missing parameter #{}", self.pos))
            })?;
        self.pos += 1;
        Ok(v)
    }
}

struct Dropout {
    mode: Mode,
    site: u64,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var, NnError> {
        self.site += 1;
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train { seed } => tape.dropout(
                x,
                rate,
                true,
                splitmix64(seed ^ self.site.wrapping_mul(0x9E37_79B9)),
            ),
        }
    }
}

/// Fixed sinusoidal encoding `[positions, d]`.
pub fn positional_encoding(positions: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[positions, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let angle = pos / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn glorot(name: String, shape: &[usize]) -> ParamSpec {
    ParamSpec::new(name, shape, Init::GlorotUniform)
}

fn zeros(name: String, shape: &[usize]) -> ParamSpec {
    ParamSpec::new(name, shape, Init::Zeros)
}

fn dense(tape: &mut Tape, x: Var, p: &mut Cursor) -> Result<Var, NnError> {
    let (w, b) = (p.next()?, p.next()?);
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

impl Architecture {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let flat = CONTEXT_LEN * N_FEATURES;
        let mut specs = Vec::new();
        match *self {
            Self::Recurrent {
                cell,
                units,
                layers,
                ..
            } => {
                let k = cell.gates() * units;
                for l in 0..layers {
                    let input = if l == 0 { N_FEATURES } else { units };
                    specs.push(glorot(format!("l{l}_kernel"), &[input, k]));
                    specs.push(ParamSpec::new(
                        format!("l{l}_recurrent"),
                        &[units, k],
                        Init::OrthogonalBlocks,
                    ));
                    let bias = match cell {
                        CellKind::Gru => Init::Zeros,
                        CellKind::Lstm => Init::ZerosWithOnes {
                            start: units,
                            len: units,
                        },
                    };
                    specs.push(ParamSpec::new(format!("l{l}_bias"), &[k], bias));
                }
                specs.push(glorot("attn_w".into(), &[units, ATTENTION_UNITS]));
                specs.push(zeros("attn_b".into(), &[ATTENTION_UNITS]));
                specs.push(glorot("attn_v".into(), &[ATTENTION_UNITS, 1]));
                specs.push(glorot("out_w".into(), &[units, 1]));
                specs.push(zeros("out_b".into(), &[1]));
            }
            Self::Transformer { ff, .. } => {
                let d = D_MODEL;
                specs.push(glorot("in_w".into(), &[N_FEATURES, d]));
                specs.push(zeros("in_b".into(), &[d]));
                for n in ["q", "k", "v", "o"] {
                    specs.push(glorot(format!("mha_{n}_w"), &[d, d]));
                    specs.push(zeros(format!("mha_{n}_b"), &[d]));
                }
                specs.push(ParamSpec::new("ln1_gamma", &[d], Init::Ones));
                specs.push(zeros("ln1_beta".into(), &[d]));
                specs.push(glorot("ff1_w".into(), &[d, ff]));
                specs.push(zeros("ff1_b".into(), &[ff]));
                specs.push(glorot("ff2_w".into(), &[ff, d]));
                specs.push(zeros("ff2_b".into(), &[d]));
                specs.push(ParamSpec::new("ln2_gamma", &[d], Init::Ones));
                specs.push(zeros("ln2_beta".into(), &[d]));
                specs.push(glorot("out_w".into(), &[d, 1]));
                specs.push(zeros("out_b".into(), &[1]));
            }
            Self::Dense { hidden, .. } => {
                let mut input = flat;
                for (i, &h) in hidden.iter().enumerate() {
                    specs.push(glorot(format!("dense{i}_w"), &[input, h]));
                    specs.push(zeros(format!("dense{i}_b"), &[h]));
                    input = h;
                }
                specs.push(glorot("out_w".into(), &[input, 1]));
                specs.push(zeros("out_b".into(), &[1]));
            }
            Self::Linear { .. } => {
                specs.push(zeros("weight".into(), &[flat, 1]));
                specs.push(zeros("bias".into(), &[1]));
            }
        }
        specs
    }

    /// Forward pass of `x: [B, 5, 6]` with parameters in [`Self::param_specs`] order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<ForwardOutput, NnError> {
        let shape = tape.value(x).shape().to_vec();
        let b = match shape[..] {
            [b, CONTEXT_LEN, N_FEATURES] => b,
            _ => return Err(NnError::ShapeMismatch(format!("model input {shape:?}"))),
        };
        let mut p = Cursor {
            vars: params,
            pos: 0,
        };
        let mut drop = Dropout { mode, site: 0 };
        let (y, attention) = match *self {
            Self::Recurrent {
                cell,
                units,
                layers,
                dropout,
            } => {
                let mut seq = x;
                for l in 0..layers {
                    if l > 0 {
                        seq = drop.apply(tape, seq, dropout)?;
                    }
                    seq = match cell {
                        CellKind::Gru => gru_layer(tape, seq, units, &mut p)?,
                        CellKind::Lstm => lstm_layer(tape, seq, units, &mut p)?,
                    };
                }
                let (ctx, alpha) = additive_attention(tape, seq, b, units, &mut p)?;
                (dense(tape, ctx, &mut p)?, Some(alpha))
            }
            Self::Transformer {
                heads,
                ff: _,
                dropout,
            } => {
                let (pooled, alpha) = encoder(tape, x, b, heads, dropout, &mut p, &mut drop)?;
                (dense(tape, pooled, &mut p)?, Some(alpha))
            }
            Self::Dense {
                hidden,
                activation,
                dropout,
            } => {
                let mut h = tape.reshape(x, &[b, CONTEXT_LEN * N_FEATURES])?;
                for _ in hidden {
                    h = dense(tape, h, &mut p)?;
                    h = match activation {
                        Activation::Relu => tape.relu(h),
                        Activation::Elu => tape.elu(h),
                    };
                    h = drop.apply(tape, h, dropout)?;
                }
                (dense(tape, h, &mut p)?, None)
            }
            Self::Linear { .. } => {
                let h = tape.reshape(x, &[b, CONTEXT_LEN * N_FEATURES])?;
                (dense(tape, h, &mut p)?, None)
            }
        };
        if p.pos != params.len() {
            return Err(NnError::InvalidArgument(format!(
                "{} parameters given, {} used",
                params.len(),
                p.pos
            )));
        }
        let pred = tape.reshape(y, &[b])?;
        Ok(ForwardOutput { pred, attention })
    }
}

/// `[B, T, H]` slice of step `t` as `[B, H]`.
fn step(tape: &mut Tape, seq: Var, t: usize, b: usize, width: usize) -> Result<Var, NnError> {
    let s = tape.slice(seq, 1, t, 1)?;
    tape.reshape(s, &[b, width])
}

fn stack_steps(tape: &mut Tape, hs: &[Var], b: usize, units: usize) -> Result<Var, NnError> {
    let rows: Vec<Var> = hs
        .iter()
        .map(|&h| tape.reshape(h, &[b, 1, units]))
        .collect::<Result<_, _>>()?;
    tape.concat(&rows, 1)
}

/// Gates `[z, r, n]`: `h' = n + z * (h - n)` with
/// `n = tanh(x Wn + (r * h) Un + bn)`.
fn gru_layer(tape: &mut Tape, seq: Var, units: usize, p: &mut Cursor) -> Result<Var, NnError> {
    let (kernel, recurrent, bias) = (p.next()?, p.next()?, p.next()?);
    let b = tape.value(seq).shape()[0];
    let t_len = tape.value(seq).shape()[1];
    let xw = tape.matmul(seq, kernel)?;
    let xw = tape.add(xw, bias)?;
    let u_zr = tape.slice(recurrent, 1, 0, 2 * units)?;
    let u_n = tape.slice(recurrent, 1, 2 * units, units)?;
    let mut h = tape.constant(Tensor::zeros(&[b, units]));
    let mut hs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = step(tape, xw, t, b, 3 * units)?;
        let x_zr = tape.slice(xt, 1, 0, 2 * units)?;
        let x_n = tape.slice(xt, 1, 2 * units, units)?;
        let hu = tape.matmul(h, u_zr)?;
        let zr = tape.add(x_zr, hu)?;
        let zr = tape.sigmoid(zr);
        let z = tape.slice(zr, 1, 0, units)?;
        let r = tape.slice(zr, 1, units, units)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, u_n)?;
        let n = tape.add(x_n, rhu)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        h = tape.add(n, zd)?;
        hs.push(h);
    }
    stack_steps(tape, &hs, b, units)
}

/// Gates `[i, f, g, o]`: `c' = f * c + i * tanh(g)`, `h' = o * tanh(c')`.
fn lstm_layer(tape: &mut Tape, seq: Var, units: usize, p: &mut Cursor) -> Result<Var, NnError> {
    let (kernel, recurrent, bias) = (p.next()?, p.next()?, p.next()?);
    let b = tape.value(seq).shape()[0];
    let t_len = tape.value(seq).shape()[1];
    let xw = tape.matmul(seq, kernel)?;
    let xw = tape.add(xw, bias)?;
    let mut h = tape.constant(Tensor::zeros(&[b, units]));
    let mut c = tape.constant(Tensor::zeros(&[b, units]));
    let mut hs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = step(tape, xw, t, b, 4 * units)?;
        let hu = tape.matmul(h, recurrent)?;
        let pre = tape.add(xt, hu)?;
        let gate = |tape: &mut Tape, k: usize| tape.slice(pre, 1, k * units, units);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i);
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f);
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o);
        let g = gate(tape, 2)?;
        let g = tape.tanh(g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        hs.push(h);
    }
    stack_steps(tape, &hs, b, units)
}

/// `alpha = softmax_t(v . tanh(W h_t + b))`, `context = sum_t alpha_t h_t`.
fn additive_attention(
    tape: &mut Tape,
    seq: Var,
    b: usize,
    units: usize,
    p: &mut Cursor,
) -> Result<(Var, Var), NnError> {
    let (w, bias, v) = (p.next()?, p.next()?, p.next()?);
    let flat = tape.reshape(seq, &[b * CONTEXT_LEN, units])?;
    let e = tape.matmul(flat, w)?;
    let e = tape.add(e, bias)?;
    let e = tape.tanh(e);
    let scores = tape.matmul(e, v)?;
    let scores = tape.reshape(scores, &[b, CONTEXT_LEN])?;
    let alpha = tape.softmax(scores, 1)?;
    let a3 = tape.reshape(alpha, &[b, CONTEXT_LEN, 1])?;
    let weighted = tape.mul(seq, a3)?;
    let ctx = tape.sum_axis(weighted, 1)?;
    Ok((ctx, alpha))
}

fn affine_norm(tape: &mut Tape, x: Var, p: &mut Cursor) -> Result<Var, NnError> {
    let (gamma, beta) = (p.next()?, p.next()?);
    let n = tape.layer_norm(x, LN_EPS);
    let n = tape.mul(n, gamma)?;
    tape.add(n, beta)
}

/// Projection, positional encoding, MHA, add&norm, FFN, add&norm, mean pool.
/// Returns `[B, D_MODEL]` and the attention weights `[B, heads, 5, 5]`.
fn encoder(
    tape: &mut Tape,
    x: Var,
    b: usize,
    heads: usize,
    dropout: f64,
    p: &mut Cursor,
    drop: &mut Dropout,
) -> Result<(Var, Var), NnError> {
    let (d, t) = (D_MODEL, CONTEXT_LEN);
    assert!(d % heads == 0, "d_model {d} not divisible by {heads} heads");
    let dk = d / heads;
    let h = dense(tape, x, p)?;
    let pe = tape.constant(positional_encoding(t, d));
    let h = tape.add(h, pe)?;

    let split_heads = |tape: &mut Tape, p: &mut Cursor| -> Result<Var, NnError> {
        let y = dense(tape, h, p)?;
        let y = tape.reshape(y, &[b, t, heads, dk])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * heads, t, dk])
    };
    let q = split_heads(tape, p)?;
    let k = split_heads(tape, p)?;
    let v = split_heads(tape, p)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let alpha = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(alpha, v, false)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let attn_out = dense(tape, ctx, p)?;
    let attn_out = drop.apply(tape, attn_out, dropout)?;
    let res = tape.add(h, attn_out)?;
    let h1 = affine_norm(tape, res, p)?;

    let f = dense(tape, h1, p)?;
    let f = tape.relu(f);
    let f = dense(tape, f, p)?;
    let f = drop.apply(tape, f, dropout)?;
    let res = tape.add(h1, f)?;
    let h2 = affine_norm(tape, res, p)?;

    let pooled = tape.mean_axis(h2, 1)?;
    let alpha = tape.reshape(alpha, &[b, heads, t, t])?;
    Ok((pooled, alpha))
}
