//! Reverse-mode differentiation over a linear recording of primitive ops.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse recording order, so an operand always
//! receives its full gradient before it is itself visited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{axis_split, Tensor};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[.., k] x [k, n]`
    MatMul(Var, Var),
    /// `[b, m, k] x [b, k, n]`, or `[b, n, k]` transposed when `trans_b`.
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// Elementwise with `b` broadcast into `a`'s shape; `map[i]` is b's index.
    Add {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    SumAxis {
        input: Var,
        axis: usize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    LogCosh(Var),
    Square(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor; zeros when `v` does not influence the output.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
thread_local! {
    pub(crate) static CORRUPT_TANH_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

/// Index map for broadcasting `small` into `big` (right-aligned, dims equal or 1).
fn broadcast_map(big: &[usize], small: &[usize]) -> Result<Option<Vec<usize>>, NnError> {
    if big == small {
        return Ok(None);
    }
    if small.len() > big.len() {
        return Err(mismatch(format!("cannot broadcast {small:?} into {big:?}")));
    }
    let offset = big.len() - small.len();
    for (i, &d) in small.iter().enumerate() {
        if d != 1 && d != big[offset + i] {
            return Err(mismatch(format!("cannot broadcast {small:?} into {big:?}")));
        }
    }
    let n: usize = big.iter().product();
    let small_len: usize = small.iter().product();
    // Fast path: `small` equals a suffix of `big`.
    if small == &big[offset..] {
        return Ok(Some((0..n).map(|i| i % small_len).collect()));
    }
    let mut strides = vec![0usize; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[offset + i] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(a, b)| a * b).sum());
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn permuted(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(a, b)| a * b).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU; infinite
    /// without one.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (parameter or input being attributed).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never needs a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(mismatch(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bt * m * n];
        for t in 0..bt {
            let ao = t * m * k;
            let bo = t * k * n;
            let oo = t * m * n;
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let bval = if trans_b {
                            bv[bo + j * k + p]
                        } else {
                            bv[bo + p * n + j]
                        };
                        s += av[ao + i * k + p] * bval;
                    }
                    out[oo + i * n + j] = s;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![bt, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            needs,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Option<Vec<usize>>), NnError> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = match &map {
            None => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av
                .data()
                .iter()
                .zip(m)
                .map(|(&x, &j)| f(x, bv[j]))
                .collect(),
        };
        Ok((Tensor::new(av.shape().to_vec(), data)?, map))
    }

    /// `a + b` with `b` broadcast into `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, map) = self.binary(a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b, map }, needs))
    }

    /// `a - b` with `b` broadcast into `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, map) = self.binary(a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub { a, b, map }, needs))
    }

    /// `a * b` elementwise with `b` broadcast into `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (t, map) = self.binary(a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b, map }, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NnError> {
        let first = inputs
            .first()
            .ok_or_else(|| mismatch("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(mismatch(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn slice(
        &mut self,
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, NnError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(mismatch(format!(
                "slice {start}+{len} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice { input, axis, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(input).reshaped(shape)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::Reshape(input), needs))
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var, NnError> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(mismatch(format!("permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = permuted(self.value(input).data(), &shape, perm);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    fn reduce_axis(&self, input: Var, axis: usize) -> Result<(Vec<f64>, Vec<usize>), NnError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((out, out_shape))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var, NnError> {
        let (out, shape) = self.reduce_axis(input, axis)?;
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { input, axis }, needs))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var, NnError> {
        let (mut out, shape) = self.reduce_axis(input, axis)?;
        let n = self.shape(input)[axis] as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MeanAxis { input, axis },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::SumAll(input), needs)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::MeanAll(input), needs)
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var, NnError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input, axis }, needs))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(input);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let needs = self.needs(input);
        self.push(t, op, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu(x))
    }

    /// Elementwise `log(cosh(x))` in the overflow-free form.
    pub fn logcosh(&mut self, x: Var) -> Var {
        self.unary(x, logcosh, Op::LogCosh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Inverted dropout. Identity (same handle) when not training or `rate == 0`.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        train: bool,
        seed: u64,
    ) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument(format!("dropout rate {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = self.value(input);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let needs = self.needs(input);
        Ok(self.push(t, Op::Dropout { input, mask }, needs))
    }

    /// Normalize each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Var {
        let v = self.value(input);
        let n = *v.shape().last().unwrap();
        let rows = v.len() / n;
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(input);
        self.push(t, Op::LayerNorm { input, inv_std }, needs)
    }

    /// Gradients of the scalar `output` with respect to every recorded value.
    ///
    /// A tape can be differentiated once; record a new one for another pass.
    pub fn backward(&mut self, output: Var) -> Result<Gradients, NnError> {
        if self.consumed {
            return Err(NnError::TapeConsumed);
        }
        if self.value(output).len() != 1 {
            return Err(NnError::NonScalarOutput(self.shape(output).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let m = av.len() / k;
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, av.len());
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_buf(grads, *b, bv.len());
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let bidx = |t: usize, p: usize, j: usize| {
                    if *trans_b {
                        t * k * n + j * k + p
                    } else {
                        t * k * n + p * n + j
                    }
                };
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, av.len());
                    for t in 0..bt {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[t * m * n + i * n + j] * bv[bidx(t, p, j)];
                                }
                                ga[t * m * k + i * k + p] += s;
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_buf(grads, *b, bv.len());
                    for t in 0..bt {
                        for i in 0..m {
                            for p in 0..k {
                                let x = av[t * m * k + i * k + p];
                                for j in 0..n {
                                    gb[bidx(t, p, j)] += x * g[t * m * n + i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, map } | Op::Sub { a, b, map } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if self.needs(*b) {
                    let blen = self.value(*b).len();
                    let gb = grad_buf(grads, *b, blen);
                    match map {
                        None => gb.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x),
                        Some(m) => m.iter().zip(g).for_each(|(&j, x)| gb[j] += sign * x),
                    }
                }
            }
            Op::Mul { a, b, map } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bat = |i: usize| match map {
                    None => i,
                    Some(m) => m[i],
                };
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[bat(i)];
                    }
                }
                if self.needs(*b) {
                    let gb = grad_buf(grads, *b, bv.len());
                    for i in 0..g.len() {
                        gb[bat(i)] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let gv = grad_buf(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (d, s) in gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let gi = grad_buf(grads, *input, outer * n * inner);
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    for (d, s) in gi[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
            Op::Reshape(input) => {
                let gi = grad_buf(grads, *input, g.len());
                gi.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permuted(g, node.value.shape(), &inverse);
                let gi = grad_buf(grads, *input, g.len());
                gi.iter_mut().zip(&back).for_each(|(o, x)| *o += x);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = axis_split(in_shape, *axis);
                let c = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let gi = grad_buf(grads, *input, outer * n * inner);
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            gi[base + i] += c * g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(input) | Op::MeanAll(input) => {
                let len = self.value(*input).len();
                let c = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                let gi = grad_buf(grads, *input, len);
                gi.iter_mut().for_each(|o| *o += c);
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let gi = grad_buf(grads, *input, out.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            gi[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Tanh(input) => {
                #[cfg(test)]
                let fault = if CORRUPT_TANH_BACKWARD.with(|c| c.get()) {
                    1.5
                } else {
                    1.0
                };
                #[cfg(not(test))]
                let fault = 1.0;
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += fault * g[i] * (1.0 - out[i] * out[i]);
                }
            }
            Op::Relu(input) => {
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    if out[i] > 0.0 {
                        gi[i] += g[i];
                    }
                }
            }
            Op::Elu(input) => {
                let x = self.value(*input).data();
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += g[i] * if x[i] > 0.0 { 1.0 } else { x[i].exp() };
                }
            }
            Op::LogCosh(input) => {
                let x = self.value(*input).data();
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += g[i] * x[i].tanh();
                }
            }
            Op::Square(input) => {
                let x = self.value(*input).data();
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += 2.0 * g[i] * x[i];
                }
            }
            Op::Dropout { input, mask } => {
                let gi = grad_buf(grads, *input, g.len());
                for i in 0..g.len() {
                    gi[i] += g[i] * mask[i];
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let n = *node.value.shape().last().unwrap();
                let gi = grad_buf(grads, *input, g.len());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xhat = &out[r * n..(r + 1) * n];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    let nf = n as f64;
                    for j in 0..n {
                        gi[r * n + j] += is / nf * (nf * gr[j] - sum_g - xhat[j] * sum_gx);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(cosh(x)) = |x| + log1p(exp(-2|x|)) - ln 2`, finite for any finite `x`.
pub fn logcosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}
