//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output and whatever it needs for the backward rule, and returns
//! a [`Var`] handle. Inputs always precede their consumers, so a single
//! reverse sweep over the node list visits each node exactly once.
//!
//! Parameters are borrowed from a [`ParamStore`] rather than copied in; the
//! gradient of each parameter is read back with [`Gradients::param`].

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass mode. Dropout is active only in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Deliberate corruption of a backward rule, used to prove that the gradient
/// checker catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the left-operand gradient of every matmul.
    MatmulLhsScale(f64),
}

/// Loss reduction over unmasked positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Sparse linear map between two spatial grids. Each output pixel is a
/// weighted sum of input pixels; applied independently per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// `taps[o]` lists `(input pixel index, weight)` for output pixel `o`.
    pub taps: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulLast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    MaskedSoftmax { x: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize>, inner: usize },
    Reshape(Var),
    Transpose(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Im2Col { x: Var, geom: ConvGeom },
    Resample { x: Var, map: Rc<SpatialMap> },
    NormalizeSum { x: Var, eps: f64 },
    WeightedSum { weights: Var, parts: Vec<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, scale: f64 },
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single forward/backward computation.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    fault: Option<Fault>,
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store attached.
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            fault: None,
        }
    }

    pub fn with_params(params: &'p ParamStore, mode: Mode) -> Self {
        let mut g = Graph::new(mode);
        g.param_vars = vec![None; params.len()];
        g.params = Some(params);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.expect("param node without store").tensor(*i),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_raw(Some(value), op, needs_grad)
    }

    fn push_raw(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Some(t), Op::Leaf, false)
    }

    /// A free input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(Some(t), Op::Leaf, true)
    }

    /// The node for parameter `index` of the attached store, created on first use.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push_raw(None, Op::Param(index), true);
        self.param_vars[index] = Some(v);
        v
    }

    /// Looks a parameter up by name. Panics if the store lacks it, which is a
    /// programming error in model construction.
    pub fn param_named(&mut self, name: &str) -> Var {
        let store = self.params.expect("graph has no parameter store");
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param(idx)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat axis", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::dim("concat", &first, s));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
                inner,
            },
            parts,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary(format!(
                    "token id {id} out of range for table of {v} rows"
                )));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn check_last(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let n = *self.shape(x).last().unwrap();
        if self.value(v).numel() != n {
            return Err(Error::dim(op, self.shape(x), self.shape(v)));
        }
        Ok(n)
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.check_last("add_bias", x, b)?;
        let bias = self.value(b).data();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, b), &[x, b]))
    }

    /// `x ⊙ g` with `g` broadcast along the last axis of `x`.
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.check_last("mul_last", x, g)?;
        let gate = self.value(g).data();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gate[i % n])
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulLast(x, g), &[x, g]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, logistic, Op::Sigmoid(x))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.map(x, |v| v * logistic(v), Op::Swish(x))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let n = self.value(x).numel();
        let rng = match self.rng.as_mut() {
            Some(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| o * len * inner + t * inner + i;
                let max = (0..len).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (src[at(t)] - max).exp();
                    out[at(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    out[at(t)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, axis: len, inner }, &[x]))
    }

    /// Row-wise softmax over a rank-2 score matrix where `allowed[i*cols+j]`
    /// gates each entry. Forbidden entries come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if allowed.len() != rows * cols {
            return Err(Error::dim("masked_softmax", &[rows, cols], &[allowed.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let ok = &allowed[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if row.iter().zip(ok).any(|(v, &a)| a && !v.is_finite()) {
                return Err(Error::NonFinite {
                    param: "attention scores".into(),
                });
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "attention row {r} has no allowed keys"
                )));
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for j in 0..cols {
                if ok[j] {
                    orow[j] = (row[j] - max).exp();
                    z += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::MaskedSoftmax { x, cols }, &[x]))
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let n = self.check_last("layer_norm gain", x, gain)?;
        self.check_last("layer_norm bias", x, bias)?;
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let slices = src.numel() / n;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.numel()];
        let mut inv_std = vec![0.0; slices];
        let mut out = vec![0.0; src.numel()];
        for s in 0..slices {
            let row = &src.data()[s * n..(s + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[s] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[s * n + j] = h;
                out[s * n + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Normalises a non-negative flat tensor to sum to one:
    /// `y_i = x_i / max(S, eps) + max(eps − S, 0) / (n·eps)` with `S = Σ_j x_j`.
    /// Above the floor this is `x_i / S`; below it the missing mass is spread
    /// evenly, so the output always sums to one.
    pub fn normalize_sum(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (s, n) = (src.sum(), src.numel() as f64);
        let denom = s.max(eps);
        let slack = if s < eps { (eps - s) / (n * eps) } else { 0.0 };
        let data = src.data().iter().map(|v| v / denom + slack).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::NormalizeSum { x, eps }, &[x])
    }

    /// `Σ_i weights[i] · parts[i]` over same-shaped parts.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        if self.value(weights).numel() != parts.len() || parts.is_empty() {
            return Err(Error::dim(
                "weighted_sum",
                self.shape(weights),
                &[parts.len()],
            ));
        }
        let shape = self.shape(parts[0]).to_vec();
        let mut out = vec![0.0; self.value(parts[0]).numel()];
        for (i, &p) in parts.iter().enumerate() {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(p)));
            }
            let w = self.value(weights).data()[i];
            for (o, v) in out.iter_mut().zip(self.value(p).data()) {
                *o += w * v;
            }
        }
        let t = Tensor::new(shape, out)?;
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(
            t,
            Op::WeightedSum {
                weights,
                parts: parts.to_vec(),
            },
            &inputs,
        ))
    }

    // ---- spatial --------------------------------------------------------

    /// Unfolds `[C,H,W]` into patches `[H_out·W_out, C·k·k]` with zero padding.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::dim("im2col", s, &[0, 0, 0])),
        };
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("im2col kernel", &[c, h, w], &[k, stride, pad]));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let src = self.value(x).data();
        let cols = c * k * k;
        let mut out = vec![0.0; out_h * out_w * cols];
        for_each_tap(&geom, |row, col, src_idx| out[row * cols + col] = src[src_idx]);
        let t = Tensor::new(vec![out_h * out_w, cols], out)?;
        Ok(self.push(t, Op::Im2Col { x, geom }, &[x]))
    }

    /// Applies a [`SpatialMap`] to each channel of `[C,H,W]`.
    pub fn resample(&mut self, x: Var, map: Rc<SpatialMap>) -> Result<Var> {
        let c = match self.shape(x) {
            &[c, h, w] if h == map.in_h && w == map.in_w => c,
            s => return Err(Error::dim("resample", s, &[map.in_h, map.in_w])),
        };
        let (n_in, n_out) = (map.in_h * map.in_w, map.out_h * map.out_w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * n_out];
        for ch in 0..c {
            let s = &src[ch * n_in..(ch + 1) * n_in];
            for (o, taps) in map.taps.iter().enumerate() {
                out[ch * n_out + o] = taps.iter().map(|&(i, wt)| wt * s[i]).sum();
            }
        }
        let t = Tensor::new(vec![c, map.out_h, map.out_w], out)?;
        Ok(self.push(t, Op::Resample { x, map }, &[x]))
    }

    // ---- losses ---------------------------------------------------------

    /// Softmax cross-entropy of `logits[T,V]` against `targets`, skipping
    /// positions where `mask` is false.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim("cross_entropy", &[t, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("cross_entropy: every position is masked".into()));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for r in 0..t {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
            if mask[r] {
                let target = targets[r];
                if target >= v {
                    return Err(Error::Vocabulary(format!(
                        "target id {target} out of range for {v} logits"
                    )));
                }
                loss += log_z - row[target];
            }
        }
        let out = Tensor::scalar(loss * scale);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                scale,
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let param_vars = self.param_vars.clone();
        Ok(Gradients { grads, param_vars })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[id].value.as_ref();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let lhs_scale = match self.fault {
                    Some(Fault::MatmulLhsScale(s)) => s,
                    None => 1.0,
                };
                acc(*a, grads, &mut |da| {
                    if lhs_scale == 1.0 {
                        gemm_bt(g, self.value(*b).data(), da, m, n, k);
                    } else {
                        let mut tmp = vec![0.0; m * k];
                        gemm_bt(g, self.value(*b).data(), &mut tmp, m, n, k);
                        da.iter_mut().zip(tmp).for_each(|(d, t)| *d += lhs_scale * t);
                    }
                });
                acc(*b, grads, &mut |db| gemm_at(self.value(*a).data(), g, db, k, m, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, grads, &mut |d| {
                    let n = d.len();
                    g.iter().enumerate().for_each(|(i, g)| d[i % n] += g);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, grads, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, grads, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulLast(x, gate) => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gate).data());
                let n = gv.len();
                acc(*x, grads, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gv[i % n];
                    }
                });
                acc(*gate, grads, &mut |d| {
                    for i in 0..g.len() {
                        d[i % n] += g[i] * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.unwrap().data();
                acc(*x, grads, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |d| {
                    for i in 0..d.len() {
                        let s = logistic(xv[i]);
                        d[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let y = out.unwrap().data();
                let (outer, len, inner) = (*outer, *axis, *inner);
                acc(*x, grads, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| o * len * inner + t * inner + i;
                            let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                            for t in 0..len {
                                d[at(t)] += y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, cols } => {
                let y = out.unwrap().data();
                let cols = *cols;
                acc(*x, grads, &mut |d| {
                    for r in 0..y.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in span {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                acc(*x, grads, &mut |d| {
                    for (s, &is) in inv_std.iter().enumerate() {
                        let span = s * n..(s + 1) * n;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let dh = g[span.start + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[span.start + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let i = span.start + j;
                            let dh = g[i] * gv[j];
                            d[i] += is * (dh - mean_d - xhat[i] * mean_dx);
                        }
                    }
                });
                acc(*gain, grads, &mut |d| {
                    for i in 0..g.len() {
                        d[i % n] += g[i] * xhat[i];
                    }
                });
                acc(*bias, grads, &mut |d| {
                    for i in 0..g.len() {
                        d[i % n] += g[i];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, grads, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                widths,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, grads, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            let dst = &mut d[o * w * inner..(o + 1) * w * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                acc(*x, grads, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                acc(*x, grads, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dmodel = self.value(*table).dims2().unwrap().1;
                acc(*table, grads, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id * dmodel..(id + 1) * dmodel];
                        dst.iter_mut()
                            .zip(&g[r * dmodel..(r + 1) * dmodel])
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let len = g.len() / r;
                acc(*x, grads, &mut |d| {
                    for i in 0..r {
                        for j in 0..len {
                            d[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let cols = geom.c * geom.k * geom.k;
                acc(*x, grads, &mut |d| {
                    for_each_tap(geom, |row, col, src_idx| d[src_idx] += g[row * cols + col]);
                });
            }
            Op::Resample { x, map } => {
                let (n_in, n_out) = (map.in_h * map.in_w, map.out_h * map.out_w);
                acc(*x, grads, &mut |d| {
                    for ch in 0..d.len() / n_in {
                        for (o, taps) in map.taps.iter().enumerate() {
                            let go = g[ch * n_out + o];
                            for &(i, wt) in taps {
                                d[ch * n_in + i] += wt * go;
                            }
                        }
                    }
                });
            }
            Op::NormalizeSum { x, eps } => {
                let xv = self.value(*x).data();
                let s = xv.iter().sum::<f64>();
                let shift = if s >= *eps {
                    g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>() / (s * s)
                } else {
                    g.iter().sum::<f64>() / (xv.len() as f64 * eps)
                };
                let denom = s.max(*eps);
                acc(*x, grads, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / denom - shift;
                    }
                });
            }
            Op::WeightedSum { weights, parts } => {
                let wv = self.value(*weights).data().to_vec();
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, grads, &mut |d| {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += wv[i] * g);
                    });
                }
                acc(*weights, grads, &mut |d| {
                    for (i, &p) in parts.iter().enumerate() {
                        d[i] += self
                            .value(p)
                            .data()
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                scale,
            } => {
                let v = probs.len() / targets.len();
                let go = g[0] * scale;
                acc(*logits, grads, &mut |d| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            d[r * v + j] += go * probs[r * v + j];
                        }
                        d[r * v + t] -= go;
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, grads, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom {
        c,
        h,
        w,
        k,
        stride,
        pad,
        out_h,
        out_w,
    } = *geom;
    let cols = c * k * k;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = oy * out_w + ox;
            for ch in 0..c {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let col = (ch * k + ky) * k + kx;
                        debug_assert!(col < cols);
                        f(row, col, (ch * h + iy as usize) * w + ix as usize);
                    }
                }
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of parameter `index`; zeros-equivalent `None` if unused.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.param_vars
            .get(index)
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::from_rows(&[vec![2.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![3.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);

        let i3 = g.constant(Tensor::identity(3));
        let m = Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mv = g.constant(m.clone());
        let p = g.matmul(i3, mv).unwrap();
        assert_eq!(g.value(p), &m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new(Mode::Eval);
        let x = vec_leaf(&mut g, &[0.7; 4]);
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let x = vec_leaf(&mut g, &[-3.0]);
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);

        let x = vec_leaf(&mut g, &[0.0, 2f64.ln()]);
        let s = g.softmax(x, 0).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let mut g = Graph::new(Mode::Eval);
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let x = g.leaf(Tensor::new(vec![2, 3, 4], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let y = g.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|t| y.at(&[o, t, i])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeros_and_rejects_empty_rows() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 3.0]]));
        let s = g.masked_softmax(x, &[true, false, true, true]).unwrap();
        let y = g.value(s).data();
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 0.0);
        assert!((y[2] + y[3] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn swish_values_and_slope() {
        let mut g = Graph::new(Mode::Eval);
        let x = vec_leaf(&mut g, &[0.0, 10.0]);
        let y = g.swish(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 10.0).abs() < 1e-3);
        let x0 = vec_leaf(&mut g, &[0.0]);
        let y0 = g.swish(x0);
        let l = g.sum(y0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x0).unwrap(), &[0.5]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new(Mode::Eval);
        let x = vec_leaf(&mut g, &[-1.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new(Mode::Eval);
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));

        let c = vec_leaf(&mut g, &[4.0, 4.0]);
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = vec_leaf(&mut g, &[1.0, 3.0]);
        let y = g.layer_norm(x, ones, zeros, 1e-14).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);

        let bias = g.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new(Mode::Train { seed: 7 });
        let x = g.leaf(Tensor::ones(&[100_000]));
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
        let y = g.dropout(x, 0.3).unwrap();
        let mean = g.value(y).sum() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");

        let mut e = Graph::new(Mode::Eval);
        let x = e.leaf(Tensor::ones(&[10]));
        assert_eq!(e.dropout(x, 0.3).unwrap(), x);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new(Mode::Eval);
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0]);

        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn normalize_sum_regimes() {
        let eps = 1e-4;
        let c = [0.7, -1.3, 2.1];
        for x0 in [vec![1.0, 3.0, 0.0], vec![1e-5, 3e-5, 0.0], vec![0.0; 3]] {
            let f = |x: &[f64]| {
                let mut g = Graph::new(Mode::Eval);
                let v = vec_leaf(&mut g, x);
                let n = g.normalize_sum(v, eps);
                let w = vec_leaf(&mut g, &c);
                let p = g.mul(n, w).unwrap();
                let l = g.sum(p);
                let y = g.value(n).data().to_vec();
                let grad = g.backward(l).unwrap().get(v).unwrap().to_vec();
                (y, g.value(l).data()[0], grad)
            };
            let (y, _, grad) = f(&x0);
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{y:?}");
            assert!(y.iter().all(|&v| v >= 0.0));
            if x0[0] > eps {
                assert_eq!(y[2], 0.0);
                assert!((y[0] - 0.25).abs() < 1e-15);
            }
            if x0.iter().all(|&v| v == 0.0) {
                assert!(y.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
                continue;
            }
            let h = 1e-9 * x0[1];
            for j in 0..2 {
                let (mut up, mut dn) = (x0.clone(), x0.clone());
                up[j] += h;
                dn[j] -= h;
                let fd = (f(&up).1 - f(&dn).1) / (2.0 * h);
                assert!((fd - grad[j]).abs() < 1e-5 * fd.abs().max(1.0), "{j}: {fd} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new(Mode::Eval);
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new(Mode::Eval);
        let logits = g.leaf(Tensor::zeros(&[3, 7]));
        let l = g
            .cross_entropy(logits, &[0, 3, 6], &[true; 3], Reduction::Mean)
            .unwrap();
        assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-15);
        assert!(g
            .cross_entropy(logits, &[0, 3, 6], &[false; 3], Reduction::Mean)
            .is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice_cols(c, 2, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(r), &[4, 2]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::new(Mode::Eval);
        let t = g.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.embedding(t, &[1, 4]), Err(Error::Vocabulary(_))));
    }
}
