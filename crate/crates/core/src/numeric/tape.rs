//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Values are computed eagerly while ops are recorded. `backward` replays
//! the tape in reverse, accumulating one contribution per use of each node.
//! Gradients only flow through nodes whose `requires_grad` flag is set; a
//! node created by [`Tape::detach`] or [`Tape::constant`] is a hard
//! stop-gradient boundary.

use std::collections::HashMap;

use super::lstm::{self, LstmCache, LstmDims};
use super::tensor::{numel, ParamId, Tensor};
use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used to prove that the gradient
/// checker detects broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Flip the sign of the log-softmax input gradient.
    NegateLogSoftmax,
    /// Treat `tanh` as the identity in backward.
    TanhAsIdentity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows { src: Var, start: usize, end: usize },
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    Stack(Vec<Var>),
    Row { src: Var, index: usize },
    Gather { table: Var, indices: Vec<usize> },
    Select { src: Var, indices: Vec<usize> },
    L2NormalizeRows { src: Var, norms: Vec<f64> },
    L2Distance(Var, Var),
    LogSoftmax(Var),
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Lstm {
        x: Var,
        wx: Var,
        wh: Var,
        b: Var,
        reverse: bool,
        cache: Box<LstmCache>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<BackwardFault>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass applies `fault`. Test-and-diagnostic use only.
    pub fn with_fault(fault: BackwardFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.len() > 2 || numel(&shape) != value.len() {
            return Err(mismatch("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn vector(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(vec![n], value, Op::Leaf, false)
    }

    /// Binds a parameter tensor. Repeated calls with the same tensor return
    /// the same node, so all uses accumulate into one gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.bind(t, t.requires_grad())
    }

    /// Binds a tensor as a constant regardless of its own flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        self.bind(t, false)
    }

    fn bind(&mut self, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable);
        self.params.insert(t.id(), v);
        v
    }

    /// Copies the value into a fresh constant: the stop-gradient of the
    /// architecture diagrams.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape shapes are valid")
    }

    // ---- linear algebra ------------------------------------------------

    /// `[k] x [k, n] -> [n]` or `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = rows_cols(&sa);
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        let brow = &bv[p * n..(p + 1) * n];
                        orow.iter_mut().zip(brow).for_each(|(o, w)| *o += x * w);
                    }
                }
            }
        }
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector `[n]` to every row of `a` (`[n]` or `[m, n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        let (m, n) = rows_cols(&sa);
        if sa.is_empty() || sb != [n] {
            return Err(mismatch("add_bias", &sa, &sb));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(bv)
                .for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(sa, out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ---- reductions and reshaping --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// Mean over rows `[start, end)` of a matrix, giving a vector.
    pub fn mean_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let (m, n) = rows_cols(&shape);
        if shape.len() != 2 {
            return Err(mismatch("mean_rows", &shape, &[start, end]));
        }
        if start >= end || end > m {
            return Err(Error::SpanOutOfRange { start, end, len: m });
        }
        let v = self.value(src);
        let inv = 1.0 / (end - start) as f64;
        let mut out = vec![0.0; n];
        for r in start..end {
            out.iter_mut()
                .zip(&v[r * n..(r + 1) * n])
                .for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[src]);
        Ok(self.push(vec![n], out, Op::MeanRows { src, start, end }, rg))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(mismatch("concat", self.shape(p), &[]));
            }
            out.extend_from_slice(self.value(p));
        }
        if out.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![out.len()], out, Op::Concat(parts.to_vec()), rg))
    }

    /// `[m, a] ++ [m, b] -> [m, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat_cols", &sa, &sb));
        }
        let (m, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, ca + cb], out, Op::ConcatCols(a, b), rg))
    }

    /// Stacks equal-shaped scalars into `[k]` or vectors into `[k, n]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() > 1 {
            return Err(mismatch("stack", &s0, &[]));
        }
        let mut out = Vec::with_capacity(parts.len() * numel(&s0));
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(mismatch("stack", &s0, self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let shape = if s0.is_empty() {
            vec![parts.len()]
        } else {
            vec![parts.len(), s0[0]]
        };
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::Stack(parts.to_vec()), rg))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, src: Var, index: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let (m, n) = rows_cols(&shape);
        if shape.len() != 2 || index >= m {
            return Err(mismatch("row", &shape, &[index]));
        }
        let out = self.value(src)[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(&[src]);
        Ok(self.push(vec![n], out, Op::Row { src, index }, rg))
    }

    /// Embedding lookup: rows of `table` (`[V, d]`) at `indices`, giving `[len, d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather", &shape, &[]));
        }
        if indices.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (vocab, d) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(Error::OutOfVocab {
                    index: i,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len(), d], out, op, rg))
    }

    /// Picks entries of a vector.
    pub fn select(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.len() != 1 || indices.iter().any(|&i| i >= shape[0]) {
            return Err(mismatch("select", &shape, indices));
        }
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let v = self.value(src);
        let out = indices.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[src]);
        let op = Op::Select {
            src,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len()], out, op, rg))
    }

    // ---- fused ops -----------------------------------------------------

    /// Row-wise ℓ2 normalization. Fails with `ZeroNorm` if any row norm is
    /// at or below [`NORM_EPS`].
    pub fn l2_normalize(&mut self, src: Var) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() {
            return Err(mismatch("l2_normalize", &shape, &[]));
        }
        let (m, n) = rows_cols(&shape);
        let v = self.value(src);
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= NORM_EPS {
                return Err(Error::ZeroNorm { norm });
            }
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(row)
                .for_each(|(o, x)| *o = x / norm);
            norms.push(norm);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(shape, out, Op::L2NormalizeRows { src, norms }, rg))
    }

    /// Euclidean distance between two vectors. The gradient at zero distance
    /// is taken as zero.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.len() != 1 {
            return Err(mismatch("l2_distance", sa, sb));
        }
        let d = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![], vec![d], Op::L2Distance(a, b), rg))
    }

    /// Log-softmax of a vector, stabilized by subtracting the maximum.
    pub fn log_softmax(&mut self, src: Var) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.len() != 1 {
            return Err(mismatch("log_softmax", &shape, &[]));
        }
        let v = self.value(src);
        let lse = log_sum_exp(v);
        let out = v.iter().map(|x| x - lse).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(shape, out, Op::LogSoftmax(src), rg))
    }

    /// Mean binary cross-entropy of logits against `{0, 1}` labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if numel(&shape) != labels.len() || shape.len() > 1 {
            return Err(mismatch("bce_with_logits", &shape, &[labels.len()]));
        }
        let v = self.value(logits);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("bce_with_logits"));
        }
        let loss = v
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(&[logits]);
        let op = Op::BceWithLogits {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![], vec![loss], op, rg))
    }

    /// One LSTM direction over `x` (`[len, d_in]`), giving `[len, h]`.
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (sx, swx, swh, sb) = (
            self.shape(x).to_vec(),
            self.shape(wx).to_vec(),
            self.shape(wh).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || swx.len() != 2 || sx[1] != swx[0] {
            return Err(mismatch("lstm", &sx, &swx));
        }
        let g4 = swx[1];
        if g4 % 4 != 0 || swh != [g4 / 4, g4] || sb != [g4] {
            return Err(mismatch("lstm", &swx, &swh));
        }
        let dims = LstmDims {
            len: sx[0],
            input: sx[1],
            hidden: g4 / 4,
            reverse,
        };
        let (out, cache) = lstm::forward(
            &dims,
            self.value(x),
            self.value(wx),
            self.value(wh),
            self.value(b),
        );
        let rg = self.rg(&[x, wx, wh, b]);
        let op = Op::Lstm {
            x,
            wx,
            wh,
            b,
            reverse,
            cache: Box::new(cache),
        };
        Ok(self.push(vec![dims.len, dims.hidden], out, op, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients for every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(Error::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        contrib(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = rows_cols(sa);
                let n = sb[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x != 0.0 {
                                gb[p * n..(p + 1) * n]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, y)| *o += x * y);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let identity = self.fault == Some(BackwardFault::TanhAsIdentity);
                self.accumulate(grads, *a, |ga| {
                    for ((o, x), t) in ga.iter_mut().zip(g).zip(y) {
                        *o += if identity { *x } else { x * (1.0 - t * t) };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((o, x), s) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * s * (1.0 - s);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * x * v;
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let inv = g[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += inv));
            }
            Op::MeanRows { src, start, end } => {
                let n = node.value.len();
                let inv = 1.0 / (end - start) as f64;
                self.accumulate(grads, *src, |gs| {
                    for r in *start..*end {
                        gs[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(o, x)| *o += x * inv);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, ca) = rows_cols(self.shape(*a));
                let cb = self.shape(*b)[1];
                let w = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for r in 0..m {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * w..r * w + ca]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..m {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &g[r * w + ca..(r + 1) * w]);
                    }
                });
            }
            Op::Stack(parts) => {
                let n = self.value(parts[0]).len();
                for (r, p) in parts.iter().enumerate() {
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Row { src, index } => {
                let n = g.len();
                self.accumulate(grads, *src, |gs| add_into(&mut gs[index * n..(index + 1) * n], g));
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut gt[ix * d..(ix + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Select { src, indices } => {
                self.accumulate(grads, *src, |gs| {
                    for (r, &ix) in indices.iter().enumerate() {
                        gs[ix] += g[r];
                    }
                });
            }
            Op::L2NormalizeRows { src, norms } => {
                let n = rows_cols(&node.shape).1;
                let y = &node.value;
                self.accumulate(grads, *src, |gs| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gs[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::L2Distance(a, b) => {
                let d = node.value[0];
                if d > 0.0 {
                    let s = g[0] / d;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(grads, *a, |ga| {
                        for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                            *o += s * (x - y);
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                            *o -= s * (x - y);
                        }
                    });
                }
            }
            Op::LogSoftmax(src) => {
                let y = &node.value;
                let total: f64 = g.iter().sum();
                let sign = if self.fault == Some(BackwardFault::NegateLogSoftmax) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, *src, |gs| {
                    for ((o, x), ly) in gs.iter_mut().zip(g).zip(y) {
                        *o += sign * (x - ly.exp() * total);
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let inv = g[0] / labels.len() as f64;
                let lv = self.value(*logits);
                self.accumulate(grads, *logits, |gl| {
                    for ((o, x), y) in gl.iter_mut().zip(lv).zip(labels) {
                        *o += inv * (sigmoid(*x) - y);
                    }
                });
            }
            Op::Lstm {
                x,
                wx,
                wh,
                b,
                reverse,
                cache,
            } => {
                let sx = self.shape(*x);
                let dims = LstmDims {
                    len: sx[0],
                    input: sx[1],
                    hidden: node.shape[1],
                    reverse: *reverse,
                };
                let lg = lstm::backward(
                    &dims,
                    self.value(*x),
                    self.value(*wx),
                    self.value(*wh),
                    &node.value,
                    cache,
                    g,
                );
                self.accumulate(grads, *x, |gx| add_into(gx, &lg.dx));
                self.accumulate(grads, *wx, |gw| add_into(gw, &lg.dwx));
                self.accumulate(grads, *wh, |gw| add_into(gw, &lg.dwh));
                self.accumulate(grads, *b, |gb| add_into(gb, &lg.db));
            }
        }
    }

    /// Gradient of the last backward pass at `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a bound parameter tensor; `None` if the
    /// tensor was never bound, was bound frozen, or received no gradient.
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&t.id()).and_then(|v| self.grad(*v))
    }

    /// Copies the gradient for `t` into its own buffer (zeros when none
    /// reached it).
    pub fn write_grad(&self, t: &mut Tensor) {
        let src = self.param_grad(t).map(|g| g.to_vec());
        if let Some(dst) = t.grad_mut() {
            match src {
                Some(g) => dst.copy_from_slice(&g),
                None => dst.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `log Σ exp(v)`, computed as `max + log Σ exp(v - max)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
