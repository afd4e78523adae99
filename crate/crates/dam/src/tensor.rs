//! Dense vector/matrix values with reverse-mode differentiation on a tape.
//!
//! Everything downstream (recurrent cells, encoders, the gated decoder,
//! training) is expressed through the small op set here. Values are
//! immutable once produced; a [`Tape`] is single-writer, and independent
//! tapes can run in parallel. Gradient accumulation replays the tape in
//! reverse in a fixed order, so backward passes are bitwise deterministic.
//!
//! Training runs in `f32`; gradient checking instantiates the same graphs
//! in `f64` (see [`crate::gradcheck`]).

use crate::error::{DamError, Result};

/// Element type for all numeric state. `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed, just not left-to-right, which keeps results deterministic while
/// letting the compiler vectorize.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + pa[k] * pb[k];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    ((half[0] + half[1]) + (half[2] + half[3])) + tail
}

// ── Tensors and parameter storage ────────────────────────────────────

/// A dense value: flat data plus a shape (1-D for vectors, 2-D row-major
/// for matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(DamError::InvalidArgument(format!(
                "tensor shape {shape:?} does not match data length {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn vector(data: Vec<S>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the grad field, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors. Registration order is
/// fixed by construction, which pins gradient and optimizer ordering.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor.with_grad()));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Tensor<S>)> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| (ParamId(i), &self.entries[i].1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { w: Var, x: Var, b: Option<Var> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Log { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddN { parts: Vec<Var> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Softmax { x: Var },
    Pick { x: Var, index: usize },
    SumAll { x: Var },
    ScaleBy { s: Var, x: Var },
    ScaleConst { x: Var, c: f64 },
    EmbedRow { table: Var, row: usize },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op,
    value: Vec<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Records primitive operations in topological order; every operation's
/// inputs precede it by construction, so the reverse sweep visits uses
/// before definitions.
#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    /// ParamId -> Var cache, so a parameter used many times in one graph
    /// is a single leaf and its gradient accumulates additively.
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Tape that tracks gradients for parameters bound via [`Tape::param`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: same op semantics, no gradient bookkeeping.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `v`, if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a bound parameter.
    pub fn param_grad(&self, id: ParamId) -> Option<&[S]> {
        let var = (*self.param_vars.get(id.index())?)?;
        self.grad(var)
    }

    fn push(&mut self, op: Op, value: Vec<S>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            shape,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Binds a non-differentiable vector constant.
    pub fn constant(&mut self, data: &[S]) -> Var {
        self.push(Op::Leaf, data.to_vec(), vec![data.len()], false)
    }

    /// Binds a parameter tensor as a leaf, snapshotting its current data.
    /// Repeated binds of the same id return the same node.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        if self.param_vars.len() < params.len() {
            self.param_vars.resize(params.len(), None);
        }
        if let Some(var) = self.param_vars[id.index()] {
            return var;
        }
        let t = params.get(id);
        let var = self.push(
            Op::Leaf,
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
        );
        self.param_vars[id.index()] = Some(var);
        var
    }

    // ── Forward ops ──────────────────────────────────────────────

    /// `W·x + b` for `W: [m, n]`, `x: [n]`, optional `b: [m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(DamError::shapes("linear", ws, xs));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [m] {
                return Err(DamError::shapes("linear bias", &[m], bs));
            }
        }
        let mut out = Vec::with_capacity(m);
        {
            let wd = &self.nodes[w.0].value;
            let xd = &self.nodes[x.0].value;
            for row in wd.chunks_exact(n) {
                out.push(dot(row, xd));
            }
        }
        if let Some(b) = b {
            let bd = &self.nodes[b.0].value;
            for (o, v) in out.iter_mut().zip(bd) {
                *o = *o + *v;
            }
        }
        let needs = self.needs(w) || self.needs(x) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Linear { w, x, b }, out, vec![m], needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&z| sigmoid(z)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, value, shape, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|z| z.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Op::Tanh { x }, value, shape, needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|z| z.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Op::Log { x }, value, shape, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DamError::shapes("add", self.shape(a), self.shape(b)));
        }
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, shape, needs))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DamError::shapes("mul", self.shape(a), self.shape(b)));
        }
        let value: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, value, shape, needs))
    }

    /// Element-wise sum of same-shape vectors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DamError::InvalidArgument("add_n of no inputs".into()))?;
        for &p in &parts[1..] {
            if self.shape(p) != self.shape(first) {
                return Err(DamError::shapes("add_n", self.shape(first), self.shape(p)));
            }
        }
        let mut value = self.nodes[first.0].value.clone();
        for &p in &parts[1..] {
            for (o, v) in value.iter_mut().zip(&self.nodes[p.0].value) {
                *o = *o + *v;
            }
        }
        let shape = self.nodes[first.0].shape.clone();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::AddN {
                parts: parts.to_vec(),
            },
            value,
            shape,
            needs,
        ))
    }

    /// Mean of same-shape vectors.
    pub fn mean_n(&mut self, parts: &[Var]) -> Result<Var> {
        let sum = self.add_n(parts)?;
        Ok(self.scale(sum, 1.0 / parts.len() as f64))
    }

    /// Concatenation of vectors, preserving order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DamError::InvalidArgument("concat of no inputs".into()));
        }
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(DamError::shapes("concat", &[0], self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.nodes[p.0].value.len()).sum();
        let mut value = Vec::with_capacity(total);
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            vec![total],
            needs,
        ))
    }

    /// Contiguous sub-range of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if self.shape(x).len() != 1 || start + len > n {
            return Err(DamError::InvalidArgument(format!(
                "slice [{start}, {start}+{len}) out of bounds for vector of length {n}"
            )));
        }
        let value = self.nodes[x.0].value[start..start + len].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Slice { x, start }, value, vec![len], needs))
    }

    /// Softmax with max-subtraction for stability. Output entries are
    /// positive and sum to one.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xd = &self.nodes[x.0].value;
        let max = xd.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut value: Vec<S> = xd.iter().map(|&z| (z - max).exp()).collect();
        let sum = value.iter().fold(S::zero(), |acc, &v| acc + v);
        for v in &mut value {
            *v = *v / sum;
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Op::Softmax { x }, value, shape, needs)
    }

    /// Scalar `x[index]`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if index >= n {
            return Err(DamError::InvalidArgument(format!(
                "pick index {index} out of bounds for vector of length {n}"
            )));
        }
        let value = vec![self.nodes[x.0].value[index]];
        let needs = self.needs(x);
        Ok(self.push(Op::Pick { x, index }, value, vec![1], needs))
    }

    /// Scalar sum of all entries.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = vec![self.nodes[x.0]
            .value
            .iter()
            .fold(S::zero(), |acc, &v| acc + v)];
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, value, vec![1], needs)
    }

    /// Scalar variable times vector.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(DamError::shapes("scale_by", &[1], self.shape(s)));
        }
        let sv = self.nodes[s.0].value[0];
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| sv * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(s) || self.needs(x);
        Ok(self.push(Op::ScaleBy { s, x }, value, shape, needs))
    }

    /// Constant times vector.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64_lossy(c);
        let value: Vec<S> = self.nodes[x.0].value.iter().map(|&v| cs * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(Op::ScaleConst { x, c }, value, shape, needs)
    }

    /// Row `row` of a `[rows, cols]` table (embedding lookup).
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(DamError::shapes("embed_row", &[0, 0], ts));
        }
        let (rows, cols) = (ts[0], ts[1]);
        if row >= rows {
            return Err(DamError::TokenOutOfRange {
                id: row,
                vocab: rows,
            });
        }
        let value = self.nodes[table.0].value[row * cols..(row + 1) * cols].to_vec();
        let needs = self.needs(table);
        Ok(self.push(Op::EmbedRow { table, row }, value, vec![cols], needs))
    }

    // ── Backward ─────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (o, d) in g.iter_mut().zip(delta) {
                    *o += *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Accumulates into a sub-range of a node's gradient, allocating
    /// zeros on first touch. Backward path of the scatter-style ops.
    fn accumulate_range(&mut self, v: Var, offset: usize, delta: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].value.len();
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| vec![S::zero(); numel]);
        for (o, d) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *o += *d;
        }
    }

    /// Reverse sweep from a scalar loss. Populates per-node gradients;
    /// parameter gradients are read back via [`Tape::param_grad`] or
    /// written into tensors with [`accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(DamError::InvalidArgument(
                "backward on an inference tape".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DamError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Linear { w, x, b } => {
                    let n = self.nodes[x.0].value.len();
                    if self.needs(w) {
                        let mut dw = vec![S::zero(); dy.len() * n];
                        let xd = &self.nodes[x.0].value;
                        for (row, &g) in dw.chunks_exact_mut(n).zip(&dy) {
                            for (o, &xv) in row.iter_mut().zip(xd) {
                                *o = g * xv;
                            }
                        }
                        self.accumulate(w, &dw);
                    }
                    if self.needs(x) {
                        let mut dx = vec![S::zero(); n];
                        let wd = &self.nodes[w.0].value;
                        for (row, &g) in wd.chunks_exact(n).zip(&dy) {
                            for (o, &wv) in dx.iter_mut().zip(row) {
                                *o += g * wv;
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if let Some(b) = b {
                        self.accumulate(b, &dy);
                    }
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<S> = dy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<S> = dy
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| g * (S::one() - y * y))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Log { x } => {
                    let dx: Vec<S> = dy
                        .iter()
                        .zip(&self.nodes[x.0].value)
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &dy);
                    self.accumulate(b, &dy);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<S> = dy
                            .iter()
                            .zip(&self.nodes[b.0].value)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<S> = dy
                            .iter()
                            .zip(&self.nodes[a.0].value)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddN { parts } => {
                    for p in parts {
                        self.accumulate(p, &dy);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        self.accumulate(p, &dy[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice { x, start } => {
                    self.accumulate_range(x, start, &dy);
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let inner = dy
                        .iter()
                        .zip(y)
                        .fold(S::zero(), |acc, (&g, &v)| acc + g * v);
                    let dx: Vec<S> = dy.iter().zip(y).map(|(&g, &v)| v * (g - inner)).collect();
                    self.accumulate(x, &dx);
                }
                Op::Pick { x, index } => {
                    self.accumulate_range(x, index, &dy);
                }
                Op::SumAll { x } => {
                    let dx = vec![dy[0]; self.nodes[x.0].value.len()];
                    self.accumulate(x, &dx);
                }
                Op::ScaleBy { s, x } => {
                    if self.needs(s) {
                        let ds = dy
                            .iter()
                            .zip(&self.nodes[x.0].value)
                            .fold(S::zero(), |acc, (&g, &v)| acc + g * v);
                        self.accumulate(s, &[ds]);
                    }
                    if self.needs(x) {
                        let sv = self.nodes[s.0].value[0];
                        let dx: Vec<S> = dy.iter().map(|&g| g * sv).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::ScaleConst { x, c } => {
                    let cs = S::from_f64_lossy(c);
                    let dx: Vec<S> = dy.iter().map(|&g| g * cs).collect();
                    self.accumulate(x, &dx);
                }
                Op::EmbedRow { table, row } => {
                    let cols = dy.len();
                    self.accumulate_range(table, row * cols, &dy);
                }
            }
            // Leaf gradients stay readable after the sweep.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(dy);
            }
        }
        Ok(())
    }
}

/// Adds the tape's parameter gradients into the tensors' grad fields.
pub fn accumulate_param_grads<S: Scalar>(tape: &Tape<S>, params: &mut ParamSet<S>) {
    for id in params.ids().collect::<Vec<_>>() {
        if let Some(g) = tape.param_grad(id) {
            let g = g.to_vec();
            params.get_mut(id).accumulate_grad(&g);
        }
    }
}
