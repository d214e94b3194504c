//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the adjoint. [`Graph::backward`] walks the record once, in
//! reverse execution order.

use crate::error::{Result, TabError};
use crate::numerics::{GradBuffer, ParamId, ParamStore, Tensor};
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { x: Var, row: Var },
    MulScalar { x: Var, s: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Exp(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore_id: usize, probs: Vec<T>, count: usize },
    CosineDistance { a: Var, b: Var, dot: T, na: T, nb: T },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A graph is single-threaded; independent graphs can run concurrently and
/// their parameter gradients are merged with [`GradBuffer::merge`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
    param_cache: Vec<Option<Var>>,
    adjoint_steps: usize,
}

fn dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape.iter().product::<usize>() / cols, cols)
        }
    }
}

fn ensure<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            param_cache: Vec::new(),
            adjoint_steps: 0,
        }
    }

    /// Drops every recorded node and saved activation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.params.clear();
        self.param_cache.clear();
        self.adjoint_steps = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes.
    pub fn num_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Adjoint steps executed by the last [`Graph::backward`] call.
    pub fn adjoint_steps(&self) -> usize {
        self.adjoint_steps
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].shape)
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TabError::NumericInput { op })
        }
    }

    // ---- leaves ---------------------------------------------------------

    /// Leaf copied from `t`; it requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_cache.len() <= id.0 {
            self.param_cache.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_cache[id.0] {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.param_cache[id.0] = Some(v);
        self.params.push((id, v));
        v
    }

    /// Parameter gradients of the last backward pass.
    pub fn param_grads(&self, num_params: usize) -> GradBuffer<T> {
        let mut buf = GradBuffer::new(num_params);
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                buf.accumulate(id, g);
            }
        }
        buf
    }

    // ---- linear algebra -------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TabError::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let mut ar = MatRef::new(&self.nodes[a.0].value, sa[0], sa[1]);
        let mut br = MatRef::new(&self.nodes[b.0].value, sb[0], sb[1]);
        if ta {
            ar = ar.t();
        }
        if tb {
            br = br.t();
        }
        let (m, k) = ar.dims();
        let (k2, n) = br.dims();
        if k != k2 {
            return Err(TabError::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(ar, br, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b` for `a: m×k`, `b: k×p`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: p×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TabError::Dimension { op: "transpose", lhs: s.clone(), rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TabError::Dimension { op, lhs: sa.clone(), rhs: sb.clone() });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, Op::Scale(x, c), rg)
    }

    /// Adds a length-`cols` row to every row of `x` (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.nodes[row.0].value.len() != c {
            return Err(TabError::Dimension {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let r = &self.nodes[row.0].value;
        let out = self.nodes[x.0]
            .value
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::AddRow { x, row }, rg))
    }

    /// Multiplies `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(TabError::Rank { op: "mul_scalar", shape: self.nodes[s.0].shape.clone() });
        }
        let k = self.nodes[s.0].value[0];
        let out = self.nodes[x.0].value.iter().map(|&v| v * k).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::MulScalar { x, s }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, Op::Exp(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let out = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, Op::Gelu(x), rg)
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates along the last axis. All inputs must share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TabError::Parameter("concat of nothing".into()))?;
        let (rows, _) = self.dims(first);
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if r != rows {
                return Err(TabError::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &x in xs {
                let (_, c) = self.dims(x);
                out.extend_from_slice(&self.nodes[x.0].value[i * c..(i + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Stacks rows. All inputs must share the column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TabError::Parameter("concat of nothing".into()))?;
        let (_, cols) = self.dims(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if c != cols {
                return Err(TabError::Dimension {
                    op: "concat_rows",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            rows += r;
            out.extend_from_slice(&self.nodes[x.0].value);
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(TabError::Dimension {
                op: "slice_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let out = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(TabError::Dimension {
                op: "slice_cols",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Gathers rows of `table` (vocab × d).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(TabError::Parameter("embedding lookup of no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TabError::Dimension { op: "embedding", lhs: vec![v, d], rhs: vec![bad] });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); c];
        for chunk in self.nodes[x.0].value.chunks(c) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        self.push(vec![1, c], out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    // ---- normalisation and losses ---------------------------------------

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let (_, c) = self.dims(x);
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TabError::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != c {
                return Err(TabError::Dimension {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut out = vec![T::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            rg,
        ))
    }

    /// Each row divided by its Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let mut out = self.nodes[x.0].value.clone();
        let mut norms = Vec::new();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(self.nodes[x.0].shape.clone(), out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean negative log-softmax of `targets` over rows of `logits`, skipping `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(TabError::Dimension {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id != ignore_id && id >= v) {
            return Err(TabError::Dimension { op: "cross_entropy", lhs: vec![t, v], rhs: vec![bad] });
        }
        self.check_finite(logits, "cross_entropy")?;
        let count = targets.iter().filter(|&&id| id != ignore_id).count();
        if count == 0 {
            return Err(TabError::EmptyLoss);
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (i, (row, &target)) in probs.chunks_mut(v).zip(targets).enumerate() {
            softmax_in_place(row);
            if target != ignore_id {
                // -log p = logsumexp - logit, kept in log space
                let z = &lv[i * v..(i + 1) * v];
                let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                total += lse - z[target];
            }
        }
        let value = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore_id, probs, count },
            rg,
        ))
    }

    /// `1 − ⟨a,b⟩/(‖a‖‖b‖)`; a zero-norm operand yields 1 and zero gradients.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(TabError::Dimension {
                op: "cosine_distance",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let dot = av.iter().zip(bv).map(|(&x, &y)| x * y).sum::<T>();
        let na = av.iter().map(|&x| x * x).sum::<T>().sqrt();
        let nb = bv.iter().map(|&x| x * x).sum::<T>().sqrt();
        let value = if na > T::zero() && nb > T::zero() {
            T::one() - dot / (na * nb)
        } else {
            T::one()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![value], Op::CosineDistance { a, b, dot, na, nb }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Computes `d loss / d node` for every node that requires grad.
    ///
    /// Node gradients are recomputed from scratch on every call; parameter
    /// gradients only accumulate when the caller merges [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TabError::Rank { op: "backward", shape: self.nodes[loss.0].shape.clone() });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.adjoint_steps = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.adjoint_steps += 1;
            self.step(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn step(&mut self, idx: usize, dy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let (m, n) = (node.shape[0], node.shape[1]);
                let dc = MatRef::new(dy, m, n);
                let mut ar = MatRef::new(&nodes[a.0].value, sa[0], sa[1]);
                let mut br = MatRef::new(&nodes[b.0].value, sb[0], sb[1]);
                if ta {
                    ar = ar.t();
                }
                if tb {
                    br = br.t();
                }
                if let Some(ga) = ensure(grads, nodes, a) {
                    if ta {
                        // dA (k×m) = B'·dCᵀ
                        gemm(br, dc.t(), T::one(), ga);
                    } else {
                        gemm(dc, br.t(), T::one(), ga);
                    }
                }
                if let Some(gb) = ensure(grads, nodes, b) {
                    if tb {
                        // dB (n×k) = dCᵀ·A'
                        gemm(dc.t(), ar, T::one(), gb);
                    } else {
                        gemm(ar.t(), dc, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = ensure(grads, nodes, v) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = ensure(grads, nodes, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = ensure(grads, nodes, *b) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(g) = ensure(grads, nodes, a) {
                    let bv = &nodes[b.0].value;
                    g.iter_mut().zip(dy.iter().zip(bv)).for_each(|(g, (&d, &y))| *g += d * y);
                }
                if let Some(g) = ensure(grads, nodes, b) {
                    let av = &nodes[a.0].value;
                    g.iter_mut().zip(dy.iter().zip(av)).for_each(|(g, (&d, &x))| *g += d * x);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(g) = ensure(grads, nodes, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * c);
                }
            }
            Op::AddRow { x, row } => {
                let c = nodes[row.0].value.len();
                if let Some(g) = ensure(grads, nodes, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = ensure(grads, nodes, *row) {
                    for chunk in dy.chunks(c) {
                        g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let k = nodes[s.0].value[0];
                if let Some(g) = ensure(grads, nodes, x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * k);
                }
                if let Some(g) = ensure(grads, nodes, s) {
                    let xv = &nodes[x.0].value;
                    g[0] += dy.iter().zip(xv).map(|(&d, &v)| d * v).sum::<T>();
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = dims(&nodes[x.0].shape);
                    if let Some(g) = ensure(grads, nodes, x) {
                        for i in 0..r {
                            let src = &dy[i * total + offset..i * total + offset + c];
                            g[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x.0].value.len();
                    if let Some(g) = ensure(grads, nodes, x) {
                        g.iter_mut().zip(&dy[offset..offset + len]).for_each(|(g, &d)| *g += d);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = dims(&nodes[x.0].shape);
                let start = *start;
                if let Some(g) = ensure(grads, nodes, *x) {
                    g[start * c..start * c + dy.len()].iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::SliceCols { x, start } => {
                let (_, c) = dims(&nodes[x.0].shape);
                let (r, len) = (node.shape[0], node.shape[1]);
                let start = *start;
                if let Some(g) = ensure(grads, nodes, *x) {
                    for i in 0..r {
                        g[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&dy[i * len..(i + 1) * len])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, d) = dims(&nodes[table.0].shape);
                if let Some(g) = ensure(grads, nodes, *table) {
                    for (k, &i) in ids.iter().enumerate() {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&dy[k * d..(k + 1) * d])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = dims(&nodes[x.0].shape);
                let inv = T::one() / T::of(r as f64);
                if let Some(g) = ensure(grads, nodes, *x) {
                    for chunk in g.chunks_mut(c) {
                        chunk.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * inv);
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy[0];
                if let Some(g) = ensure(grads, nodes, *x) {
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(g) = ensure(grads, nodes, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, c) = dims(&node.shape);
                let y = &node.value;
                if let Some(g) = ensure(grads, nodes, *x) {
                    for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(dy.chunks(c)) {
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = dims(&node.shape);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let n = T::of(c as f64);
                let xhat = |i: usize, j: usize| (xv[i * c + j] - mean[i]) * rstd[i];
                if let Some(g) = ensure(grads, nodes, gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, beta) {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j];
                        }
                    }
                }
                if let Some(g) = ensure(grads, nodes, x) {
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = dy[i * c + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat(i, j);
                        }
                        let k = rstd[i] / n;
                        for j in 0..c {
                            g[i * c + j] += k * (n * dxhat[j] - s1 - xhat(i, j) * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let xv = &nodes[x.0].value;
                if let Some(g) = ensure(grads, nodes, *x) {
                    for ((g, &v), &d) in g.iter_mut().zip(xv).zip(dy) {
                        let u = c * (v + a * v * v * v);
                        let th = u.tanh();
                        let du = c * (T::one() + three * a * v * v);
                        let deriv = half * (T::one() + th) + half * v * (T::one() - th * th) * du;
                        *g += d * deriv;
                    }
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                if let Some(g) = ensure(grads, nodes, *x) {
                    g.iter_mut().zip(y.iter().zip(dy)).for_each(|(g, (&y, &d))| *g += d * y);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, c) = dims(&node.shape);
                let y = &node.value;
                if let Some(g) = ensure(grads, nodes, *x) {
                    for (i, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dy[i * c..(i + 1) * c];
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            g[i * c + j] += (dr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore_id, probs, count } => {
                let (_, v) = dims(&nodes[logits.0].shape);
                let scale = dy[0] / T::of(*count as f64);
                if let Some(g) = ensure(grads, nodes, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::CosineDistance { a, b, dot, na, nb } => {
                let (a, b, dot, na, nb) = (*a, *b, *dot, *na, *nb);
                if na <= T::zero() || nb <= T::zero() {
                    return;
                }
                let d = dy[0];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let inv = T::one() / (na * nb);
                if let Some(g) = ensure(grads, nodes, a) {
                    let k = dot / (na * na);
                    for j in 0..av.len() {
                        g[j] -= d * inv * (bv[j] - k * av[j]);
                    }
                }
                if let Some(g) = ensure(grads, nodes, b) {
                    let k = dot / (nb * nb);
                    for j in 0..bv.len() {
                        g[j] -= d * inv * (av[j] - k * bv[j]);
                    }
                }
            }
        }
    }
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
