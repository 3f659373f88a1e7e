//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass
//! (define-by-run; a fresh tape per pass) and replays them in reverse to
//! accumulate gradients. Nodes are stored in an arena, so recording order is
//! already a topological order and backward visits each node exactly once.
//!
//! The op set is deliberately small: exactly what energies, losses and
//! sampler drifts downstream need. `logsumexp` uses max-subtraction and
//! `softmax`/`log_softmax` are derived from it rather than naive exp/sum.
//!
//! Gradients accumulate (`+=`) across repeated `backward` calls until
//! [`Tape::zero_grads`] is called.

pub mod gradcheck;

use crate::error::{CemError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Dense row-major tensor with an optional gradient buffer.
///
/// Shape `[]` denotes a scalar (one element); `[k]` a vector; `[n, m]` a
/// matrix. Also used off-tape as a plain data carrier (datasets, chain
/// states), in which case `op` is `Leaf` and `grad` stays `None`.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
    op: Op<F>,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, F),
    Mul(usize, usize),
    MatMul(usize, usize),
    Dot(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SqNorm(usize),
    Transpose(usize),
    Reshape(usize),
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(CemError::contract(format!(
                "tensor: {} values for shape {:?} (expected {})",
                values.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        })
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            values: vec![value],
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        }
    }

    pub fn vector(values: Vec<F>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
            op: Op::Leaf,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1
    }

    /// Scalar payload; panics if the tensor has more than one element.
    pub fn item(&self) -> F {
        assert!(self.numel() == 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    /// Row `i` of a matrix (or the whole buffer of a vector).
    pub fn row(&self, i: usize) -> &[F] {
        match self.shape.len() {
            2 => {
                let m = self.shape[1];
                &self.values[i * m..(i + 1) * m]
            }
            _ => &self.values,
        }
    }

    pub fn n_rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }
}

/// (outer, inner) split for last-axis reductions.
fn axis_split(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> CemError {
    CemError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Wengert tape: arena of [`Tensor`] nodes in recording order.
pub struct Tape<F> {
    nodes: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input node. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<F>, requires_grad: bool) -> Var {
        tensor.requires_grad = requires_grad;
        tensor.op = Op::Leaf;
        self.push(tensor)
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn scalar_const(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0]
    }

    pub fn values(&self, v: Var) -> &[F] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].item()
    }

    /// Accumulated gradient of `v`, if a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor<F>) -> Var {
        self.nodes.push(tensor);
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        })
    }

    // ── Elementwise and shape ops ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub("add", a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_sub("sub", a, b, true)
    }

    fn add_sub(&mut self, name: &'static str, a: Var, b: Var, negate: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if negate { Op::Sub(a.0, b.0) } else { Op::Add(a.0, b.0) };
        let values = if sa == sb {
            self.values(a)
                .iter()
                .zip(self.values(b))
                .map(|(&x, &y)| if negate { x - y } else { x + y })
                .collect()
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            // Row broadcast: [n, m] (+|-) [m], the bias pattern.
            let m = sb[0];
            let bv = self.values(b);
            self.values(a)
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bv[i % m];
                    if negate {
                        x - y
                    } else {
                        x + y
                    }
                })
                .collect()
        } else {
            return Err(mismatch(name, &sa, &sb));
        };
        Ok(self.emit(sa, values, op, &[a.0, b.0]))
    }

    /// Multiply every element by the compile-time constant `c`.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, values, Op::Scale(a.0, c), &[a.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("mul", &sa, &sb));
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.emit(sa, values, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.values(a), self.values(b));
        let (shape, values) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                (vec![m, n], mat_mat(va, vb, m, k, n))
            }
            (1, 2) if sa[0] == sb[0] => {
                let (k, n) = (sa[0], sb[1]);
                (vec![n], mat_mat(va, vb, 1, k, n))
            }
            (2, 1) if sa[1] == sb[0] => {
                let (m, k) = (sa[0], sa[1]);
                (vec![m], mat_vec(va, vb, m, k))
            }
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        Ok(self.emit(shape, values, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(mismatch("dot", &sa, &sb));
        }
        let value = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.emit(vec![], vec![value], Op::Dot(a.0, b.0), &[a.0, b.0]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let values = self.values(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, values, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        for (i, &x) in self.values(a).iter().enumerate() {
            if x <= F::zero() {
                return Err(CemError::LogDomain {
                    op: "log",
                    value: x.as_f64(),
                    index: i,
                });
            }
        }
        let values = self.values(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.emit(shape, values, Op::Log(a.0), &[a.0]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let values = self.values(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, values, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, values, Op::Relu(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let values = self.values(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, values, Op::Square(a.0), &[a.0])
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.values(a).iter().copied().sum();
        self.emit(vec![], vec![value], Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.values(a).len()).unwrap();
        let value: F = self.values(a).iter().copied().sum();
        self.emit(vec![], vec![value / n], Op::Mean(a.0), &[a.0])
    }

    /// Squared Euclidean norm of all elements.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let value = self.values(a).iter().map(|&x| x * x).sum();
        self.emit(vec![], vec![value], Op::SqNorm(a.0), &[a.0])
    }

    /// Log-sum-exp over the last axis (max-subtracted): `[k] -> scalar`,
    /// `[n, k] -> [n]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(mismatch("logsumexp", &shape, &[]));
        }
        let (outer, inner) = axis_split(&shape);
        if inner == 0 {
            return Err(mismatch("logsumexp", &shape, &[]));
        }
        let va = self.values(a);
        let mut values = Vec::with_capacity(outer);
        for r in 0..outer {
            values.push(logsumexp_slice(&va[r * inner..(r + 1) * inner]));
        }
        let out_shape = if shape.len() == 1 { vec![] } else { vec![outer] };
        Ok(self.emit(out_shape, values, Op::LogSumExp(a.0), &[a.0]))
    }

    /// Softmax over the last axis, derived from `logsumexp`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(mismatch("softmax", &shape, &[]));
        }
        let (outer, inner) = axis_split(&shape);
        let va = self.values(a);
        let mut values = Vec::with_capacity(outer * inner);
        for r in 0..outer {
            let row = &va[r * inner..(r + 1) * inner];
            let lse = logsumexp_slice(row);
            values.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        Ok(self.emit(shape, values, Op::Softmax(a.0), &[a.0]))
    }

    /// `a - logsumexp(a)` over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(mismatch("log_softmax", &shape, &[]));
        }
        let (outer, inner) = axis_split(&shape);
        let va = self.values(a);
        let mut values = Vec::with_capacity(outer * inner);
        for r in 0..outer {
            let row = &va[r * inner..(r + 1) * inner];
            let lse = logsumexp_slice(row);
            values.extend(row.iter().map(|&x| x - lse));
        }
        Ok(self.emit(shape, values, Op::LogSoftmax(a.0), &[a.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("transpose", &shape, &[]));
        }
        let (m, n) = (shape[0], shape[1]);
        let va = self.values(a);
        let mut values = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = va[i * n + j];
            }
        }
        Ok(self.emit(vec![n, m], values, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.values(a).len() {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let values = self.values(a).to_vec();
        Ok(self.emit(shape, values, Op::Reshape(a.0), &[a.0]))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `root`. Accumulates `d(root)/d(node)` into
    /// each reachable node with `requires_grad`; repeated calls add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CemError::EmptyTape);
        }
        if self.nodes[root.0].numel() != 1 || self.nodes[root.0].shape.len() > 1 {
            return Err(CemError::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        // Fresh adjoints per call so repeated backwards accumulate cleanly
        // into `grad` without double-counting earlier passes.
        let mut adjoint: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adjoint[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adjoint);
            let node = &mut self.nodes[i];
            let grad = node
                .grad
                .get_or_insert_with(|| vec![F::zero(); node.values.len()]);
            for (dst, src) in grad.iter_mut().zip(&g) {
                *dst += *src;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], adjoint: &mut [Option<Vec<F>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(a, g, adjoint, false);
                self.accumulate_broadcast(b, g, adjoint, false);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, g, adjoint, false);
                self.accumulate_broadcast(b, g, adjoint, true);
            }
            Op::Scale(a, c) => {
                self.push_adjoint(a, adjoint, |buf| {
                    for (dst, &gi) in buf.iter_mut().zip(g) {
                        *dst += gi * c;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].values, &self.nodes[b].values);
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *dst += gi * y;
                    }
                });
                self.push_adjoint(b, adjoint, |buf| {
                    for ((dst, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *dst += gi * x;
                    }
                });
            }
            Op::MatMul(a, b) => self.backward_matmul(a, b, g, adjoint),
            Op::Dot(a, b) => {
                let (va, vb) = (&self.nodes[a].values, &self.nodes[b].values);
                let gs = g[0];
                self.push_adjoint(a, adjoint, |buf| {
                    for (dst, &y) in buf.iter_mut().zip(vb) {
                        *dst += gs * y;
                    }
                });
                self.push_adjoint(b, adjoint, |buf| {
                    for (dst, &x) in buf.iter_mut().zip(va) {
                        *dst += gs * x;
                    }
                });
            }
            Op::Exp(a) => {
                let out = &self.nodes[i].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &e) in buf.iter_mut().zip(g).zip(out) {
                        *dst += gi * e;
                    }
                });
            }
            Op::Log(a) => {
                let va = &self.nodes[a].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *dst += gi / x;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &self.nodes[i].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &t) in buf.iter_mut().zip(g).zip(out) {
                        *dst += gi * (F::one() - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                let va = &self.nodes[a].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        if x > F::zero() {
                            *dst += gi;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let va = &self.nodes[a].values;
                let two = F::from_f64(2.0).unwrap();
                self.push_adjoint(a, adjoint, |buf| {
                    for ((dst, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *dst += gi * two * x;
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g[0];
                self.push_adjoint(a, adjoint, |buf| {
                    for dst in buf.iter_mut() {
                        *dst += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let n = F::from_usize(self.nodes[a].values.len()).unwrap();
                let gs = g[0] / n;
                self.push_adjoint(a, adjoint, |buf| {
                    for dst in buf.iter_mut() {
                        *dst += gs;
                    }
                });
            }
            Op::SqNorm(a) => {
                let va = &self.nodes[a].values;
                let two = F::from_f64(2.0).unwrap();
                let gs = g[0];
                self.push_adjoint(a, adjoint, |buf| {
                    for (dst, &x) in buf.iter_mut().zip(va) {
                        *dst += gs * two * x;
                    }
                });
            }
            Op::LogSumExp(a) => {
                let (outer, inner) = axis_split(&self.nodes[a].shape);
                let va = &self.nodes[a].values;
                let out = &self.nodes[i].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for r in 0..outer {
                        let lse = out[r];
                        let gr = g[r];
                        for c in 0..inner {
                            buf[r * inner + c] += gr * (va[r * inner + c] - lse).exp();
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (outer, inner) = axis_split(&self.nodes[a].shape);
                let s = &self.nodes[i].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for r in 0..outer {
                        let row = r * inner;
                        let mut inner_dot = F::zero();
                        for c in 0..inner {
                            inner_dot += g[row + c] * s[row + c];
                        }
                        for c in 0..inner {
                            buf[row + c] += s[row + c] * (g[row + c] - inner_dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (outer, inner) = axis_split(&self.nodes[a].shape);
                let out = &self.nodes[i].values;
                self.push_adjoint(a, adjoint, |buf| {
                    for r in 0..outer {
                        let row = r * inner;
                        let mut gsum = F::zero();
                        for c in 0..inner {
                            gsum += g[row + c];
                        }
                        for c in 0..inner {
                            buf[row + c] += g[row + c] - out[row + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = &self.nodes[a].shape;
                let (m, n) = (shape[0], shape[1]);
                self.push_adjoint(a, adjoint, |buf| {
                    for i2 in 0..m {
                        for j in 0..n {
                            buf[i2 * n + j] += g[j * m + i2];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.push_adjoint(a, adjoint, |buf| {
                    for (dst, &gi) in buf.iter_mut().zip(g) {
                        *dst += gi;
                    }
                });
            }
        }
    }

    /// Add into parent `p`'s adjoint buffer (allocated lazily) unless the
    /// parent's subtree carries no differentiable leaves.
    fn push_adjoint<G: FnOnce(&mut [F])>(&self, p: usize, adjoint: &mut [Option<Vec<F>>], f: G) {
        if !self.nodes[p].requires_grad {
            return;
        }
        let buf = adjoint[p].get_or_insert_with(|| vec![F::zero(); self.nodes[p].values.len()]);
        f(buf);
    }

    /// Adjoint for add/sub operands, collapsing the row broadcast if needed.
    fn accumulate_broadcast(&self, p: usize, g: &[F], adjoint: &mut [Option<Vec<F>>], negate: bool) {
        let pn = self.nodes[p].values.len();
        self.push_adjoint(p, adjoint, |buf| {
            if pn == g.len() {
                for (dst, &gi) in buf.iter_mut().zip(g) {
                    *dst += if negate { -gi } else { gi };
                }
            } else {
                // Parent is the broadcast [m] side: column-sum the adjoint.
                for (idx, &gi) in g.iter().enumerate() {
                    let j = idx % pn;
                    buf[j] += if negate { -gi } else { gi };
                }
            }
        });
    }

    fn backward_matmul(&self, a: usize, b: usize, g: &[F], adjoint: &mut [Option<Vec<F>>]) {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let (va, vb) = (&self.nodes[a].values, &self.nodes[b].values);
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G · Bᵀ
                self.push_adjoint(a, adjoint, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                self.push_adjoint(b, adjoint, |buf| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = F::zero();
                            for i in 0..m {
                                s += va[i * k + p] * g[i * n + j];
                            }
                            buf[p * n + j] += s;
                        }
                    }
                });
            }
            (1, 2) => {
                let (k, n) = (sa[0], sb[1]);
                self.push_adjoint(a, adjoint, |buf| {
                    for p in 0..k {
                        let mut s = F::zero();
                        for j in 0..n {
                            s += vb[p * n + j] * g[j];
                        }
                        buf[p] += s;
                    }
                });
                self.push_adjoint(b, adjoint, |buf| {
                    for p in 0..k {
                        for j in 0..n {
                            buf[p * n + j] += va[p] * g[j];
                        }
                    }
                });
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                self.push_adjoint(a, adjoint, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            buf[i * k + p] += g[i] * vb[p];
                        }
                    }
                });
                self.push_adjoint(b, adjoint, |buf| {
                    for p in 0..k {
                        let mut s = F::zero();
                        for i in 0..m {
                            s += va[i * k + p] * g[i];
                        }
                        buf[p] += s;
                    }
                });
            }
            _ => unreachable!("matmul shapes validated at forward time"),
        }
    }
}

/// Max-subtracted log-sum-exp of a non-empty slice.
pub fn logsumexp_slice<F: Scalar>(row: &[F]) -> F {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    let mut acc = F::zero();
    for &x in row {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

fn mat_mat<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn mat_vec<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m];
    for i in 0..m {
        let mut s = F::zero();
        let arow = &a[i * k..(i + 1) * k];
        for p in 0..k {
            s += arow[p] * b[p];
        }
        out[i] = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{finite_diff_grad, max_rel_err};
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn dot_orthogonal_is_zero() {
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![1.0, 0.0]), false);
        let b = t.leaf(Tensor::vector(vec![0.0, 1.0]), false);
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.item(d), 0.0);
    }

    #[test]
    fn logsumexp_singleton_is_identity() {
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![3.0]), false);
        let l = t.logsumexp(a).unwrap();
        assert_eq!(t.item(l), 3.0);
    }

    #[test]
    fn logsumexp_two_elements_matches_direct_sum() {
        // Direct-summation oracle: ln(e^1 + e^0).
        let oracle = (1f64.exp() + 0f64.exp()).ln();
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![1.0, 0.0]), false);
        let l = t.logsumexp(a).unwrap();
        assert_relative_eq!(t.item(l), oracle, max_relative = 1e-15);
        assert_relative_eq!(t.item(l), 1.31326, epsilon = 1e-5);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = tape();
        let x = t.leaf(Tensor::vector(vec![3.0]), true);
        let sq = t.square(x);
        let root = t.sum(sq);
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_logsumexp_is_softmax() {
        let mut t = tape();
        let x = t.leaf(Tensor::vector(vec![1.0, 0.0]), true);
        let l = t.logsumexp(x).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        assert_relative_eq!(g[0], 0.7310585786300049, epsilon = 1e-12);
        assert_relative_eq!(g[1], 0.2689414213699951, epsilon = 1e-12);
    }

    #[test]
    fn backward_dot_is_linear_map() {
        let mut t = tape();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let w = t.leaf(Tensor::vector(vec![3.0, 4.0]), false);
        let d = t.dot(x, w).unwrap();
        t.backward(d).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn finite_diff_quadratic() {
        let f = |x: &Tensor<f64>| Ok(x.values[0] * x.values[0]);
        let g = finite_diff_grad(f, &Tensor::vector(vec![3.0]), 1e-3).unwrap();
        assert_relative_eq!(g.values[0], 6.0, epsilon = 1e-6);
    }

    #[test]
    fn finite_diff_matches_logsumexp_backward() {
        let f = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), false);
            let l = t.logsumexp(v)?;
            Ok(t.item(l))
        };
        let g = finite_diff_grad(f, &Tensor::vector(vec![1.0, 0.0]), 1e-5).unwrap();
        assert_relative_eq!(g.values[0], 0.7310585786300049, epsilon = 1e-6);
        assert_relative_eq!(g.values[1], 0.2689414213699951, epsilon = 1e-6);
        assert_relative_eq!(g.values[0], 0.73106, epsilon = 1e-5);
        assert_relative_eq!(g.values[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn finite_diff_constant_function_is_zero() {
        let f = |_x: &Tensor<f64>| Ok(42.0);
        let g = finite_diff_grad(f, &Tensor::vector(vec![0.3, -1.2, 2.0]), 1e-5).unwrap();
        assert_eq!(g.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]), false);
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![1.0, 0.0]), false);
        let err = t.log(a).unwrap_err();
        assert!(matches!(err, CemError::LogDomain { index: 1, .. }));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = tape();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let b = t.square(a);
        let err = t.backward(b).unwrap_err();
        assert!(matches!(err, CemError::NonScalarRoot { .. }));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut t = tape();
        let x = t.leaf(Tensor::vector(vec![2.0]), true);
        let sq = t.square(x);
        let root = t.sum(sq);
        t.backward(root).unwrap();
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        t.zero_grads();
        t.backward(root).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_of_sum_root_equals_sum_of_backwards() {
        let build = |t: &mut Tape<f64>| {
            let x = t.leaf(Tensor::vector(vec![0.4, -1.1, 2.2]), true);
            let e = t.exp(x);
            let r1 = t.sum(e);
            let sq = t.square(x);
            let r2 = t.mean(sq);
            (x, r1, r2)
        };
        let mut t1 = tape();
        let (x1, a, b) = build(&mut t1);
        let s = t1.add(a, b).unwrap();
        t1.backward(s).unwrap();

        let mut t2 = tape();
        let (x2, a2, b2) = build(&mut t2);
        t2.backward(a2).unwrap();
        t2.backward(b2).unwrap();

        let (g1, g2) = (t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
        assert!(max_rel_err(g1, g2) < 1e-15, "{g1:?} vs {g2:?}");
    }

    #[test]
    fn row_broadcast_add_reduces_bias_grad() {
        let mut t = tape();
        let a = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let b = t.leaf(Tensor::vector(vec![10., 20., 30.]), true);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.values(s), &[11., 22., 33., 14., 25., 36.]);
        let total = t.sum(s);
        t.backward(total).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(t.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn works_in_f32_too() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0f32, 0.0]), true);
        let l = t.logsumexp(x).unwrap();
        t.backward(l).unwrap();
        assert_relative_eq!(t.item(l), 1.313_261_7_f32, epsilon = 1e-6);
        let g = t.grad(x).unwrap();
        assert_relative_eq!(g[0], 0.731_058_6_f32, epsilon = 1e-6);
    }

    #[test]
    fn no_nan_after_random_passes() {
        use rand::Rng;
        let mut rng = crate::rng::stream(77, 0);
        for _ in 0..50 {
            let mut t = tape();
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = t.leaf(Tensor::matrix(2, 3, vals).unwrap(), true);
            let th = t.tanh(x);
            let sm = t.softmax(th).unwrap();
            let lse = t.logsumexp(sm).unwrap();
            let root = t.mean(lse);
            t.backward(root).unwrap();
            for node in &t.nodes {
                assert!(node.values.iter().all(|v| v.is_finite()));
                if let Some(g) = &node.grad {
                    assert!(g.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn lse_shift_invariance(v in proptest::collection::vec(-50.0..50.0f64, 1..8)) {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut t = tape();
            let a = t.leaf(Tensor::vector(v.clone()), false);
            let lse = t.logsumexp(a).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x - max).collect();
            let b = t.leaf(Tensor::vector(shifted), false);
            let lse_b = t.logsumexp(b).unwrap();
            let recon = t.item(lse_b) + max;
            prop_assert!((t.item(lse) - recon).abs() <= 1e-12);
        }

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0..30.0f64, 6)) {
            let mut t = tape();
            let a = t.leaf(Tensor::matrix(2, 3, v).unwrap(), false);
            let s = t.softmax(a).unwrap();
            let vals = t.values(s);
            for r in 0..2 {
                let sum: f64 = vals[r * 3..(r + 1) * 3].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
