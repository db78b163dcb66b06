use super::{pool, DiffError, NumericArray, PrimitiveKind};

/// Offset added inside every `log_eps` evaluation.
pub const DEFAULT_EPS_LOG: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Parameter,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Exp(Var),
    LogEps(Var),
    RowSoftmax(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: NumericArray,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Every node's operands precede it, so a single reverse sweep over the
/// node list visits nodes in a valid order for the chain rule.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    eps_log: f64,
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool::give(node.value.into_data());
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every parameter leaf, in parameter creation order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(Var, NumericArray)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NumericArray> {
        self.entries.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &NumericArray)> {
        self.entries.iter().map(|(v, g)| (*v, g))
    }

    /// Gradients for `vars`, in that order.
    pub fn take_ordered(mut self, vars: &[Var]) -> Vec<NumericArray> {
        vars.iter()
            .map(|v| {
                let pos = self
                    .entries
                    .iter()
                    .position(|(k, _)| k == v)
                    .expect("variable is not a parameter of this tape");
                let (_, g) = self.entries.swap_remove(pos);
                g
            })
            .collect()
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b`, `c` for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::with_eps_log(DEFAULT_EPS_LOG)
    }

    pub fn with_eps_log(eps_log: f64) -> Self {
        Self {
            nodes: Vec::new(),
            eps_log,
        }
    }

    pub fn eps_log(&self) -> f64 {
        self.eps_log
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NumericArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: NumericArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&NumericArray, DiffError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(DiffError::UnknownVar(v.0))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose adjoint is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: NumericArray) -> Var {
        self.push(value, Op::Parameter, true)
    }

    pub fn constant(&mut self, value: NumericArray) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading axes of the left operand are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.rank() < 2 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: PrimitiveKind::MatMul,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
        let mut out = pool::take_zeroed(m * n);
        gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(NumericArray::from_parts(shape, out), Op::MatMul(a, b), ng))
    }

    fn broadcast_check(&self, op: PrimitiveKind, a: Var, b: Var) -> Result<(), DiffError> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if is_suffix(bv.shape(), av.shape()) {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> NumericArray {
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = pool::take_empty(av.len());
        for chunk in av.data().chunks(bv.len()) {
            data.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
        }
        NumericArray::from_parts(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may have any trailing-suffix shape of `a`
    /// (e.g. a bias row), in which case it is repeated over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.broadcast_check(PrimitiveKind::Add, a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.broadcast_check(PrimitiveKind::Sub, a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.broadcast_check(PrimitiveKind::ElementwiseMul, a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.check(a)?.map(|x| x * c);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::ScalarMul(a, c), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.check(a)?.map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::Relu(a), ng))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.check(a)?.map(f64::exp);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::Exp(a), ng))
    }

    /// `ln(x + eps_log)`; negative inputs are rejected.
    pub fn log_eps(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.check(a)?;
        if let Some((index, &value)) = av.data().iter().enumerate().find(|(_, &x)| !(x >= 0.0)) {
            return Err(DiffError::NegativeLog { index, value });
        }
        let eps = self.eps_log;
        let out = av.map(|x| (x + eps).ln());
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::LogEps(a), ng))
    }

    /// Softmax over the last axis, max-shifted for overflow safety.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.check(a)?;
        if av.rank() == 0 {
            return Err(DiffError::InvalidOperand {
                op: PrimitiveKind::RowSoftmax,
                reason: "needs at least one axis".into(),
            });
        }
        let c = av.last_dim();
        let mut data = pool::take_empty(av.len());
        data.extend_from_slice(av.data());
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let out = NumericArray::from_parts(av.shape().to_vec(), data);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::RowSoftmax(a), ng))
    }

    fn axis_check(&self, op: PrimitiveKind, a: Var, axis: usize) -> Result<&NumericArray, DiffError> {
        let av = self.check(a)?;
        if axis >= av.rank() {
            return Err(DiffError::InvalidOperand {
                op,
                reason: format!("axis {axis} out of range for shape {:?}", av.shape()),
            });
        }
        Ok(av)
    }

    fn reduce_sum(av: &NumericArray, axis: usize, scale: f64) -> NumericArray {
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = pool::take_zeroed(outer * inner);
        let d = av.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (t, s) in dst.iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        NumericArray::from_parts(shape, out)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let av = self.axis_check(PrimitiveKind::SumAxis, a, axis)?;
        let out = Self::reduce_sum(av, axis, 1.0);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let av = self.axis_check(PrimitiveKind::MeanAxis, a, axis)?;
        let out = Self::reduce_sum(av, axis, 1.0 / av.shape()[axis] as f64);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::MeanAxis(a, axis), ng))
    }

    /// Maximum over `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let av = self.axis_check(PrimitiveKind::MaxAxis, a, axis)?;
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            let mut best: Vec<f64> = d[base..base + inner].to_vec();
            let mut arg: Vec<usize> = (base..base + inner).collect();
            for j in 1..n {
                let row = base + j * inner;
                for i in 0..inner {
                    if d[row + i] > best[i] {
                        best[i] = d[row + i];
                        arg[i] = row + i;
                    }
                }
            }
            out.extend_from_slice(&best);
            argmax.extend_from_slice(&arg);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(
            NumericArray::from_parts(shape, out),
            Op::MaxAxis { input: a, argmax },
            ng,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = *inputs.first().ok_or_else(|| DiffError::InvalidOperand {
            op: PrimitiveKind::Concat,
            reason: "no operands".into(),
        })?;
        let base = self.axis_check(PrimitiveKind::Concat, first, axis)?.shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.check(v)?.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: PrimitiveKind::Concat,
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.grad_flag(inputs);
        Ok(self.push(
            NumericArray::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let av = self.axis_check(PrimitiveKind::Slice, a, axis)?;
        if len == 0 || start + len > av.shape()[axis] {
            return Err(DiffError::InvalidOperand {
                op: PrimitiveKind::Slice,
                reason: format!(
                    "range {start}..{} outside axis {axis} of {:?}",
                    start + len,
                    av.shape()
                ),
            });
        }
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let mut out = pool::take_empty(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&av.data()[from..from + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let ng = self.grad_flag(&[a]);
        Ok(self.push(
            NumericArray::from_parts(shape, out),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let av = self.check(a)?;
        let mut data = pool::take_empty(av.len());
        data.extend_from_slice(av.data());
        let out = NumericArray::from_parts(av.shape().to_vec(), data)
            .reshaped(shape)
            .map_err(|_| DiffError::ShapeMismatch {
                op: PrimitiveKind::Reshape,
                lhs: self.value(a).shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let ng = self.grad_flag(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Transpose of a 2-D array.
    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.check(a)?;
        if av.rank() != 2 {
            return Err(DiffError::InvalidOperand {
                op: PrimitiveKind::Transpose,
                reason: format!("needs a 2-D operand, got {:?}", av.shape()),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = transpose_data(av.data(), r, c);
        let ng = self.grad_flag(&[a]);
        Ok(self.push(
            NumericArray::from_parts(vec![c, r], out),
            Op::Transpose(a),
            ng,
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.check(a)?.len();
        let flat = self.reshape(a, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Every parameter leaf gets an adjoint of its own shape; leaves with
    /// no path to `root` get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rv = self.check(root)?;
        if !rv.is_scalar() {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Parameter) {
                let g = adj[idx].take().unwrap_or_else(|| pool::take_zeroed(node.value.len()));
                params.push((
                    Var(idx),
                    NumericArray::from_parts(node.value.shape().to_vec(), g),
                ));
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
            pool::give(g);
        }
        // Parameters created after the root cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if matches!(node.op, Op::Parameter) {
                params.push((Var(idx), NumericArray::zeros(node.value.shape())));
            }
        }
        params.sort_by_key(|(v, _)| *v);
        Ok(Gradients { entries: params })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| pool::take_zeroed(len)))
    }

    fn propagate(&self, op: &Op, out: &NumericArray, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Parameter | Op::Constant => {}
            Op::MatMul(a, b) => self.matmul_adjoint(a, b, g, adj),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(adj, b) {
                    let bl = db.len();
                    for chunk in g.chunks(bl) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let bl = bv.len();
                if let Some(da) = self.slot(adj, a) {
                    for (dchunk, gchunk) in da.chunks_mut(bl).zip(g.chunks(bl)) {
                        for ((d, x), y) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                            *d += x * y;
                        }
                    }
                }
                if let Some(db) = self.slot(adj, b) {
                    for (gchunk, achunk) in g.chunks(bl).zip(av.chunks(bl)) {
                        for ((d, x), y) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::ScalarMul(a, c) => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Relu(a) => {
                let av = self.value(a).data();
                if let Some(da) = self.slot(adj, a) {
                    for ((d, x), &v) in da.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.slot(adj, a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(out.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::LogEps(a) => {
                let eps = self.eps_log;
                let av = self.value(a).data();
                if let Some(da) = self.slot(adj, a) {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(av) {
                        *d += x / (v + eps);
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let c = out.last_dim();
                if let Some(da) = self.slot(adj, a) {
                    for ((drow, grow), yrow) in da
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.value(a).shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, axis);
                let scale = if matches!(op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                if let Some(da) = self.slot(adj, a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut da[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, x) in dst.iter_mut().zip(src) {
                                *d += scale * x;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { input, ref argmax } => {
                if let Some(da) = self.slot(adj, input) {
                    for (&src, x) in argmax.iter().zip(g) {
                        da[src] += x;
                    }
                }
            }
            Op::Concat { ref inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let chunk = self.value(v).shape()[axis] * inner;
                        if let Some(dv) = self.slot(adj, v) {
                            for (d, x) in dv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[offset..offset + chunk])
                            {
                                *d += x;
                            }
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(input).shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, axis);
                let len = out.shape()[axis];
                if let Some(da) = self.slot(adj, input) {
                    for o in 0..outer {
                        let from = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, x) in da[from..from + len * inner].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(adj, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Transpose(a) => {
                // out is [c, r]; the adjoint of a is g transposed back to [r, c].
                let (c, r) = (out.shape()[0], out.shape()[1]);
                if let Some(da) = self.slot(adj, a) {
                    for (i, x) in transpose_data(g, c, r).into_iter().enumerate() {
                        da[i] += x;
                    }
                }
            }
        }
    }

    /// Adjoints of `a x b`. Rows of `g` that are entirely zero (common
    /// below a max-pool) are skipped by gathering the live rows first.
    fn matmul_adjoint(&self, a: Var, b: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
        let live: Vec<usize> = (0..m)
            .filter(|&r| g[r * n..(r + 1) * n].iter().any(|&x| x != 0.0))
            .collect();
        if live.is_empty() {
            return;
        }
        let compact = live.len() * 4 < m * 3;
        let mut gathered = Vec::new();
        if compact {
            gathered = pool::take_empty(live.len() * n);
            live.iter().for_each(|&r| gathered.extend_from_slice(&g[r * n..(r + 1) * n]));
        }
        let (rows, g_rows): (usize, &[f64]) = if compact { (live.len(), &gathered) } else { (m, g) };

        if let Some(db) = self.slot(adj, b) {
            // db (k x n) += a^T (k x rows) * g (rows x n)
            if compact {
                let mut a_rows = pool::take_empty(live.len() * k);
                live.iter().for_each(|&r| a_rows.extend_from_slice(&av.data()[r * k..(r + 1) * k]));
                gemm(k, rows, n, &a_rows, (1, k as isize), g_rows, (n as isize, 1), 1.0, db);
                pool::give(a_rows);
            } else {
                gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), 1.0, db);
            }
        }
        if let Some(da) = self.slot(adj, a) {
            // da (rows x k) += g (rows x n) * b^T (n x k)
            if compact {
                let mut tmp = pool::take_zeroed(rows * k);
                gemm(rows, n, k, g_rows, (n as isize, 1), bv.data(), (1, n as isize), 0.0, &mut tmp);
                for (j, &r) in live.iter().enumerate() {
                    for (d, x) in da[r * k..(r + 1) * k].iter_mut().zip(&tmp[j * k..(j + 1) * k]) {
                        *d += x;
                    }
                }
                pool::give(tmp);
            } else {
                gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), 1.0, da);
            }
        }
        pool::give(gathered);
    }
}

fn transpose_data(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = pool::take_zeroed(r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NumericArray {
        NumericArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 4], &[0.0; 4]));
        let y = t.row_softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[3f64.ln(), 0.0]));
        let y = t.row_softmax(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.75).abs() < 1e-15);
        assert!((v[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 3], &[1000.0, 999.0, -1000.0]));
        let y = t.row_softmax(x).unwrap();
        assert!(t.value(y).all_finite());
        let s: f64 = t.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_adjoint() {
        let mut t = Tape::new();
        let x = t.parameter(NumericArray::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn disconnected_parameters_get_zero() {
        let mut t = Tape::new();
        let p = t.parameter(arr(&[2], &[1.0, 2.0]));
        let c = t.constant(NumericArray::scalar(4.0));
        let root = t.scalar_mul(c, 2.0).unwrap();
        let late = t.parameter(arr(&[3], &[1.0; 3]));
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(late).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn log_softmax_adjoints_finite() {
        let mut t = Tape::new();
        let v = t.parameter(arr(&[1, 3], &[50.0, -50.0, 0.0]));
        let s = t.row_softmax(v).unwrap();
        let l = t.log_eps(s).unwrap();
        let root = t.sum_all(l).unwrap();
        let g = t.backward(root).unwrap();
        assert!(g.get(v).unwrap().all_finite());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let v = t.parameter(arr(&[2], &[1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(NumericArray::zeros(&[2, 3]));
        let b = t.constant(NumericArray::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn log_of_negative_rejected() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2], &[0.5, -0.1]));
        assert!(matches!(t.log_eps(a), Err(DiffError::NegativeLog { index: 1, .. })));
    }

    #[test]
    fn log_eps_of_zero_is_finite() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[1], &[0.0]));
        let l = t.log_eps(a).unwrap();
        assert!((t.value(l).item() - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_axis_records_first_of_ties() {
        let mut t = Tape::new();
        let a = t.parameter(arr(&[3, 2], &[1.0, 5.0, 4.0, 5.0, 4.0, 0.0]));
        let m = t.max_axis(a, 0).unwrap();
        assert_eq!(t.value(m).data(), &[4.0, 5.0]);
        let s = t.sum_all(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(arr(&[2, 1], &[9.0, 8.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), &[9.0, 8.0]);
    }

    #[test]
    fn bias_broadcast_over_rows() {
        let mut t = Tape::new();
        let a = t.constant(NumericArray::zeros(&[2, 2, 3]));
        let b = t.parameter(arr(&[3], &[1.0, 2.0, 3.0]));
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y).row(3), &[1.0, 2.0, 3.0]);
        let s = t.sum_all(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(b).unwrap().data(), &[4.0; 3]);
        let bad = t.constant(NumericArray::zeros(&[2]));
        assert!(t.add(a, bad).is_err());
    }

    #[test]
    fn sparse_and_dense_matmul_adjoints_agree() {
        // One live row out of eight takes the compacted path.
        let a_data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let b_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut t = Tape::new();
        let a = t.parameter(arr(&[8, 3], &a_data));
        let b = t.parameter(arr(&[3, 4], &b_data));
        let y = t.matmul(a, b).unwrap();
        let row = t.slice(y, 0, 5, 1).unwrap();
        let s = t.sum_all(row).unwrap();
        let g = t.backward(s).unwrap();
        let ga = g.get(a).unwrap();
        let gb = g.get(b).unwrap();
        for r in 0..8 {
            for c in 0..3 {
                let expect = if r == 5 { (0..4).map(|j| b_data[c * 4 + j]).sum() } else { 0.0 };
                assert!((ga.at2(r, c) - expect).abs() < 1e-14);
            }
        }
        for c in 0..3 {
            for j in 0..4 {
                assert!((gb.at2(c, j) - a_data[5 * 3 + c]).abs() < 1e-14);
            }
        }
    }
}
