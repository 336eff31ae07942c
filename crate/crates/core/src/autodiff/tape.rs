use std::borrow::Cow;

use super::{AutodiffError, ParamId, Tensor};
use crate::linalg::{self, gemm};
use crate::tagger::crf;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>, Axis),
    LogSumExp(Var, Axis),
    Slice { src: Var, row0: usize, col0: usize },
    Gather { src: Var, rows: Vec<usize> },
    SelectSum { src: Var, cells: Vec<(usize, usize)> },
    Sum(Var),
    Lstm(Box<LstmCache>),
    Crf(Box<CrfCache>),
}

#[derive(Debug)]
struct CrfCache {
    emissions: Var,
    transitions: Var,
    segments: Vec<(usize, usize)>,
    alpha: Vec<f64>,
}

#[derive(Debug)]
struct LstmCache {
    input: Var,
    w_h: Var,
    plan: SegmentPlan,
    /// Activated gates `[i, f, g, o]` per row, `n x 4h`.
    gates: Vec<f64>,
    /// Cell states per row, `n x h`.
    cells: Vec<f64>,
}

/// Sequences sorted by decreasing length so the sequences still running at
/// any step form a prefix.
#[derive(Debug)]
struct SegmentPlan {
    segments: Vec<(usize, usize)>,
    reverse: bool,
    max_len: usize,
}

impl SegmentPlan {
    fn new(segments: &[(usize, usize)], reverse: bool) -> Self {
        let mut segments = segments.to_vec();
        segments.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let max_len = segments.first().map_or(0, |s| s.1);
        Self {
            segments,
            reverse,
            max_len,
        }
    }

    fn active(&self, step: usize) -> &[(usize, usize)] {
        let count = self.segments.partition_point(|s| s.1 > step);
        &self.segments[..count]
    }

    fn row(&self, (start, len): (usize, usize), step: usize) -> usize {
        if self.reverse {
            start + len - 1 - step
        } else {
            start + step
        }
    }
}

#[derive(Debug)]
struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations supporting one reverse pass.
///
/// Every node's parents precede it, so the backward pass is a single sweep
/// in reverse insertion order. Parameters are borrowed for the lifetime of the
/// tape; their gradients come back keyed by [`ParamId`] in [`Gradients`].
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    leaves: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of an owned (non-parameter) leaf created with [`Tape::leaf`].
    pub fn var(&self, var: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    /// Elementwise sum of parameter gradients. Leaf gradients are dropped.
    pub fn merge(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (i, g) in other.params.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.params[i] {
                    Some(mine) => mine.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        self.leaves.clear();
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn add_param(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        match &mut self.params[id.0] {
            Some(mine) => mine.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
            slot => *slot = Some(grad),
        }
    }
}

fn mismatch(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: vec![lhs.0, lhs.1],
        rhs: vec![rhs.0, rhs.1],
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'p, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Owned leaf; differentiable iff the tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, AutodiffError> {
        let (r, c) = tensor.matrix_dims()?;
        let rg = tensor.requires_grad();
        Ok(self.push(r, c, Cow::Owned(tensor.into_values()), Op::Leaf { param: None }, rg))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Borrowed constant matrix.
    pub fn constant_slice(&mut self, rows: usize, cols: usize, values: &'p [f64]) -> Result<Var, AutodiffError> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(AutodiffError::InvalidShape(format!(
                "constant {rows}x{cols} with {} values",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, Cow::Borrowed(values), Op::Leaf { param: None }, false))
    }

    /// Borrowed parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, tensor: &'p Tensor) -> Result<Var, AutodiffError> {
        let (r, c) = tensor.matrix_dims()?;
        Ok(self.push(
            r,
            c,
            Cow::Borrowed(tensor.values()),
            Op::Leaf { param: Some(id) },
            tensor.requires_grad(),
        ))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.to_vec()).expect("node dims are consistent")
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(mismatch(op, da, db));
        }
        Ok(da)
    }

    /// Elementwise sum. `b` may also be a `1 x cols` bias broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (da, db) = (self.dims(a), self.dims(b));
        let rg = self.rg(&[a, b]);
        if da == db {
            let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(da.0, da.1, Cow::Owned(value), Op::Add(a, b), rg));
        }
        if db.0 == 1 && db.1 == da.1 {
            let bias = self.value(b);
            let value: Vec<f64> = self
                .value(a)
                .chunks(da.1)
                .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
                .collect();
            return Ok(self.push(da.0, da.1, Cow::Owned(value), Op::AddBias(a, b), rg));
        }
        Err(mismatch("add", da, db))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.binary_same("sub", a, b)?;
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, Cow::Owned(value), Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.binary_same("mul", a, b)?;
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, Cow::Owned(value), Op::Mul(a, b), rg))
    }

    /// Elementwise product with a fixed (non-differentiable) buffer, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(mismatch("mul_const", (r, c), (1, mask.len())));
        }
        let value: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, Cow::Owned(value), Op::MulConst(a, mask), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let value: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, Cow::Owned(value), Op::Scale(a, factor), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(c, r, Cow::Owned(out), Op::Transpose(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value: Vec<f64> = self.value(a).iter().map(|&x| linalg::sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, Cow::Owned(value), Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let value: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, Cow::Owned(value), Op::Tanh(a), rg)
    }

    /// Stacks rows (`Axis::Rows`) or joins columns (`Axis::Cols`).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidShape("concat of zero tensors".into()))?;
        let (r0, c0) = self.dims(first);
        let rg = self.rg(parts);
        match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let d = self.dims(p);
                    if d.1 != c0 {
                        return Err(mismatch("concat(rows)", (r0, c0), d));
                    }
                    rows += d.0;
                }
                let mut value = Vec::with_capacity(rows * c0);
                for &p in parts {
                    value.extend_from_slice(self.value(p));
                }
                Ok(self.push(rows, c0, Cow::Owned(value), Op::Concat(parts.to_vec(), axis), rg))
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let d = self.dims(p);
                    if d.0 != r0 {
                        return Err(mismatch("concat(cols)", (r0, c0), d));
                    }
                    cols += d.1;
                }
                let mut value = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let c = self.dims(p).1;
                        value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                Ok(self.push(r0, cols, Cow::Owned(value), Op::Concat(parts.to_vec(), axis), rg))
            }
        }
    }

    /// Max-shifted log-sum-exp reducing `axis`; the reduced axis keeps size 1.
    pub fn log_sum_exp(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let (out_r, out_c, value) = match axis {
            Axis::Rows => {
                let mut col = vec![0.0; r];
                let value = (0..c)
                    .map(|j| {
                        for i in 0..r {
                            col[i] = src[i * c + j];
                        }
                        linalg::log_sum_exp(&col)
                    })
                    .collect();
                (1, c, value)
            }
            Axis::Cols => (r, 1, src.chunks(c).map(linalg::log_sum_exp).collect()),
        };
        let rg = self.rg(&[a]);
        self.push(out_r, out_c, Cow::Owned(value), Op::LogSumExp(a, axis), rg)
    }

    /// Sub-matrix `[row0, row0+rows) x [col0, col0+cols)`.
    pub fn slice(&mut self, a: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        if rows == 0 || cols == 0 || row0 + rows > r || col0 + cols > c {
            return Err(AutodiffError::InvalidShape(format!(
                "slice rows {row0}..{} cols {col0}..{} out of {r}x{c}",
                row0 + rows,
                col0 + cols
            )));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            value.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(rows, cols, Cow::Owned(value), Op::Slice { src: a, row0, col0 }, rg))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, AutodiffError> {
        let c = self.dims(a).1;
        self.slice(a, i, 1, 0, c)
    }

    /// Rows of `a` picked by index (repeats allowed), e.g. an embedding lookup.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        if rows.is_empty() {
            return Err(AutodiffError::InvalidShape("gather of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::InvalidShape(format!("gather row {bad} out of {r}x{c}")));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            value.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            rows.len(),
            c,
            Cow::Owned(value),
            Op::Gather {
                src: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar sum of the listed `(row, col)` cells.
    pub fn select_sum(&mut self, a: Var, cells: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims(a);
        if let Some(&(i, j)) = cells.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(AutodiffError::InvalidShape(format!("cell ({i},{j}) out of {r}x{c}")));
        }
        let src = self.value(a);
        let total: f64 = cells.iter().map(|&(i, j)| src[i * c + j]).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(
            1,
            1,
            Cow::Owned(vec![total]),
            Op::SelectSum {
                src: a,
                cells: cells.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, Cow::Owned(vec![total]), Op::Sum(a), rg)
    }

    /// Fused LSTM recurrence over pre-projected inputs.
    ///
    /// `input` is `n x 4h` (already `x W_x + b`, gate order `[i, f, g, o]`),
    /// `w_h` is `h x 4h`. Returns the hidden states as an `n x h` matrix indexed
    /// by row position; with `reverse` the rows are consumed last to first.
    /// Initial hidden and cell states are zero.
    pub fn lstm_recurrence(&mut self, input: Var, w_h: Var, reverse: bool) -> Result<Var, AutodiffError> {
        let n = self.dims(input).0;
        self.lstm_recurrence_segments(input, w_h, &[(0, n)], reverse)
    }

    /// [`Tape::lstm_recurrence`] over several independent sequences at once.
    ///
    /// `segments` lists `(first_row, len)` of each sequence inside `input`;
    /// segments must be disjoint and cover every row. All sequences advance in
    /// lock-step so each recurrent step is one matrix product.
    pub fn lstm_recurrence_segments(
        &mut self,
        input: Var,
        w_h: Var,
        segments: &[(usize, usize)],
        reverse: bool,
    ) -> Result<Var, AutodiffError> {
        let (n, four_h) = self.dims(input);
        let (h, wc) = self.dims(w_h);
        if four_h != 4 * h || wc != 4 * h {
            return Err(mismatch("lstm_recurrence", (n, four_h), (h, wc)));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != n || segments.iter().any(|&(a, l)| l == 0 || a + l > n) {
            return Err(AutodiffError::InvalidShape(format!(
                "lstm segments {segments:?} do not partition {n} rows"
            )));
        }
        let plan = SegmentPlan::new(segments, reverse);
        let x = self.value(input);
        let w = self.value(w_h);
        let mut gates = vec![0.0; n * 4 * h];
        let mut cells = vec![0.0; n * h];
        let mut out = vec![0.0; n * h];
        let mut h_prev = vec![0.0; plan.segments.len() * h];
        let mut z = vec![0.0; plan.segments.len() * 4 * h];
        for step in 0..plan.max_len {
            let active = plan.active(step);
            let b = active.len();
            let z = &mut z[..b * 4 * h];
            for (k, &seg) in active.iter().enumerate() {
                let t = plan.row(seg, step);
                z[k * 4 * h..(k + 1) * 4 * h].copy_from_slice(&x[t * 4 * h..(t + 1) * 4 * h]);
            }
            if step > 0 {
                for (k, &seg) in active.iter().enumerate() {
                    let p = plan.row(seg, step - 1);
                    h_prev[k * h..(k + 1) * h].copy_from_slice(&out[p * h..(p + 1) * h]);
                }
                gemm(b, h, 4 * h, 1.0, &h_prev[..b * h], false, w, false, 1.0, z);
            }
            for (k, &seg) in active.iter().enumerate() {
                let t = plan.row(seg, step);
                let p = (step > 0).then(|| plan.row(seg, step - 1));
                let zk = &z[k * 4 * h..(k + 1) * 4 * h];
                let gt = &mut gates[t * 4 * h..(t + 1) * 4 * h];
                for u in 0..h {
                    let i = linalg::sigmoid(zk[u]);
                    let f = linalg::sigmoid(zk[h + u]);
                    let g = zk[2 * h + u].tanh();
                    let o = linalg::sigmoid(zk[3 * h + u]);
                    gt[u] = i;
                    gt[h + u] = f;
                    gt[2 * h + u] = g;
                    gt[3 * h + u] = o;
                    let c_prev = p.map_or(0.0, |p| cells[p * h + u]);
                    let c = f * c_prev + i * g;
                    cells[t * h + u] = c;
                    out[t * h + u] = o * c.tanh();
                }
            }
        }
        let rg = self.rg(&[input, w_h]);
        let cache = LstmCache {
            input,
            w_h,
            plan,
            gates,
            cells,
        };
        Ok(self.push(n, h, Cow::Owned(out), Op::Lstm(Box::new(cache)), rg))
    }

    /// Linear-chain CRF log partition for each `(first_row, len)` segment of
    /// `emissions` (`n x L`), with `transitions` of shape `(L+2) x (L+2)`
    /// laid out as in [`crate::tagger::crf`]. Returns an `S x 1` column.
    pub fn crf_log_partition(
        &mut self,
        emissions: Var,
        transitions: Var,
        segments: &[(usize, usize)],
    ) -> Result<Var, AutodiffError> {
        let (n, l) = self.dims(emissions);
        let dt = self.dims(transitions);
        if dt != (l + 2, l + 2) {
            return Err(mismatch("crf_log_partition", (n, l), dt));
        }
        if segments.is_empty() || segments.iter().any(|&(a, len)| a + len > n) {
            return Err(AutodiffError::InvalidShape(format!(
                "crf segments {segments:?} outside {n} rows"
            )));
        }
        let e = self.value(emissions);
        let t = self.value(transitions);
        let mut alpha = vec![0.0; n * l];
        let log_z: Vec<f64> = segments
            .iter()
            .map(|&(a, len)| crf::forward(&e[a * l..(a + len) * l], t, l, &mut alpha[a * l..(a + len) * l]))
            .collect();
        let rg = self.rg(&[emissions, transitions]);
        let cache = CrfCache {
            emissions,
            transitions,
            segments: segments.to_vec(),
            alpha,
        };
        Ok(self.push(segments.len(), 1, Cow::Owned(log_z), Op::Crf(Box::new(cache)), rg))
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one backward
    /// pass; a second call is rejected with [`AutodiffError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(AutodiffError::EmptyTape);
        }
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(AutodiffError::NonScalarLoss(vec![r, c]));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf { param: Some(id) } => out.add_param(*id, g),
                Op::Leaf { param: None } => out.leaves.push((Var(idx), g)),
                op => self.propagate(op, node, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn lstm_backward(&self, cache: &LstmCache, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, h) = (node.rows, node.cols);
        let hs = &node.value;
        let w = &self.nodes[cache.w_h.0].value;
        let (gates, cells, plan) = (&cache.gates, &cache.cells, &cache.plan);
        let segs = plan.segments.len();
        // dz per row, and the hidden state that fed each row (zero for first steps)
        let mut dz = vec![0.0; n * 4 * h];
        let mut h_prev = vec![0.0; n * h];
        let mut dh_next = vec![0.0; segs * h];
        let mut dc_next = vec![0.0; segs * h];
        let mut dz_step = vec![0.0; segs * 4 * h];
        let mut dh_step = vec![0.0; segs * h];
        for step in (0..plan.max_len).rev() {
            let active = plan.active(step);
            let b = active.len();
            for (k, &seg) in active.iter().enumerate() {
                let t = plan.row(seg, step);
                let p = (step > 0).then(|| plan.row(seg, step - 1));
                let gt = &gates[t * 4 * h..(t + 1) * 4 * h];
                let dzt = &mut dz[t * 4 * h..(t + 1) * 4 * h];
                for u in 0..h {
                    let (i, f, gg, o) = (gt[u], gt[h + u], gt[2 * h + u], gt[3 * h + u]);
                    let c = cells[t * h + u];
                    let c_prev = p.map_or(0.0, |p| cells[p * h + u]);
                    let tc = c.tanh();
                    let dh = g[t * h + u] + dh_next[k * h + u];
                    let dc = dc_next[k * h + u] + dh * o * (1.0 - tc * tc);
                    dzt[u] = dc * gg * i * (1.0 - i);
                    dzt[h + u] = dc * c_prev * f * (1.0 - f);
                    dzt[2 * h + u] = dc * i * (1.0 - gg * gg);
                    dzt[3 * h + u] = dh * tc * o * (1.0 - o);
                    dc_next[k * h + u] = dc * f;
                }
                dz_step[k * 4 * h..(k + 1) * 4 * h].copy_from_slice(dzt);
                if let Some(p) = p {
                    h_prev[t * h..(t + 1) * h].copy_from_slice(&hs[p * h..(p + 1) * h]);
                }
            }
            if step > 0 {
                let dh_step = &mut dh_step[..b * h];
                gemm(b, 4 * h, h, 1.0, &dz_step[..b * 4 * h], false, w, true, 0.0, dh_step);
                dh_next[..b * h].copy_from_slice(dh_step);
            }
        }
        if self.nodes[cache.input.0].requires_grad {
            axpy(grad_slot(grads, cache.input.0, n * 4 * h), &dz);
        }
        if self.nodes[cache.w_h.0].requires_grad {
            let gw = grad_slot(grads, cache.w_h.0, h * 4 * h);
            gemm(h, n, 4 * h, 1.0, &h_prev, true, &dz, false, 1.0, gw);
        }
    }

    fn crf_backward(&self, cache: &CrfCache, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, l) = self.dims(cache.emissions);
        let e = &self.nodes[cache.emissions.0].value;
        let t = &self.nodes[cache.transitions.0].value;
        let want_e = self.nodes[cache.emissions.0].requires_grad;
        let want_t = self.nodes[cache.transitions.0].requires_grad;
        if want_e {
            grad_slot(grads, cache.emissions.0, n * l);
        }
        if want_t {
            grad_slot(grads, cache.transitions.0, (l + 2) * (l + 2));
        }
        for (k, &(a, len)) in cache.segments.iter().enumerate() {
            let rows = a * l..(a + len) * l;
            // Distinct nodes; moved out so both can be borrowed mutably.
            let mut de = want_e.then(|| grads[cache.emissions.0].take().expect("allocated"));
            let mut dt = want_t.then(|| grads[cache.transitions.0].take().expect("allocated"));
            crf::accumulate_partition_grad(
                &e[rows.clone()],
                t,
                l,
                &cache.alpha[rows.clone()],
                node.value[k],
                g[k],
                de.as_mut().map(|d| &mut d[rows.clone()]),
                dt.as_deref_mut(),
            );
            if let Some(de) = de {
                grads[cache.emissions.0] = Some(de);
            }
            if let Some(dt) = dt {
                grads[cache.transitions.0] = Some(dt);
            }
        }
    }

    fn propagate(&self, op: &Op, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf { .. } => unreachable!("leaves handled by caller"),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(grad_slot(grads, v.0, len(v)), g);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    axpy(grad_slot(grads, a.0, len(*a)), g);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, b.0, node.cols);
                    for row in g.chunks(node.cols) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(grad_slot(grads, a.0, len(*a)), g);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, b.0, len(*b));
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, va.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(vb.iter()) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let gb = grad_slot(grads, b.0, vb.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(va.iter()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, mask.len());
                    for ((d, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * f);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if wants(*a) {
                    let vb = &self.nodes[b.0].value;
                    let ga = grad_slot(grads, a.0, m * k);
                    gemm(m, n, k, 1.0, g, false, vb, true, 1.0, ga);
                }
                if wants(*b) {
                    let va = &self.nodes[a.0].value;
                    let gb = grad_slot(grads, b.0, k * n);
                    gemm(k, m, n, 1.0, va, true, g, false, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = self.dims(*a);
                    let ga = grad_slot(grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, g.len());
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, g.len());
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(node.value.iter()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = len(p);
                        if wants(p) {
                            axpy(grad_slot(grads, p.0, n), &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Axis::Cols => {
                    let mut col0 = 0;
                    for &p in parts {
                        let (pr, pc) = self.dims(p);
                        if wants(p) {
                            let gp = grad_slot(grads, p.0, pr * pc);
                            for i in 0..pr {
                                let src = &g[i * node.cols + col0..i * node.cols + col0 + pc];
                                axpy(&mut gp[i * pc..(i + 1) * pc], src);
                            }
                        }
                        col0 += pc;
                    }
                }
            },
            Op::LogSumExp(a, axis) => {
                if wants(*a) {
                    let (r, c) = self.dims(*a);
                    let va = &self.nodes[a.0].value;
                    let ga = grad_slot(grads, a.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = match axis {
                                Axis::Rows => j,
                                Axis::Cols => i,
                            };
                            ga[i * c + j] += g[k] * (va[i * c + j] - node.value[k]).exp();
                        }
                    }
                }
            }
            Op::Slice { src, row0, col0 } => {
                if wants(*src) {
                    let (r, c) = self.dims(*src);
                    let gs = grad_slot(grads, src.0, r * c);
                    for i in 0..node.rows {
                        let dst = (row0 + i) * c + col0;
                        axpy(&mut gs[dst..dst + node.cols], &g[i * node.cols..(i + 1) * node.cols]);
                    }
                }
            }
            Op::Gather { src, rows } => {
                if wants(*src) {
                    let (r, c) = self.dims(*src);
                    let gs = grad_slot(grads, src.0, r * c);
                    for (k, &i) in rows.iter().enumerate() {
                        axpy(&mut gs[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::SelectSum { src, cells } => {
                if wants(*src) {
                    let (r, c) = self.dims(*src);
                    let gs = grad_slot(grads, src.0, r * c);
                    for &(i, j) in cells {
                        gs[i * c + j] += g[0];
                    }
                }
            }
            Op::Lstm(cache) => self.lstm_backward(cache, node, g, grads),
            Op::Crf(cache) => self.crf_backward(cache, node, g, grads),
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = grad_slot(grads, a.0, len(*a));
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
