use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    RowDot(usize, usize),
    /// (column vector, matrix): every row of the matrix scaled by the column entry.
    MulCol(usize, usize),
    ConcatCols(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SliceCols(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Gather(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    /// `None` for parameter leaves, whose values live in the store.
    value: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Define-by-run tape over a borrowed parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (i, g)))
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    // a is (m×k) when !a_t, else stored as (k×m); likewise b.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths match the (m, k, n) extents and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Some(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(id)) => self.store.param(*id).value().data(),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "input",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let (rows, cols) = self.store.param(id).value().dims2();
        self.nodes.push(Node {
            rows,
            cols,
            value: None,
            op: Op::Param(id),
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        Error::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), t))
    }

    /// Row-broadcast bias add: x (m×n) + b (1×n).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(b) != (1, n) {
            return Err(self.shape_err("add_bias", x, b));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let t = self.tracked(x) || self.tracked(b);
        Ok(self.push(m, n, out, Op::AddBias(x.0, b.0), t))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(name, a, b));
        }
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, n, out, op, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("minimum", a, b, f64::min, Op::Minimum(a.0, b.0))
    }

    /// Per-row dot product of two (m×n) operands, giving (m×1).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("row_dot", a, b));
        }
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .chunks(n.max(1))
            .zip(self.value(b).chunks(n.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .take(m)
            .collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, 1, out, Op::RowDot(a.0, b.0), t))
    }

    /// Scales row i of `x` (m×n) by `col[i]` where `col` is (m×1).
    pub fn mul_col(&mut self, col: Var, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(col) != (m, 1) {
            return Err(self.shape_err("mul_col", col, x));
        }
        let c = self.value(col);
        let mut out = self.value(x).to_vec();
        for (row, s) in out.chunks_mut(n.max(1)).zip(c) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let t = self.tracked(col) || self.tracked(x);
        Ok(self.push(m, n, out, Op::MulCol(col.0, x.0), t))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if m != mb {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            out.extend_from_slice(&av[i * na..(i + 1) * na]);
            out.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(m, na + nb, out, Op::ConcatCols(a.0, b.0), t))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x);
        let out = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let t = self.tracked(x);
        Ok(self.push(m, len, out, Op::SliceCols(x.0, start), t))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let t = self.tracked(x);
        self.push(m, n, out, op, t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x.0))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let t = self.tracked(x);
        self.push(m, n, out, Op::Softmax(x.0), t)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = self.tracked(x);
        self.push(m, n, out, Op::LogSoftmax(x.0), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let t = self.tracked(x);
        self.push(1, 1, vec![s], Op::SumAll(x.0), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        let t = self.tracked(x);
        self.push(1, 1, vec![s], Op::MeanAll(x.0), t)
    }

    /// Sum across columns: (m×n) → (m×1).
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .take(m)
            .map(|r| r.iter().sum())
            .collect();
        let t = self.tracked(x);
        self.push(m, 1, out, Op::SumRows(x.0), t)
    }

    /// Picks column `idx[i]` from row i: (m×n) → (m×1).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::Shape {
                op: "gather",
                lhs: vec![m, n],
                rhs: vec![idx.len()],
            });
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| xv[i * n + j]).collect();
        let t = self.tracked(x);
        Ok(self.push(m, 1, out, Op::Gather(x.0, idx.to_vec()), t))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if rows.iter().any(|&r| r >= m) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: vec![m, n],
                rhs: rows.to_vec(),
            });
        }
        let xv = self.value(x);
        let out = rows
            .iter()
            .flat_map(|&r| xv[r * n..(r + 1) * n].iter().copied())
            .collect();
        let t = self.tracked(x);
        Ok(self.push(rows.len(), n, out, Op::SelectRows(x.0, rows.to_vec()), t))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter reached; apply them with [`ParamStore::accumulate`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape [{r}, {c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let (m, n) = (node.rows, node.cols);
            let y = self.value(Var(i));
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let len = g.len();
                    accumulate(&mut out.grads[id.index()], len, |acc| {
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                    });
                }
                &Op::MatMul(a, b) => {
                    let (_, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    if self.nodes[a].tracked {
                        let bv = self.value(Var(b));
                        accumulate(&mut grads[a], m * k, |ga| {
                            gemm(m, n, k, &g, false, bv, true, ga, 1.0)
                        });
                    }
                    if self.nodes[b].tracked {
                        let av = self.value(Var(a));
                        accumulate(&mut grads[b], k * n, |gb| {
                            gemm(k, m, n, av, true, &g, false, gb, 1.0)
                        });
                    }
                }
                &Op::AddBias(x, b) => {
                    if self.nodes[x].tracked {
                        accumulate(&mut grads[x], m * n, |gx| add_into(gx, &g));
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], n, |gb| {
                            for row in g.chunks(n.max(1)) {
                                add_into(gb, row);
                            }
                        });
                    }
                }
                &Op::Add(a, b) => {
                    for x in [a, b] {
                        if self.nodes[x].tracked {
                            accumulate(&mut grads[x], m * n, |gx| add_into(gx, &g));
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], m * n, |gx| add_into(gx, &g));
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], m * n, |gx| {
                            gx.iter_mut().zip(&g).for_each(|(a, b)| *a -= b)
                        });
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (self.value(Var(a)), self.value(Var(b)));
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], m * n, |gx| {
                            for ((o, gg), bb) in gx.iter_mut().zip(&g).zip(bv) {
                                *o += gg * bb;
                            }
                        });
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], m * n, |gx| {
                            for ((o, gg), aa) in gx.iter_mut().zip(&g).zip(av) {
                                *o += gg * aa;
                            }
                        });
                    }
                }
                &Op::Minimum(a, b) => {
                    // Ties route the gradient to the first operand.
                    let (av, bv) = (self.value(Var(a)), self.value(Var(b)));
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], m * n, |gx| {
                            for i in 0..gx.len() {
                                if av[i] <= bv[i] {
                                    gx[i] += g[i];
                                }
                            }
                        });
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], m * n, |gx| {
                            for i in 0..gx.len() {
                                if av[i] > bv[i] {
                                    gx[i] += g[i];
                                }
                            }
                        });
                    }
                }
                &Op::RowDot(a, b) => {
                    let k = self.nodes[a].cols;
                    let (av, bv) = (self.value(Var(a)), self.value(Var(b)));
                    for (x, other) in [(a, bv), (b, av)] {
                        if self.nodes[x].tracked {
                            accumulate(&mut grads[x], m * k, |gx| {
                                for r in 0..m {
                                    for c in 0..k {
                                        gx[r * k + c] += g[r] * other[r * k + c];
                                    }
                                }
                            });
                        }
                    }
                }
                &Op::MulCol(col, x) => {
                    let (cv, xv) = (self.value(Var(col)), self.value(Var(x)));
                    if self.nodes[col].tracked {
                        accumulate(&mut grads[col], m, |gc| {
                            for r in 0..m {
                                gc[r] += (0..n).map(|c| g[r * n + c] * xv[r * n + c]).sum::<f64>();
                            }
                        });
                    }
                    if self.nodes[x].tracked {
                        accumulate(&mut grads[x], m * n, |gx| {
                            for r in 0..m {
                                for c in 0..n {
                                    gx[r * n + c] += g[r * n + c] * cv[r];
                                }
                            }
                        });
                    }
                }
                &Op::ConcatCols(a, b) => {
                    let na = self.nodes[a].cols;
                    let nb = self.nodes[b].cols;
                    if self.nodes[a].tracked {
                        accumulate(&mut grads[a], m * na, |ga| {
                            for r in 0..m {
                                add_into(&mut ga[r * na..(r + 1) * na], &g[r * n..r * n + na]);
                            }
                        });
                    }
                    if self.nodes[b].tracked {
                        accumulate(&mut grads[b], m * nb, |gb| {
                            for r in 0..m {
                                add_into(
                                    &mut gb[r * nb..(r + 1) * nb],
                                    &g[r * n + na..(r + 1) * n],
                                );
                            }
                        });
                    }
                }
                &Op::SliceCols(x, start) => {
                    let nx = self.nodes[x].cols;
                    accumulate(&mut grads[x], m * nx, |gx| {
                        for r in 0..m {
                            add_into(
                                &mut gx[r * nx + start..r * nx + start + n],
                                &g[r * n..(r + 1) * n],
                            );
                        }
                    });
                }
                &Op::Scale(x, c) => {
                    accumulate(&mut grads[x], m * n, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b)
                    });
                }
                &Op::AddScalar(x) => {
                    accumulate(&mut grads[x], m * n, |gx| add_into(gx, &g));
                }
                &Op::Clamp(x, lo, hi) => {
                    let xv = self.value(Var(x));
                    accumulate(&mut grads[x], m * n, |gx| {
                        for i in 0..gx.len() {
                            if xv[i] >= lo && xv[i] <= hi {
                                gx[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Relu(x) => {
                    let xv = self.value(Var(x));
                    accumulate(&mut grads[x], m * n, |gx| {
                        for i in 0..gx.len() {
                            if xv[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    });
                }
                &Op::Tanh(x) => {
                    accumulate(&mut grads[x], m * n, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                &Op::Exp(x) => {
                    accumulate(&mut grads[x], m * n, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[i] * y[i];
                        }
                    });
                }
                &Op::Square(x) => {
                    let xv = self.value(Var(x));
                    accumulate(&mut grads[x], m * n, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += 2.0 * g[i] * xv[i];
                        }
                    });
                }
                &Op::Softmax(x) => {
                    accumulate(&mut grads[x], m * n, |gx| {
                        for r in 0..m {
                            let row = r * n..(r + 1) * n;
                            let dot: f64 = g[row.clone()]
                                .iter()
                                .zip(&y[row.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            for c in row {
                                gx[c] += y[c] * (g[c] - dot);
                            }
                        }
                    });
                }
                &Op::LogSoftmax(x) => {
                    accumulate(&mut grads[x], m * n, |gx| {
                        for r in 0..m {
                            let row = r * n..(r + 1) * n;
                            let total: f64 = g[row.clone()].iter().sum();
                            for c in row {
                                gx[c] += g[c] - y[c].exp() * total;
                            }
                        }
                    });
                }
                &Op::SumAll(x) => {
                    let len = self.nodes[x].rows * self.nodes[x].cols;
                    accumulate(&mut grads[x], len, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
                }
                &Op::MeanAll(x) => {
                    let len = self.nodes[x].rows * self.nodes[x].cols;
                    if len > 0 {
                        let s = g[0] / len as f64;
                        accumulate(&mut grads[x], len, |gx| gx.iter_mut().for_each(|v| *v += s));
                    }
                }
                &Op::SumRows(x) => {
                    let nx = self.nodes[x].cols;
                    accumulate(&mut grads[x], m * nx, |gx| {
                        for r in 0..m {
                            gx[r * nx..(r + 1) * nx].iter_mut().for_each(|v| *v += g[r]);
                        }
                    });
                }
                Op::Gather(x, idx) => {
                    let nx = self.nodes[*x].cols;
                    accumulate(&mut grads[*x], m * nx, |gx| {
                        for (r, &j) in idx.iter().enumerate() {
                            gx[r * nx + j] += g[r];
                        }
                    });
                }
                Op::SelectRows(x, rows) => {
                    let (mx, nx) = (self.nodes[*x].rows, self.nodes[*x].cols);
                    accumulate(&mut grads[*x], mx * nx, |gx| {
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut gx[r * nx..(r + 1) * nx], &g[i * nx..(i + 1) * nx]);
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn store_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, shape, d)| s.add(n, Tensor::new(shape.clone(), d.clone()).unwrap()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(1, 5, vec![0.0; 5]).unwrap();
        let y = g.softmax(x);
        for &p in g.value(y) {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let eye = g
            .input(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a_data: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let a = g.input(3, 2, a_data.clone()).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y), a_data.as_slice());
    }

    #[test]
    fn relu_clips_negatives() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(1, 4, vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.input(2, 3, vec![0.0; 6]).unwrap();
        let b = g.input(2, 3, vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn linear_sum_gradient_is_broadcast_input() {
        // loss = sum(x · W) with x fixed: dL/dW[i][j] = x[i].
        let (s, ids) = store_with(&[("w", vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])]);
        let mut g = Graph::new(&s);
        let x = g.input(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        let w = g.param(ids[0]);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[1.5, 1.5, -2.0, -2.0, 0.25, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (s, ids) = store_with(&[("w", vec![2, 2], vec![1.0; 4])]);
        let mut g = Graph::new(&s);
        let w = g.param(ids[0]);
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let (mut s, ids) = store_with(&[("w", vec![2, 2], vec![0.3, -0.1, 0.7, 0.2])]);
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.input(1, 2, vec![0.5, -1.0]).unwrap();
            let w = g.param(ids[0]);
            let h = g.matmul(x, w).unwrap();
            let h = g.tanh(h);
            let loss = g.sum(h);
            g.backward(loss).unwrap()
        };
        s.accumulate(&grads);
        let once = s.param(ids[0]).grad().to_vec();
        s.accumulate(&grads);
        let twice = s.param(ids[0]).grad();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
