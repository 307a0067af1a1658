//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Operations are recorded onto a linear [`Tape`]; forward values are computed
//! eagerly into a flat arena (column-major). [`Tape::backward`] replays the
//! tape in reverse to accumulate gradients of a scalar output with respect to
//! every recorded node. [`Tape::jvp`] emits the forward-mode directional
//! derivative of a recorded sub-graph as *new* tape nodes, so that quantities
//! like Jacobian traces remain differentiable by a later reverse pass.
//!
//! A tape is single-owner while recording; once complete it can be read from
//! anywhere. Parallelism happens across independent tapes.

use crate::error::TapeError;
use nalgebra::DMatrix;

/// Handle to a recorded node. Cheap to copy; only valid for its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    rows: u32,
    cols: u32,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows as usize
    }
    pub fn cols(&self) -> usize {
        self.cols as usize
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

/// Recorded primitive operations. Inputs are node indices.
#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(u32, u32),
    Add(u32, u32),
    Scale(u32, f64),
    Tanh(u32),
    Sigmoid(u32),
    /// Elementwise product; one operand may be 1x1 (scalar broadcast).
    Mul(u32, u32),
    Transpose(u32),
    /// Column-major relayout; the underlying buffer is unchanged.
    Reshape(u32),
    Sum(u32),
    Trace(u32),
    Slice(u32, u32, u32),
    /// Inverse of a square matrix.
    Inverse(u32),
    /// log |det A| of a square matrix.
    LogDet(u32),
    /// Kronecker product.
    Kron(u32, u32),
}

struct NodeMeta {
    off: usize,
    rows: u32,
    cols: u32,
}

/// Gradient map returned by [`Tape::backward`]: one matrix slot per node,
/// laid out like the value arena. Untouched nodes read back as zeros.
pub struct Gradients {
    buf: Vec<f64>,
    offs: Vec<(usize, u32, u32)>,
    touched: Vec<bool>,
}

impl Gradients {
    /// Gradient of the backward output with respect to `v`, as a dense matrix.
    pub fn get(&self, v: Var) -> DMatrix<f64> {
        let (off, r, c) = self.offs[v.index()];
        DMatrix::from_column_slice(r as usize, c as usize, &self.buf[off..off + (r * c) as usize])
    }

    pub fn get_slice(&self, v: Var) -> &[f64] {
        let (off, r, c) = self.offs[v.index()];
        &self.buf[off..off + (r * c) as usize]
    }

    pub fn is_touched(&self, v: Var) -> bool {
        self.touched[v.index()]
    }
}

/// Wengert tape: ordered list of primitive ops with eagerly computed values.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    meta: Vec<NodeMeta>,
    buf: Vec<f64>,
}

// ---- dense kernels on column-major slices ------------------------------

/// out += alpha * A(m x k) * B(k x n)
fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64) {
    for j in 0..n {
        let out_col = &mut out[j * m..(j + 1) * m];
        for l in 0..k {
            let f = alpha * b[l + j * k];
            if f == 0.0 {
                continue;
            }
            let a_col = &a[l * m..(l + 1) * m];
            for i in 0..m {
                out_col[i] += f * a_col[i];
            }
        }
    }
}

/// out += alpha * A(m x k) * B(n x k)^T
fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64) {
    for l in 0..k {
        let a_col = &a[l * m..(l + 1) * m];
        for j in 0..n {
            let f = alpha * b[j + l * n];
            if f == 0.0 {
                continue;
            }
            let out_col = &mut out[j * m..(j + 1) * m];
            for i in 0..m {
                out_col[i] += f * a_col[i];
            }
        }
    }
}

/// out += alpha * A(k x m)^T * B(k x n)
fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, alpha: f64) {
    for j in 0..n {
        let b_col = &b[j * k..(j + 1) * k];
        for i in 0..m {
            let a_col = &a[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_col[l] * b_col[l];
            }
            out[i + j * m] += alpha * acc;
        }
    }
}

fn inverse_of(values: &[f64], n: usize) -> Option<DMatrix<f64>> {
    DMatrix::from_column_slice(n, n, values).try_inverse()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Marks the current end of tape; pass to [`Tape::truncate`] to roll back.
    pub fn checkpoint(&self) -> usize {
        self.ops.len()
    }

    /// Rolls the tape back to a previous [`Tape::checkpoint`]. Vars recorded
    /// after the checkpoint become invalid.
    pub fn truncate(&mut self, mark: usize) {
        assert!(mark <= self.ops.len());
        let buf_len = if mark == 0 {
            0
        } else {
            let m = &self.meta[mark - 1];
            m.off + (m.rows * m.cols) as usize
        };
        self.ops.truncate(mark);
        self.meta.truncate(mark);
        self.buf.truncate(buf_len);
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Var {
        let off = self.buf.len();
        self.buf.resize(off + rows * cols, 0.0);
        self.ops.push(op);
        self.meta.push(NodeMeta {
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        Var {
            idx: (self.ops.len() - 1) as u32,
            rows: rows as u32,
            cols: cols as u32,
        }
    }

    fn val(&self, idx: u32) -> &[f64] {
        let m = &self.meta[idx as usize];
        &self.buf[m.off..m.off + (m.rows * m.cols) as usize]
    }

    fn var_of(&self, idx: u32) -> Var {
        let m = &self.meta[idx as usize];
        Var {
            idx,
            rows: m.rows,
            cols: m.cols,
        }
    }

    /// Value slice of a recorded node (column-major).
    pub fn value_slice(&self, v: Var) -> &[f64] {
        self.val(v.idx)
    }

    /// Value of a recorded node as a dense matrix.
    pub fn value(&self, v: Var) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.rows(), v.cols(), self.value_slice(v))
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(v.is_scalar());
        self.value_slice(v)[0]
    }

    // ---- leaves --------------------------------------------------------

    pub fn leaf(&mut self, m: &DMatrix<f64>) -> Var {
        self.leaf_from_slice(m.nrows(), m.ncols(), m.as_slice())
    }

    pub fn leaf_from_slice(&mut self, rows: usize, cols: usize, data: &[f64]) -> Var {
        assert_eq!(data.len(), rows * cols);
        let v = self.push(Op::Leaf, rows, cols);
        let off = self.meta[v.index()].off;
        self.buf[off..off + data.len()].copy_from_slice(data);
        v
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf_from_slice(1, 1, &[x])
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Op::Leaf, rows, cols)
    }

    pub fn fill(&mut self, rows: usize, cols: usize, x: f64) -> Var {
        let v = self.push(Op::Leaf, rows, cols);
        let off = self.meta[v.index()].off;
        self.buf[off..off + rows * cols].fill(x);
        v
    }

    pub fn identity(&mut self, n: usize) -> Var {
        let v = self.push(Op::Leaf, n, n);
        let off = self.meta[v.index()].off;
        for i in 0..n {
            self.buf[off + i + i * n] = 1.0;
        }
        v
    }

    // ---- recorded primitives --------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if a.cols() != b.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs_rows: a.rows(),
                lhs_cols: a.cols(),
                rhs_rows: b.rows(),
                rhs_cols: b.cols(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = self.push(Op::MatMul(a.idx, b.idx), m, n);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let bm = &self.meta[b.index()];
        mm_nn(
            &mut tail[..m * n],
            &head[am.off..am.off + m * k],
            &head[bm.off..bm.off + k * n],
            m,
            k,
            n,
            1.0,
        );
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if a.shape() != b.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                lhs_rows: a.rows(),
                lhs_cols: a.cols(),
                rhs_rows: b.rows(),
                rhs_cols: b.cols(),
            });
        }
        let out = self.push(Op::Add(a.idx, b.idx), a.rows(), a.cols());
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let bm = &self.meta[b.index()];
        for i in 0..a.len() {
            tail[i] = head[am.off + i] + head[bm.off + i];
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.push(Op::Scale(a.idx, factor), a.rows(), a.cols());
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        for i in 0..a.len() {
            tail[i] = factor * head[am.off + i];
        }
        out
    }

    /// a - b, recorded as add(a, scale(b, -1)).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.push(Op::Tanh(a.idx), a.rows(), a.cols());
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        for i in 0..a.len() {
            tail[i] = head[am.off + i].tanh();
        }
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.push(Op::Sigmoid(a.idx), a.rows(), a.cols());
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        for i in 0..a.len() {
            let x = head[am.off + i];
            tail[i] = 1.0 / (1.0 + (-x).exp());
        }
        out
    }

    /// Elementwise product. Exactly one operand may be 1x1, in which case it
    /// is broadcast over the other.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let ok = a.shape() == b.shape() || a.is_scalar() || b.is_scalar();
        if !ok {
            return Err(TapeError::ShapeMismatch {
                op: "mul",
                lhs_rows: a.rows(),
                lhs_cols: a.cols(),
                rhs_rows: b.rows(),
                rhs_cols: b.cols(),
            });
        }
        let (rows, cols) = if a.is_scalar() { b.shape() } else { a.shape() };
        let out = self.push(Op::Mul(a.idx, b.idx), rows, cols);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let bm = &self.meta[b.index()];
        let n = rows * cols;
        if a.is_scalar() && !b.is_scalar() {
            let s = head[am.off];
            for i in 0..n {
                tail[i] = s * head[bm.off + i];
            }
        } else if b.is_scalar() && !a.is_scalar() {
            let s = head[bm.off];
            for i in 0..n {
                tail[i] = s * head[am.off + i];
            }
        } else {
            for i in 0..n {
                tail[i] = head[am.off + i] * head[bm.off + i];
            }
        }
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = a.shape();
        let out = self.push(Op::Transpose(a.idx), c, r);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        for j in 0..c {
            for i in 0..r {
                tail[j + i * c] = head[am.off + i + j * r];
            }
        }
        out
    }

    /// Column-major relayout to `rows x cols`; element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TapeError> {
        if a.len() != rows * cols {
            return Err(TapeError::ShapeMismatch {
                op: "reshape",
                lhs_rows: a.rows(),
                lhs_cols: a.cols(),
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let out = self.push(Op::Reshape(a.idx), rows, cols);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        tail[..a.len()].copy_from_slice(&head[am.off..am.off + a.len()]);
        Ok(out)
    }

    /// Column-major vectorization: `rows*cols x 1`.
    pub fn vec(&mut self, a: Var) -> Var {
        self.reshape(a, a.len(), 1).expect("vec preserves length")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.push(Op::Sum(a.idx), 1, 1);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        tail[0] = head[am.off..am.off + a.len()].iter().sum();
        out
    }

    pub fn trace(&mut self, a: Var) -> Result<Var, TapeError> {
        if a.rows() != a.cols() {
            return Err(TapeError::NotSquare {
                op: "trace",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let out = self.push(Op::Trace(a.idx), 1, 1);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let mut acc = 0.0;
        for i in 0..n {
            acc += head[am.off + i + i * n];
        }
        tail[0] = acc;
        Ok(out)
    }

    pub fn slice(
        &mut self,
        a: Var,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var, TapeError> {
        if row0 + rows > a.rows() || col0 + cols > a.cols() {
            return Err(TapeError::SliceOutOfBounds {
                op: "slice",
                row0,
                col0,
                rows,
                cols,
                src_rows: a.rows(),
                src_cols: a.cols(),
            });
        }
        let out = self.push(Op::Slice(a.idx, row0 as u32, col0 as u32), rows, cols);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let ar = a.rows();
        for j in 0..cols {
            for i in 0..rows {
                tail[i + j * rows] = head[am.off + (row0 + i) + (col0 + j) * ar];
            }
        }
        Ok(out)
    }

    /// Entry (i, j) of a matrix as a 1x1 node.
    pub fn entry(&mut self, a: Var, i: usize, j: usize) -> Result<Var, TapeError> {
        self.slice(a, i, j, 1, 1)
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var, TapeError> {
        if a.rows() != a.cols() {
            return Err(TapeError::NotSquare {
                op: "inverse",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let inv = inverse_of(self.val(a.idx), n).ok_or(TapeError::SingularMatrix { op: "inverse" })?;
        let out = self.push(Op::Inverse(a.idx), n, n);
        let off = self.meta[out.index()].off;
        self.buf[off..off + n * n].copy_from_slice(inv.as_slice());
        Ok(out)
    }

    /// log |det A| for square A.
    pub fn logdet(&mut self, a: Var) -> Result<Var, TapeError> {
        if a.rows() != a.cols() {
            return Err(TapeError::NotSquare {
                op: "logdet",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let m = DMatrix::from_column_slice(n, n, self.val(a.idx));
        let det = m.lu().determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(TapeError::SingularMatrix { op: "logdet" });
        }
        let v = det.abs().ln();
        let out = self.push(Op::LogDet(a.idx), 1, 1);
        let off = self.meta[out.index()].off;
        self.buf[off] = v;
        Ok(out)
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ma, na) = a.shape();
        let (mb, nb) = b.shape();
        let out = self.push(Op::Kron(a.idx, b.idx), ma * mb, na * nb);
        let off = self.meta[out.index()].off;
        let (head, tail) = self.buf.split_at_mut(off);
        let am = &self.meta[a.index()];
        let bm = &self.meta[b.index()];
        let rows = ma * mb;
        for ja in 0..na {
            for ia in 0..ma {
                let aij = head[am.off + ia + ja * ma];
                if aij == 0.0 {
                    continue;
                }
                for jb in 0..nb {
                    for ib in 0..mb {
                        let r = ia * mb + ib;
                        let c = ja * nb + jb;
                        tail[r + c * rows] = aij * head[bm.off + ib + jb * mb];
                    }
                }
            }
        }
        Ok(out)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Gradients of a scalar output with respect to every node on the tape.
    /// Nodes the output does not depend on read back as zero matrices.
    pub fn backward(&self, output: Var) -> Result<Gradients, TapeError> {
        if !output.is_scalar() {
            return Err(TapeError::NonScalarOutput {
                rows: output.rows(),
                cols: output.cols(),
            });
        }
        let n_nodes = self.ops.len();
        let mut g = Gradients {
            buf: vec![0.0; self.buf.len()],
            offs: self
                .meta
                .iter()
                .map(|m| (m.off, m.rows, m.cols))
                .collect(),
            touched: vec![false; n_nodes],
        };
        g.buf[g.offs[output.index()].0] = 1.0;
        g.touched[output.index()] = true;

        for idx in (0..=output.index()).rev() {
            if !g.touched[idx] {
                continue;
            }
            let (g_off, gr, gc) = g.offs[idx];
            let g_len = (gr * gc) as usize;
            match self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let am = &self.meta[a as usize];
                        (am.rows as usize, am.cols as usize)
                    };
                    let n = self.meta[b as usize].cols as usize;
                    let grad_out = g.buf[g_off..g_off + g_len].to_vec();
                    {
                        let ao = g.offs[a as usize].0;
                        let bm = &self.meta[b as usize];
                        let b_val = &self.buf[bm.off..bm.off + k * n];
                        mm_nt(&mut g.buf[ao..ao + m * k], &grad_out, b_val, m, n, k, 1.0);
                        g.touched[a as usize] = true;
                    }
                    {
                        let bo = g.offs[b as usize].0;
                        let am = &self.meta[a as usize];
                        let a_val = &self.buf[am.off..am.off + m * k];
                        mm_tn(&mut g.buf[bo..bo + k * n], a_val, &grad_out, k, m, n, 1.0);
                        g.touched[b as usize] = true;
                    }
                }
                Op::Add(a, b) => {
                    for &src in &[a, b] {
                        let so = g.offs[src as usize].0;
                        for i in 0..g_len {
                            g.buf[so + i] += g.buf[g_off + i];
                        }
                        g.touched[src as usize] = true;
                    }
                }
                Op::Scale(a, f) => {
                    let ao = g.offs[a as usize].0;
                    for i in 0..g_len {
                        g.buf[ao + i] += f * g.buf[g_off + i];
                    }
                    g.touched[a as usize] = true;
                }
                Op::Tanh(a) => {
                    let ao = g.offs[a as usize].0;
                    let yo = self.meta[idx].off;
                    for i in 0..g_len {
                        let y = self.buf[yo + i];
                        g.buf[ao + i] += (1.0 - y * y) * g.buf[g_off + i];
                    }
                    g.touched[a as usize] = true;
                }
                Op::Sigmoid(a) => {
                    let ao = g.offs[a as usize].0;
                    let yo = self.meta[idx].off;
                    for i in 0..g_len {
                        let y = self.buf[yo + i];
                        g.buf[ao + i] += y * (1.0 - y) * g.buf[g_off + i];
                    }
                    g.touched[a as usize] = true;
                }
                Op::Mul(a, b) => {
                    let a_scalar = {
                        let am = &self.meta[a as usize];
                        am.rows == 1 && am.cols == 1
                    };
                    let b_scalar = {
                        let bm = &self.meta[b as usize];
                        bm.rows == 1 && bm.cols == 1
                    };
                    let ao = g.offs[a as usize].0;
                    let bo = g.offs[b as usize].0;
                    let a_off = self.meta[a as usize].off;
                    let b_off = self.meta[b as usize].off;
                    if a_scalar && !b_scalar {
                        let s = self.buf[a_off];
                        let mut acc = 0.0;
                        for i in 0..g_len {
                            let gi = g.buf[g_off + i];
                            acc += self.buf[b_off + i] * gi;
                            g.buf[bo + i] += s * gi;
                        }
                        g.buf[ao] += acc;
                    } else if b_scalar && !a_scalar {
                        let s = self.buf[b_off];
                        let mut acc = 0.0;
                        for i in 0..g_len {
                            let gi = g.buf[g_off + i];
                            acc += self.buf[a_off + i] * gi;
                            g.buf[ao + i] += s * gi;
                        }
                        g.buf[bo] += acc;
                    } else {
                        for i in 0..g_len {
                            let gi = g.buf[g_off + i];
                            g.buf[ao + i] += self.buf[b_off + i] * gi;
                            g.buf[bo + i] += self.buf[a_off + i] * gi;
                        }
                    }
                    g.touched[a as usize] = true;
                    g.touched[b as usize] = true;
                }
                Op::Transpose(a) => {
                    let ao = g.offs[a as usize].0;
                    let (r, c) = (gr as usize, gc as usize);
                    for j in 0..c {
                        for i in 0..r {
                            g.buf[ao + j + i * c] += g.buf[g_off + i + j * r];
                        }
                    }
                    g.touched[a as usize] = true;
                }
                Op::Reshape(a) => {
                    let ao = g.offs[a as usize].0;
                    for i in 0..g_len {
                        g.buf[ao + i] += g.buf[g_off + i];
                    }
                    g.touched[a as usize] = true;
                }
                Op::Sum(a) => {
                    let s = g.buf[g_off];
                    let (ao, ar, ac) = g.offs[a as usize];
                    for i in 0..(ar * ac) as usize {
                        g.buf[ao + i] += s;
                    }
                    g.touched[a as usize] = true;
                }
                Op::Trace(a) => {
                    let s = g.buf[g_off];
                    let (ao, ar, _) = g.offs[a as usize];
                    let n = ar as usize;
                    for i in 0..n {
                        g.buf[ao + i + i * n] += s;
                    }
                    g.touched[a as usize] = true;
                }
                Op::Slice(a, row0, col0) => {
                    let (ao, ar, _) = g.offs[a as usize];
                    let arows = ar as usize;
                    let (r, c) = (gr as usize, gc as usize);
                    for j in 0..c {
                        for i in 0..r {
                            g.buf[ao + (row0 as usize + i) + (col0 as usize + j) * arows] +=
                                g.buf[g_off + i + j * r];
                        }
                    }
                    g.touched[a as usize] = true;
                }
                Op::Inverse(a) => {
                    // d/dA of A^{-1}: grad_A -= Y^T G Y^T with Y = A^{-1}.
                    let n = gr as usize;
                    let yo = self.meta[idx].off;
                    let y = &self.buf[yo..yo + n * n];
                    let grad_out = g.buf[g_off..g_off + n * n].to_vec();
                    let mut t = vec![0.0; n * n];
                    mm_tn(&mut t, y, &grad_out, n, n, n, 1.0);
                    let ao = g.offs[a as usize].0;
                    mm_nt(&mut g.buf[ao..ao + n * n], &t, y, n, n, n, -1.0);
                    g.touched[a as usize] = true;
                }
                Op::LogDet(a) => {
                    let s = g.buf[g_off];
                    let am = &self.meta[a as usize];
                    let n = am.rows as usize;
                    let inv = inverse_of(&self.buf[am.off..am.off + n * n], n)
                        .ok_or(TapeError::SingularMatrix { op: "logdet backward" })?;
                    let ao = g.offs[a as usize].0;
                    for j in 0..n {
                        for i in 0..n {
                            // grad += s * (A^{-1})^T
                            g.buf[ao + i + j * n] += s * inv[(j, i)];
                        }
                    }
                    g.touched[a as usize] = true;
                }
                Op::Kron(a, b) => {
                    let (ma, na) = {
                        let am = &self.meta[a as usize];
                        (am.rows as usize, am.cols as usize)
                    };
                    let (mb, nb) = {
                        let bm = &self.meta[b as usize];
                        (bm.rows as usize, bm.cols as usize)
                    };
                    let rows = ma * mb;
                    let a_off = self.meta[a as usize].off;
                    let b_off = self.meta[b as usize].off;
                    let ao = g.offs[a as usize].0;
                    let bo = g.offs[b as usize].0;
                    for ja in 0..na {
                        for ia in 0..ma {
                            let mut acc = 0.0;
                            let aij = self.buf[a_off + ia + ja * ma];
                            for jb in 0..nb {
                                for ib in 0..mb {
                                    let r = ia * mb + ib;
                                    let c = ja * nb + jb;
                                    let go = g.buf[g_off + r + c * rows];
                                    let bij = self.buf[b_off + ib + jb * mb];
                                    acc += go * bij;
                                    g.buf[bo + ib + jb * mb] += go * aij;
                                }
                            }
                            g.buf[ao + ia + ja * ma] += acc;
                        }
                    }
                    g.touched[a as usize] = true;
                    g.touched[b as usize] = true;
                }
            }
        }
        Ok(g)
    }

    // ---- forward-mode transformation --------------------------------------

    /// Emits the directional derivative of `output` along the given seed
    /// tangents as new tape nodes, walking the recorded sub-graph
    /// `[range_start, output]`. `seeds` maps existing vars to tangent vars of
    /// the same shape; every other node in the range starts with a zero
    /// tangent. Returns `None` when `output` does not depend on any seed.
    ///
    /// The emitted nodes are ordinary primitives, so the result remains
    /// differentiable by [`Tape::backward`].
    pub fn jvp(
        &mut self,
        range_start: usize,
        seeds: &[(Var, Var)],
        output: Var,
    ) -> Result<Option<Var>, TapeError> {
        let end = output.index() + 1;
        let mut tangents: Vec<Option<Var>> = vec![None; end];
        for &(v, t) in seeds {
            if v.shape() != t.shape() {
                return Err(TapeError::ShapeMismatch {
                    op: "jvp seed",
                    lhs_rows: v.rows(),
                    lhs_cols: v.cols(),
                    rhs_rows: t.rows(),
                    rhs_cols: t.cols(),
                });
            }
            if v.index() < end {
                tangents[v.index()] = Some(t);
            }
        }
        let start = range_start.min(end);
        for idx in start..end {
            if tangents[idx].is_some() {
                continue; // seeded node
            }
            let tan = |tangents: &Vec<Option<Var>>, i: u32| -> Option<Var> {
                tangents.get(i as usize).copied().flatten()
            };
            let out_var = self.var_of(idx as u32);
            let t_out: Option<Var> = match self.ops[idx] {
                Op::Leaf => None,
                Op::MatMul(a, b) => {
                    let ta = tan(&tangents, a);
                    let tb = tan(&tangents, b);
                    match (ta, tb) {
                        (None, None) => None,
                        (Some(ta), None) => Some(self.matmul(ta, self.var_of(b))?),
                        (None, Some(tb)) => Some(self.matmul(self.var_of(a), tb)?),
                        (Some(ta), Some(tb)) => {
                            let p = self.matmul(ta, self.var_of(b))?;
                            let q = self.matmul(self.var_of(a), tb)?;
                            Some(self.add(p, q)?)
                        }
                    }
                }
                Op::Add(a, b) => match (tan(&tangents, a), tan(&tangents, b)) {
                    (None, None) => None,
                    (Some(ta), None) => Some(ta),
                    (None, Some(tb)) => Some(tb),
                    (Some(ta), Some(tb)) => Some(self.add(ta, tb)?),
                },
                Op::Scale(a, f) => tan(&tangents, a).map(|ta| self.scale(ta, f)),
                Op::Tanh(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => {
                        let y2 = self.mul(out_var, out_var)?;
                        let ones = self.fill(out_var.rows(), out_var.cols(), 1.0);
                        let d = self.sub(ones, y2)?;
                        Some(self.mul(d, ta)?)
                    }
                },
                Op::Sigmoid(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => {
                        let ones = self.fill(out_var.rows(), out_var.cols(), 1.0);
                        let one_minus = self.sub(ones, out_var)?;
                        let d = self.mul(out_var, one_minus)?;
                        Some(self.mul(d, ta)?)
                    }
                },
                Op::Mul(a, b) => {
                    let ta = tan(&tangents, a);
                    let tb = tan(&tangents, b);
                    match (ta, tb) {
                        (None, None) => None,
                        (Some(ta), None) => Some(self.mul(ta, self.var_of(b))?),
                        (None, Some(tb)) => Some(self.mul(self.var_of(a), tb)?),
                        (Some(ta), Some(tb)) => {
                            let p = self.mul(ta, self.var_of(b))?;
                            let q = self.mul(self.var_of(a), tb)?;
                            Some(self.add(p, q)?)
                        }
                    }
                }
                Op::Transpose(a) => tan(&tangents, a).map(|ta| self.transpose(ta)),
                Op::Reshape(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => Some(self.reshape(ta, out_var.rows(), out_var.cols())?),
                },
                Op::Sum(a) => tan(&tangents, a).map(|ta| self.sum(ta)),
                Op::Trace(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => Some(self.trace(ta)?),
                },
                Op::Slice(a, r0, c0) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => Some(self.slice(
                        ta,
                        r0 as usize,
                        c0 as usize,
                        out_var.rows(),
                        out_var.cols(),
                    )?),
                },
                Op::Inverse(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => {
                        // d(A^{-1}) = -A^{-1} dA A^{-1}
                        let p = self.matmul(out_var, ta)?;
                        let q = self.matmul(p, out_var)?;
                        Some(self.scale(q, -1.0))
                    }
                },
                Op::LogDet(a) => match tan(&tangents, a) {
                    None => None,
                    Some(ta) => {
                        let inv = self.inverse(self.var_of(a))?;
                        let p = self.matmul(inv, ta)?;
                        Some(self.trace(p)?)
                    }
                },
                Op::Kron(a, b) => {
                    let ta = tan(&tangents, a);
                    let tb = tan(&tangents, b);
                    match (ta, tb) {
                        (None, None) => None,
                        (Some(ta), None) => Some(self.kron(ta, self.var_of(b))?),
                        (None, Some(tb)) => Some(self.kron(self.var_of(a), tb)?),
                        (Some(ta), Some(tb)) => {
                            let p = self.kron(ta, self.var_of(b))?;
                            let q = self.kron(self.var_of(a), tb)?;
                            Some(self.add(p, q)?)
                        }
                    }
                }
            };
            tangents[idx] = t_out;
        }
        Ok(tangents[output.index()])
    }

    /// Recomputes every non-leaf node from its stored inputs and checks the
    /// result is bit-identical to the recorded value.
    pub fn verify_replay(&self) -> bool {
        let mut replica = Tape::new();
        for idx in 0..self.ops.len() {
            let m = &self.meta[idx];
            let v = match self.ops[idx] {
                Op::Leaf => {
                    replica.leaf_from_slice(m.rows as usize, m.cols as usize, self.val(idx as u32))
                }
                op => {
                    let remap = |i: u32| -> Var {
                        let mm = &replica.meta[i as usize];
                        Var {
                            idx: i,
                            rows: mm.rows,
                            cols: mm.cols,
                        }
                    };
                    let r = match op {
                        Op::MatMul(a, b) => replica.matmul(remap(a), remap(b)),
                        Op::Add(a, b) => replica.add(remap(a), remap(b)),
                        Op::Scale(a, f) => Ok(replica.scale(remap(a), f)),
                        Op::Tanh(a) => Ok(replica.tanh(remap(a))),
                        Op::Sigmoid(a) => Ok(replica.sigmoid(remap(a))),
                        Op::Mul(a, b) => replica.mul(remap(a), remap(b)),
                        Op::Transpose(a) => Ok(replica.transpose(remap(a))),
                        Op::Reshape(a) => replica.reshape(remap(a), m.rows as usize, m.cols as usize),
                        Op::Sum(a) => Ok(replica.sum(remap(a))),
                        Op::Trace(a) => replica.trace(remap(a)),
                        Op::Slice(a, r0, c0) => replica.slice(
                            remap(a),
                            r0 as usize,
                            c0 as usize,
                            m.rows as usize,
                            m.cols as usize,
                        ),
                        Op::Inverse(a) => replica.inverse(remap(a)),
                        Op::LogDet(a) => replica.logdet(remap(a)),
                        Op::Kron(a, b) => replica.kron(remap(a), remap(b)),
                        Op::Leaf => unreachable!(),
                    };
                    match r {
                        Ok(v) => v,
                        Err(_) => return false,
                    }
                }
            };
            if replica.value_slice(v) != self.val(idx as u32) {
                return false;
            }
        }
        true
    }
}
