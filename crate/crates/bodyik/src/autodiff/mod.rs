//! Small reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Define-by-run tape: every operation evaluates eagerly and records the
//! node needed for the backward sweep. Scalars are 1×1 matrices. The op set
//! is exactly what the refiner network, the loss suite and the
//! differentiable parameter-to-skeleton path require; finite differences
//! (see [`finite_diff`]) stay on the test side as the independent oracle.
//!
//! A [`Var`] is an index into one tape; mixing variables across tapes is a
//! logic error.

pub mod finite_diff;

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Sum(Var),
    Sqrt(Var),
    Recip(Var),
    MulScalarBcast(Var, Var),
    AddBroadcastRow(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SoftmaxRowsMasked {
        x: Var,
        active: Vec<bool>,
    },
    RowMask(Var, Vec<bool>),
    MeanRows(Var),
    Cross(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Scalar leaf as a 1×1 matrix.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Sum of all elements, as a 1×1 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    /// Multiply every element of `a` by the 1×1 scalar `s`.
    pub fn mul_scalar_bcast(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = &self.nodes[a.0].value * sv;
        self.push(value, Op::MulScalarBcast(a, s))
    }

    /// Add a 1×d row vector to every row of `a`.
    pub fn add_broadcast_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddBroadcastRow(a, row))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let value = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        self.push(value, Op::SliceRows(a, r0))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let value = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        self.push(value, Op::SliceCols(a, c0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("column concat shapes");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("row concat shapes");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Tanh-form GELU activation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    /// Per-row layer normalization with learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sigma = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / sigma);
        }
        let value = &value * &self.nodes[gain.0].value + &self.nodes[bias.0].value;
        self.push(value, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Row-wise softmax restricted to `active` columns; inactive columns
    /// get probability zero.
    pub fn softmax_rows_masked(&mut self, x: Var, active: &[bool]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ncols(), active.len(), "mask length");
        let mut value = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let max = row
                .iter()
                .zip(active)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, v) in row.iter().enumerate() {
                if active[j] {
                    denom += (v - max).exp();
                }
            }
            for (j, v) in row.iter().enumerate() {
                if active[j] {
                    value[(i, j)] = (v - max).exp() / denom;
                }
            }
        }
        self.push(
            value,
            Op::SoftmaxRowsMasked {
                x,
                active: active.to_vec(),
            },
        )
    }

    /// Zero out the rows where `keep` is false.
    pub fn row_mask(&mut self, a: Var, keep: &[bool]) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.nrows(), keep.len(), "mask length");
        let mut value = av.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            if !keep[i] {
                row.fill(0.0);
            }
        }
        self.push(value, Op::RowMask(a, keep.to_vec()))
    }

    /// Mean over rows, giving a 1×d row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let t = av.nrows() as f64;
        let value = av.sum_axis(Axis(0)).insert_axis(Axis(0)) / t;
        self.push(value, Op::MeanRows(a))
    }

    /// Row-major reshape to `rows`×`cols` (element count preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), rows * cols, "reshape element count");
        let value = Array2::from_shape_vec((rows, cols), av.iter().copied().collect())
            .expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    /// Cross product of two 3×1 column vectors.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(av.dim(), (3, 1));
        debug_assert_eq!(bv.dim(), (3, 1));
        let value = cross3(av, bv);
        self.push(value, Op::Cross(a, b))
    }

    // Composite helpers.

    /// Sum of squares of all elements, 1×1.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Frobenius / Euclidean norm of all elements, 1×1. Not differentiable
    /// at exactly zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let ss = self.sum_squares(a);
        self.sqrt(ss)
    }

    /// Mean of |elements|, 1×1.
    pub fn mean_abs(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let ab = self.abs(a);
        let total = self.sum(ab);
        self.scale(total, 1.0 / n)
    }

    /// Rescale a vector to unit norm.
    pub fn normalize(&mut self, a: Var) -> Var {
        let n = self.norm(a);
        let inv = self.recip(n);
        self.mul_scalar_bcast(a, inv)
    }

    /// Dot product of two same-shape arrays, 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        self.sum(prod)
    }

    /// Backward sweep from a 1×1 loss node. Gradients accumulate into
    /// `grad` of every node reachable from `loss`; leaves keep theirs for
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward needs a scalar loss"
        );
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[(0, 0)] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = self.nodes[i].grad.clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.nodes[a.0].grad += &da;
                    self.nodes[b.0].grad += &db;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a.0].grad += &g;
                    self.nodes[b.0].grad += &g;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a.0].grad += &g;
                    self.nodes[b.0].grad -= &g;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.nodes[a.0].grad += &da;
                    self.nodes[b.0].grad += &db;
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.nodes[a.0].grad += &(&g * c);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.nodes[a.0].grad += &g;
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.nodes[a.0].grad += &g.t();
                }
                Op::Sum(a) => {
                    let a = *a;
                    let gv = g[(0, 0)];
                    self.nodes[a.0].grad += gv;
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    // Zero-subgradient convention at y = 0 keeps norms of
                    // exactly-zero residuals trainable.
                    let da = &g * &self.nodes[i].value.mapv(|y| {
                        if y == 0.0 {
                            0.0
                        } else {
                            0.5 / y
                        }
                    });
                    self.nodes[a.0].grad += &da;
                }
                Op::Recip(a) => {
                    let a = *a;
                    let da = &g * &self.nodes[i].value.mapv(|y| -y * y);
                    self.nodes[a.0].grad += &da;
                }
                Op::MulScalarBcast(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = self.nodes[s.0].value[(0, 0)];
                    let ds = (&g * &self.nodes[a.0].value).sum();
                    self.nodes[a.0].grad += &(&g * sv);
                    self.nodes[s.0].grad[(0, 0)] += ds;
                }
                Op::AddBroadcastRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.nodes[a.0].grad += &g;
                    self.nodes[row.0].grad += &dr;
                }
                Op::SliceRows(a, r0) => {
                    let (a, r0) = (*a, *r0);
                    let mut da = self.nodes[a.0].grad.slice_mut(s![r0..r0 + g.nrows(), ..]);
                    da += &g;
                }
                Op::SliceCols(a, c0) => {
                    let (a, c0) = (*a, *c0);
                    let mut da = self.nodes[a.0].grad.slice_mut(s![.., c0..c0 + g.ncols()]);
                    da += &g;
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., c0..c0 + w]).to_owned();
                        self.nodes[p.0].grad += &gp;
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut r0 = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.nrows();
                        let gp = g.slice(s![r0..r0 + h, ..]).to_owned();
                        self.nodes[p.0].grad += &gp;
                        r0 += h;
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let da = &g * &self.nodes[a.0].value.mapv(gelu_derivative);
                    self.nodes[a.0].grad += &da;
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = &g * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    self.nodes[a.0].grad += &da;
                }
                Op::Abs(a) => {
                    let a = *a;
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.nodes[a.0].grad += &(&g * &sign);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let d = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let sigma = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sigma).collect();
                        let grow: Vec<f64> = (0..xv.ncols()).map(|c| g[(r, c)]).collect();
                        let gxhat: Vec<f64> =
                            (0..xv.ncols()).map(|c| grow[c] * gv[(0, c)]).collect();
                        let m1 = gxhat.iter().sum::<f64>() / d;
                        let m2 = gxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(gx, xh)| gx * xh)
                            .sum::<f64>()
                            / d;
                        for c in 0..xv.ncols() {
                            dx[(r, c)] = (gxhat[c] - m1 - xhat[c] * m2) / sigma;
                            dgain[(0, c)] += grow[c] * xhat[c];
                            dbias[(0, c)] += grow[c];
                        }
                    }
                    self.nodes[x.0].grad += &dx;
                    self.nodes[gain.0].grad += &dgain;
                    self.nodes[bias.0].grad += &dbias;
                }
                Op::SoftmaxRowsMasked { x, active } => {
                    let x = *x;
                    let active = active.clone();
                    let y = self.nodes[i].value.clone();
                    let mut dx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let mut s_total = 0.0;
                        for c in 0..y.ncols() {
                            if active[c] {
                                s_total += g[(r, c)] * y[(r, c)];
                            }
                        }
                        for c in 0..y.ncols() {
                            if active[c] {
                                dx[(r, c)] = y[(r, c)] * (g[(r, c)] - s_total);
                            }
                        }
                    }
                    self.nodes[x.0].grad += &dx;
                }
                Op::RowMask(a, keep) => {
                    let a = *a;
                    let keep = keep.clone();
                    let mut da = g.clone();
                    for (r, mut row) in da.rows_mut().into_iter().enumerate() {
                        if !keep[r] {
                            row.fill(0.0);
                        }
                    }
                    self.nodes[a.0].grad += &da;
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let t = self.nodes[a.0].value.nrows() as f64;
                    let da = &g / t;
                    let mut full = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    for mut row in full.rows_mut() {
                        row += &da.row(0);
                    }
                    self.nodes[a.0].grad += &full;
                }
                Op::Cross(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    // ⟨g, da×b⟩ = ⟨da, b×g⟩ and ⟨g, a×db⟩ = ⟨db, g×a⟩.
                    let da = cross3(&bv, &g);
                    let db = cross3(&g, &av);
                    self.nodes[a.0].grad += &da;
                    self.nodes[b.0].grad += &db;
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let dim = self.nodes[a.0].value.raw_dim();
                    let da = Array2::from_shape_vec(dim, g.iter().copied().collect())
                        .expect("reshape grad");
                    self.nodes[a.0].grad += &da;
                }
            }
        }
    }
}

fn cross3(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((3, 1));
    out[(0, 0)] = a[(1, 0)] * b[(2, 0)] - a[(2, 0)] * b[(1, 0)];
    out[(1, 0)] = a[(2, 0)] * b[(0, 0)] - a[(0, 0)] * b[(2, 0)];
    out[(2, 0)] = a[(0, 0)] * b[(1, 0)] - a[(1, 0)] * b[(0, 0)];
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
