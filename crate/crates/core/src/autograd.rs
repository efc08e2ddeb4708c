//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and returns gradients for every node created
//! with [`Graph::leaf`]. Shapes are checked with assertions: the model layer
//! validates user-facing shapes before anything reaches the tape.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn row_broadcast(row: &Mat, rows: usize) -> Mat {
    row.broadcast((rows, row.ncols())).unwrap().to_owned()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|x| !x.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1×d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row width");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Elementwise square root. The gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with a learned `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        assert_eq!(self.value(gamma).dim(), (1, d), "layer_norm gamma");
        assert_eq!(self.value(beta).dim(), (1, d), "layer_norm beta");
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        value *= self.value(gamma);
        value += self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            ng,
        )
    }

    /// Scales every row to unit Euclidean norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            assert!(norm > 0.0, "normalize_rows on a zero row");
            row.mapv_inplace(|x| x / norm);
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Places row `k` of `a` at row `rows[k]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), rows.len(), "scatter_rows index count");
        let mut value = Mat::zeros((n_rows, av.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(r).assign(&av.row(k));
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterRows(a, rows.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape element count");
        let flat: Vec<f64> = av.iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).unwrap();
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Mat::from_elem((1, 1), av.sum() / av.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// Column means, as a `1×d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy target count");
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Mat::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec()), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward from a non-scalar");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, contrib: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            &Op::MatMulBt(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.dot(self.value(b)));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.t().dot(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, -g);
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g * self.value(b));
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g * self.value(a));
                }
            }
            &Op::Scale(a, k) => self.accumulate(grads, a, g * k),
            &Op::Square(a) => self.accumulate(grads, a, g * &(self.value(a) * 2.0)),
            &Op::Gelu(a) => {
                let mut d = self.value(a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, a, d);
            }
            &Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                self.accumulate(grads, a, d);
            }
            &Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
                });
                self.accumulate(grads, a, d);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv * dot);
                }
                self.accumulate(grads, a, d);
            }
            &Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(x);
                let gv = self.value(gamma);
                let d = xv.ncols() as f64;
                let mut xhat = xv.clone();
                let mut invs = Vec::with_capacity(xv.nrows());
                for mut row in xhat.rows_mut() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    row.mapv_inplace(|v| (v - mean) * inv);
                    invs.push(inv);
                }
                if self.ng(gamma) {
                    let dg = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, gamma, dg);
                }
                if self.ng(beta) {
                    self.accumulate(grads, beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(x) {
                    let dxhat = g * gv;
                    let mut dx = Mat::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = invs[r];
                        let mut out = dx.row_mut(r);
                        for c in 0..xv.ncols() {
                            out[c] = inv / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::NormalizeRows(a) => {
                let av = self.value(a);
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..av.nrows() {
                    let norm = av.row(r).dot(&av.row(r)).sqrt();
                    let gy = g.row(r).dot(&y.row(r));
                    let mut drow = d.row_mut(r);
                    Zip::from(&mut drow)
                        .and(&y.row(r))
                        .for_each(|dv, &yv| *dv = (*dv - yv * gy) / norm);
                }
                self.accumulate(grads, a, d);
            }
            Op::GatherRows(a, rows) => {
                let a = *a;
                if self.ng(a) {
                    let mut d = Mat::zeros(self.value(a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    self.accumulate(grads, a, d);
                }
            }
            Op::ScatterRows(a, rows) => {
                let d = g.select(Axis(0), rows);
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            &Op::SliceCols(a, start) => {
                if self.ng(a) {
                    let mut d = Mat::zeros(self.value(a).dim());
                    d.slice_mut(s![.., start..start + g.ncols()]).assign(g);
                    self.accumulate(grads, a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            &Op::Reshape(a) => {
                let dim = self.value(a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                self.accumulate(grads, a, Mat::from_shape_vec(dim, flat).unwrap());
            }
            &Op::SumAll(a) => {
                let dim = self.value(a).dim();
                self.accumulate(grads, a, Mat::from_elem(dim, g[[0, 0]]));
            }
            &Op::MeanAll(a) => {
                let av = self.value(a);
                let k = g[[0, 0]] / av.len() as f64;
                self.accumulate(grads, a, Mat::from_elem(av.dim(), k));
            }
            &Op::MeanRows(a) => {
                let rows = self.value(a).nrows();
                let d = row_broadcast(&(g / rows as f64), rows);
                self.accumulate(grads, a, d);
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let n = targets.len() as f64;
                let scale = g[[0, 0]] / n;
                let mut d = lv.clone();
                for (mut row, &t) in d.rows_mut().into_iter().zip(targets) {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                    row[t] -= 1.0;
                    row.mapv_inplace(|x| x * scale);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}
