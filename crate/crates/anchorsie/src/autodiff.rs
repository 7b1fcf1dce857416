//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records matrix operations as they execute; [`Tape::backward`]
//! walks the record once and accumulates gradients for every node. All
//! values are `Array2<f64>`; scalars are 1x1 matrices. The op set is exactly
//! what the model and its losses need, each with a hand-derived adjoint that
//! the unit tests pin against central finite differences.

use ndarray::{Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Abs(usize),
    Max(usize, usize),
    Min(usize, usize),
    ClampMin(usize, f64),
    Sigmoid(usize),
    Gelu(usize),
    RowSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    /// L x D -> 2L x D/2, row-major.
    ReshapeHalve(usize),
    /// 2L x D/2 -> L x D, row-major.
    ReshapeWiden(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Sum over rows of `logsumexp(row) - row[target]`.
    CeWithLogits(usize, Vec<usize>),
    /// Mean binary cross-entropy with logits against a fixed target matrix.
    BceWithLogitsMean(usize, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`; zero-shaped nodes that never influenced the
    /// output return `None`.
    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

/// A Wengert list of matrix operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    /// `a` (m x n) plus a 1 x n row, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRowBroadcast(a.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| -v);
        self.push(value, Op::Neg(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a.0))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.push(value, Op::Max(a.0, b.0))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(value, Op::Min(a.0, b.0))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(c));
        self.push(value, Op::ClampMin(a.0, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        self.push(value, Op::Gelu(a.0))
    }

    /// Numerically stable softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(value, Op::RowSoftmax(a.0))
    }

    /// Row-wise layer normalization with learnable 1 x d gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut value = Array2::zeros((idx.len(), av.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&av.row(r));
        }
        self.push(value, Op::GatherRows(a.0, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self.value(a).slice(ndarray::s![.., from..to]).to_owned();
        self.push(value, Op::SliceCols(a.0, from, to))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("column concat shapes");
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("row concat shapes");
        self.push(value, Op::ConcatRows(a.0, b.0))
    }

    /// Row-major reshape L x D -> 2L x D/2.
    pub fn reshape_halve(&mut self, a: Var) -> Var {
        let (l, d) = self.value(a).dim();
        debug_assert_eq!(d % 2, 0);
        let value = self
            .value(a)
            .to_owned()
            .into_shape_with_order((2 * l, d / 2))
            .expect("halve reshape");
        self.push(value, Op::ReshapeHalve(a.0))
    }

    /// Row-major reshape 2L x D/2 -> L x D.
    pub fn reshape_widen(&mut self, a: Var) -> Var {
        let (l2, dh) = self.value(a).dim();
        debug_assert_eq!(l2 % 2, 0);
        let value = self
            .value(a)
            .to_owned()
            .into_shape_with_order((l2 / 2, dh * 2))
            .expect("widen reshape");
        self.push(value, Op::ReshapeWiden(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(value, Op::MeanAll(a.0))
    }

    /// Summed cross-entropy of row-wise logits against integer targets.
    pub fn ce_with_logits(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::CeWithLogits(logits.0, targets.to_vec()))
    }

    /// Mean binary cross-entropy with logits; empty targets yield 0.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.dim(), targets.dim());
        let n = lv.len();
        let total: f64 = lv
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln())
            .sum();
        let value = Array2::from_elem((1, 1), if n == 0 { 0.0 } else { total / n as f64 });
        self.push(value, Op::BceWithLogitsMean(logits.0, targets))
    }

    /// Accumulate gradients of the scalar node `output` into every ancestor.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[output.0].value.dim(), (1, 1));
        grads[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let restore = i;
            let mut acc = |grads: &mut Vec<Option<Array2<f64>>>, j: usize, delta: Array2<f64>| {
                match &mut grads[j] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRowBroadcast(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *r, dr);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &self.nodes[*b].value);
                    acc(&mut grads, *b, &g * &self.nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, &g / bv);
                    let db = ndarray::Zip::from(&g)
                        .and(&self.nodes[*a].value)
                        .and(bv)
                        .map_collect(|&gv, &av, &bv| -gv * av / (bv * bv));
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.mapv(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Neg(a) => acc(&mut grads, *a, g.mapv(|v| -v)),
                Op::Abs(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&gv, &av| gv * av.signum());
                    acc(&mut grads, *a, da);
                }
                Op::Max(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x >= y { gv } else { 0.0 });
                    let db = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x < y { gv } else { 0.0 });
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x <= y { gv } else { 0.0 });
                    let db = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x > y { gv } else { 0.0 });
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::ClampMin(a, c) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&gv, &av| if av > *c { gv } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&gv, &y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(&self.nodes[*a].value)
                        .map_collect(|&gv, &x| gv * gelu_grad_scalar(x));
                    acc(&mut grads, *a, da);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for c in 0..g.ncols() {
                            da[[r, c]] = (g[[r, c]] - dot) * y[[r, c]];
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &self.nodes[*x].value;
                    let gam = self.nodes[*gamma].value.row(0).to_owned();
                    let d = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgamma = Array2::zeros((1, xv.ncols()));
                    let mut dbeta = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * rstd).collect();
                        let gr = g.row(r);
                        let dxhat: Vec<f64> =
                            gr.iter().zip(&gam).map(|(&gv, &ga)| gv * ga).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d;
                        let mean_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d;
                        for c in 0..xv.ncols() {
                            dx[[r, c]] =
                                rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                            dgamma[[0, c]] += gr[c] * xhat[c];
                            dbeta[[0, c]] += gr[c];
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::GatherRows(a, idx) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dest = da.row_mut(r);
                        dest += &g.row(i);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SliceCols(a, from, _to) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(ndarray::s![.., *from..*from + g.ncols()])
                        .assign(&g);
                    acc(&mut grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[*a].value.ncols();
                    acc(&mut grads, *a, g.slice(ndarray::s![.., ..na]).to_owned());
                    acc(&mut grads, *b, g.slice(ndarray::s![.., na..]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[*a].value.nrows();
                    acc(&mut grads, *a, g.slice(ndarray::s![..na, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(ndarray::s![na.., ..]).to_owned());
                }
                Op::ReshapeHalve(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let da = g.clone().into_shape_with_order(dim).expect("halve grad reshape");
                    acc(&mut grads, *a, da);
                }
                Op::ReshapeWiden(a) => {
                    let dim = self.nodes[*a].value.dim();
                    let da = g.clone().into_shape_with_order(dim).expect("widen grad reshape");
                    acc(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                    acc(&mut grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let da = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, da);
                }
                Op::CeWithLogits(a, targets) => {
                    let lv = &self.nodes[*a].value;
                    let mut da = Array2::zeros(lv.dim());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for c in 0..lv.ncols() {
                            let p = (lv[[r, c]] - max).exp() / sum;
                            da[[r, c]] = g[[0, 0]] * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::BceWithLogitsMean(a, targets) => {
                    let lv = &self.nodes[*a].value;
                    let n = lv.len().max(1) as f64;
                    let da = ndarray::Zip::from(lv)
                        .and(targets)
                        .map_collect(|&z, &t| {
                            g[[0, 0]] * (1.0 / (1.0 + (-z).exp()) - t) / n
                        });
                    acc(&mut grads, *a, da);
                }
            }
            grads[restore] = Some(g);
        }
        Gradients { grads }
    }
}
