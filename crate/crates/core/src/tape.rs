//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Values are computed eagerly as nodes are pushed. Leaves may borrow their
//! data so model parameters are not copied per graph. Nodes that do not
//! depend on a gradient-carrying leaf are skipped during the reverse pass.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulT(usize, usize),
    Add(usize, usize),
    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    /// Masked entries are exact zeros, so the backward pass needs no mask.
    Softmax(usize),
    LogSoftmax(usize),
    /// Row-wise `x / sqrt(mean(x^2) + eps)`, no gain.
    RmsNorm(usize),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub(crate) struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value: Cow::Owned(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf borrowing `value`; `tracked` leaves receive gradients.
    pub fn leaf(&mut self, value: &'a Array2<f64>, tracked: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a.0, b.0), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a.0, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a])
    }

    /// Row-wise softmax. `causal = Some(shift)` masks columns beyond `row + shift`.
    pub fn softmax(&mut self, a: Var, causal: Option<usize>) -> Var {
        let mut v = self.value(a).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let limit = causal.map_or(row.len(), |shift| (i + shift + 1).min(row.len()));
            let max = row.iter().take(limit).copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::Softmax(a.0), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a.0), &[a])
    }

    pub fn rms_norm(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let r = rms(row.view());
            row.mapv_inplace(|x| x / r);
        }
        self.push(v, Op::RmsNorm(a.0), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), &rows);
        self.push(v, Op::GatherRows(table.0, rows), &[table])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a.0, start, end), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concatenated parts share a row count");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), parts)
    }

    /// Reverse pass from `output` seeded with `seed`. Returns one gradient
    /// slot per node; untracked nodes stay `None`.
    pub fn backward(&self, output: Var, seed: Array2<f64>) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], g.dot(&vb.t()));
                    }
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads[*b], va.t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], g.dot(vb.as_ref()));
                    }
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads[*b], g.t().dot(va.as_ref()));
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads[*b], g.clone());
                    }
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[*row].tracked {
                        accumulate(&mut grads[*row], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[*a], g * *c),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let dx = ndarray::Zip::from(&g).and(y.as_ref()).map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads[*a], dx);
                }
                Op::Softmax(input) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        drow.zip_mut_with(&yrow, |d, &y| *d = y * (*d - dot));
                    }
                    accumulate(&mut grads[*input], dx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |d, &y| *d -= y.exp() * total);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::RmsNorm(a) => {
                    let (x, y) = (&self.nodes[*a].value, &node.value);
                    let mut dx = g;
                    for ((mut drow, yrow), xrow) in dx.rows_mut().into_iter().zip(y.rows()).zip(x.rows()) {
                        let r = rms(xrow);
                        let mean: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum::<f64>() / yrow.len() as f64;
                        drow.zip_mut_with(&yrow, |d, &y| *d = (*d - y * mean) / r);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::GatherRows(table, rows) => {
                    let mut dt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[*table], dt);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.nodes[p].value.ncols();
                        if self.nodes[p].tracked {
                            accumulate(&mut grads[p], g.slice(s![.., offset..offset + width]).to_owned());
                        }
                        offset += width;
                    }
                }
            }
        }
        grads
    }
}

const RMS_EPS: f64 = 1e-6;

fn rms(row: ndarray::ArrayView1<f64>) -> f64 {
    (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}
