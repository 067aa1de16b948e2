// Reverse-mode tape. A fresh graph is built for every forward pass; leaves
// copy their values in, so parameters can be mutated freely once `grad`
// has returned.

use super::kernels;
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Tanh(Var),
    RowNormalize { input: Var, norms: Vec<f32> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Inserts a parameter; it is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(self.data(a), self.data(b), &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "transpose")?;
        let mut out = vec![0.0; m * n];
        kernels::transpose(self.data(a), &mut out, m, n);
        let tracked = self.is_tracked(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), tracked))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(name, a, b));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Adds a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "add_row")?;
        let (rm, rn) = self.matrix(row, "add_row")?;
        if rm != 1 || rn != n {
            return Err(self.dim_err("add_row", a, row));
        }
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += v;
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let tracked = self.is_tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let tracked = self.is_tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.tanh()).collect();
        let tracked = self.is_tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), tracked)
    }

    /// Scales every row to unit L2 norm. A zero row is a contract error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "row_normalize")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return contract(format!("degenerate cosine: row {i} has norm {norm}"));
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::RowNormalize { input: a, norms },
            tracked,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return contract("concat_rows of nothing");
        };
        let (_, n) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.matrix(p, "concat_rows")?;
            if pn != n {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += m;
            out.extend_from_slice(self.data(p));
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let tracked = self.is_tracked(a);
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|v| v * v).sum();
        let tracked = self.is_tracked(a);
        self.push(vec![1], vec![s], Op::SumSquares(a), tracked)
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return contract(format!("target {bad} outside {k} logits"));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (((row[j] - max) as f64).exp() / denom) as f32;
            }
            loss += denom.ln() - (row[targets[i]] - max) as f64;
        }
        let tracked = self.is_tracked(logits);
        Ok(self.push(
            vec![1],
            vec![(loss / b as f64) as f32],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Gradient of a scalar `loss` with respect to each of `params`.
    /// Parameters the loss does not reach (or untracked ones) get zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        if self.data(loss).len() != 1 {
            return contract(format!(
                "gradient requires a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        params
            .iter()
            .map(|&p| {
                let g = grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.data(p).len()]);
                Tensor::new(self.shape(p).to_vec(), g)
            })
            .collect()
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.is_tracked(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::mm_nt_acc(g, self.data(*b), ga, m, n, k);
                }
                if self.is_tracked(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::mm_tn_acc(self.data(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.is_tracked(*a) {
                    let (m, n) = (node.shape[1], node.shape[0]);
                    let mut t = vec![0.0; m * n];
                    kernels::transpose(g, &mut t, n, m);
                    add_into(slot(grads, *a, m * n), &t);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.is_tracked(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.is_tracked(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.is_tracked(*b) {
                    for (o, &v) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.is_tracked(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.is_tracked(*row) {
                    let n = self.data(*row).len();
                    let gr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.is_tracked(*a) {
                    for (o, &v) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::Relu(a) => {
                if self.is_tracked(*a) {
                    let x = self.data(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.is_tracked(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::RowNormalize { input, norms } => {
                if self.is_tracked(*input) {
                    let n = node.shape.last().copied().unwrap_or(1);
                    let y = &node.value;
                    let ga = slot(grads, *input, g.len());
                    for (i, &norm) in norms.iter().enumerate() {
                        let r = i * n..(i + 1) * n;
                        let yr = &y[r.clone()];
                        let gr = &g[r.clone()];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in ga[r].iter_mut().enumerate() {
                            *o += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    if self.is_tracked(*p) {
                        add_into(slot(grads, *p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                if self.is_tracked(*a) {
                    let len = self.data(*a).len();
                    for o in slot(grads, *a, len) {
                        *o += g[0];
                    }
                }
            }
            Op::SumSquares(a) => {
                if self.is_tracked(*a) {
                    let x = self.data(*a);
                    for (o, &v) in slot(grads, *a, x.len()).iter_mut().zip(x) {
                        *o += 2.0 * v * g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.is_tracked(*logits) {
                    let b = targets.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f32;
                    let gl = slot(grads, *logits, probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += (probs[i * k + j] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
