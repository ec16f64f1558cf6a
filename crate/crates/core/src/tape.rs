//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices, with just the operations the transformers need.
//!
//! Every forward pass records nodes into a [`Graph`] that borrows the
//! [`ParamSet`] immutably; [`Graph::backward`] returns a [`Gradients`] buffer
//! aligned with the parameter set. Graphs are cheap and single-use, so batch
//! items can be differentiated independently on worker threads.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-6;

/// Ordered, named collection of trainable matrices. Vectors are stored as
/// `1 x n` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its id. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.values.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradient buffers; `None` means exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros(count: usize) -> Self {
        Gradients {
            grads: vec![None; count],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.grads[id].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: usize, g: &Mat) {
        match &mut self.grads[id] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Whether the gradient for `id` has any nonzero entry.
    pub fn is_nonzero(&self, id: usize) -> bool {
        self.grads[id].as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0))
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Mse(Var, Mat),
    CrossEntropy(Var, Vec<usize>, Mat),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

// One exp instead of libm tanh, which dominated GELU cost.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(a) * r;
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let v = self.value(a) * &m;
        self.push(v, Op::MulConst(a, m), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            inv_std.push(r);
        }
        self.push(out, Op::LayerNorm(a, inv_std), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Row-wise softmax. Columns flagged in `masked` get probability zero.
    pub fn softmax(&mut self, a: Var, masked: Option<&[bool]>) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if !masked.is_some_and(|m| m[j]) {
                    max = max.max(v);
                }
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if masked.is_some_and(|m| m[j]) {
                    *v = 0.0;
                } else {
                    *v = (*v - max).exp();
                    sum += *v;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must match");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Mean squared error against a constant target, as a `1 x 1` node.
    pub fn mse(&mut self, pred: Var, target: Mat) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape mismatch");
        let mut acc = 0.0;
        Zip::from(p).and(&target).for_each(|&a, &b| acc += (a - b) * (a - b));
        let v = Array2::from_elem((1, 1), acc / p.len() as f64);
        self.push(v, Op::Mse(pred, target), &[pred])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per row");
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (mut row, &label) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let v = Array2::from_elem((1, 1), loss / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec(), probs), &[logits])
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::zeros(self.params.len());
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.shape(loss)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if wants(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if wants(a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if wants(b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if wants(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if wants(row) {
                        let prod = &g * self.value(*a);
                        acc(&mut grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(a) {
                        acc(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::MulConst(a, m) => acc(&mut grads, *a, &g * m),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LayerNorm(a, inv_std) => {
                    let y = node.value.as_ref().expect("value");
                    let n = y.ncols() as f64;
                    let mut dx = g;
                    for ((mut drow, yrow), &r) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &yv| *d = r * (*d - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(self.value(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, dx);
                }
                Op::Silu(a) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(self.value(*a)).for_each(|d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, dx);
                }
                Op::Softmax(a) => {
                    let p = node.value.as_ref().expect("value");
                    let mut dx = g;
                    for (mut drow, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot));
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::SliceRows(a, start) => {
                    let slot = grads[a.0].get_or_insert_with(|| Array2::zeros(self.shape(*a)));
                    let mut part = slot.slice_mut(s![*start..*start + g.nrows(), ..]);
                    part += &g;
                }
                Op::SliceCols(a, start) => {
                    let slot = grads[a.0].get_or_insert_with(|| Array2::zeros(self.shape(*a)));
                    let mut part = slot.slice_mut(s![.., *start..*start + g.ncols()]);
                    part += &g;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        if wants(p) {
                            acc(&mut grads, *p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.shape(*p).1;
                        if wants(p) {
                            acc(&mut grads, *p, g.slice(s![.., offset..offset + cols]).to_owned());
                        }
                        offset += cols;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let row = &g / rows as f64;
                    let dx = row.broadcast((rows, cols)).expect("broadcast").to_owned();
                    acc(&mut grads, *a, dx);
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred);
                    let k = 2.0 * g[[0, 0]] / p.len() as f64;
                    acc(&mut grads, *pred, (p - target) * k);
                }
                Op::CrossEntropy(logits, labels, probs) => {
                    let k = g[[0, 0]] / labels.len() as f64;
                    let mut dx = probs.clone();
                    for (mut row, &label) in dx.rows_mut().into_iter().zip(labels) {
                        row[label] -= 1.0;
                    }
                    dx.mapv_inplace(|v| v * k);
                    acc(&mut grads, *logits, dx);
                }
            }
        }
        out
    }
}
