//! Minimal reverse-mode autodiff over row-major `f64` matrices.
//!
//! The backbone, the face encoder and the adapter all build their forward
//! pass on a [`Tape`]. Inference uses the same tape and simply never calls
//! [`Tape::backward`], so there is exactly one forward code path.
//!
//! Only leaves created with [`Tape::param`] carry gradients. Anything created
//! with [`Tape::constant`] (frozen backbone weights, inputs) never gets a
//! gradient buffer allocated, which is what makes gradient isolation
//! structural rather than a convention.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Sparse row-to-row linear map: `out[o] += w * src[i]`.
///
/// Covers pooling, upsampling, gathers and reshuffles between token layouts.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub out_rows: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl RowMap {
    pub fn gather(indices: &[usize]) -> Self {
        Self {
            out_rows: indices.len(),
            entries: indices
                .iter()
                .enumerate()
                .map(|(o, &i)| (o as u32, i as u32, 1.0))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcast a `[1 × d]` row over every row of the first operand.
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Silu(Var),
    LayerNormRows(Var, f64),
    RowMix(Var, Arc<RowMap>),
    VStack(Vec<Var>),
    SumSquares(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.by_name.get(name)
    }

    /// L2 norm over every gradient tensor.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of every trainable leaf registered on this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a [1 x d] row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNormRows(a, eps), rg)
    }

    pub fn row_mix(&mut self, a: Var, map: Arc<RowMap>) -> Var {
        let src = self.value(a);
        let mut value = Array2::<f64>::zeros((map.out_rows, src.ncols()));
        for &(o, i, w) in &map.entries {
            value
                .row_mut(o as usize)
                .scaled_add(w, &src.row(i as usize));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowMix(a, map), rg)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("vstack column mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::VStack(parts.to_vec()), rg)
    }

    /// `Σ x²` as a `[1 × 1]` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), rg)
    }

    /// Reverse sweep from a scalar `[1 × 1]` root.
    ///
    /// Buffers are only allocated for nodes that depend on a parameter, so
    /// constant leaves end the sweep with no gradient at all.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Gradients::default();
        }
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        drow.zip_mut_with(&yrow, |d, &y| *d = y * (*d - dot));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut dx = g;
                    dx.zip_mut_with(x, |d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let xhat = &node.value;
                    let mut dx = g;
                    for ((mut drow, xrow), hrow) in
                        dx.rows_mut().into_iter().zip(x.rows()).zip(xhat.rows())
                    {
                        let n = xrow.len() as f64;
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mean_d = drow.sum() / n;
                        let mean_dh: f64 = drow
                            .iter()
                            .zip(hrow.iter())
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n;
                        drow.zip_mut_with(&hrow, |d, &h| *d = inv * (*d - mean_d - h * mean_dh));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::RowMix(a, map) => {
                    let src = self.value(*a);
                    let mut dx = Array2::<f64>::zeros(src.dim());
                    for &(o, i, w) in &map.entries {
                        dx.row_mut(i as usize).scaled_add(w, &g.row(o as usize));
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::VStack(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if self.requires_grad(*p) {
                            let slice = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                            accumulate(&mut grads, *p, slice);
                        }
                        start += n;
                    }
                }
                Op::SumSquares(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads, *a, self.value(*a) * (2.0 * s));
                }
            }
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Array2::zeros(self.value(*v).dim()));
            match out.by_name.get_mut(name) {
                Some(existing) => *existing += &g,
                None => {
                    out.by_name.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
