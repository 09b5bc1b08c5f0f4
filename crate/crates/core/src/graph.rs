//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every forward computation in the model is recorded on a [`Graph`]. Leaves
//! are either constants, differentiable inputs, or trainable parameters
//! borrowed from a [`ParamStore`]. Calling [`Graph::backward`] on a `1 x 1`
//! node yields gradients for every node that requires them; parameter
//! gradients can be collected into a [`ParamGrads`] buffer aligned with the
//! store.
//!
//! All vectors are row vectors (`1 x k`); sequences are `L x d` matrices with
//! one token per row.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Norms below this are treated as zero by [`Graph::cosine`].
pub const COSINE_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Gradient buffer aligned with a [`ParamStore`]. `None` means the parameter
/// did not take part in the computation.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SqDist(Var, Var),
    Cosine(Var, Var),
    LogSumExp(Var),
    Sum(Vec<Var>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked and readable through [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the `1 x k` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with a `1 x d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in input.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.needs(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over rows: `L x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean over at least one row")
            .insert_axis(Axis(0));
        let rg = self.needs(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Squared Euclidean distance between equally shaped operands, as `1 x 1`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = (self.value(a) - self.value(b)).mapv(|x| x * x).sum();
        let rg = self.needs(&[a, b]);
        self.push(Mat::from_elem((1, 1), d), Op::SqDist(a, b), rg)
    }

    /// Cosine similarity of two row vectors, as `1 x 1`; zero when either norm
    /// is below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let c = cosine_of(
            self.value(a).as_slice().expect("contiguous"),
            self.value(b).as_slice().expect("contiguous"),
        );
        let rg = self.needs(&[a, b]);
        self.push(Mat::from_elem((1, 1), c), Op::Cosine(a, b), rg)
    }

    /// `log Σ exp(a)` over all entries of a row vector, as `1 x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let max = value.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + value.mapv(|x| (x - max).exp()).sum().ln();
        let rg = self.needs(&[a]);
        self.push(Mat::from_elem((1, 1), lse), Op::LogSumExp(a), rg)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of zero nodes");
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value += self.value(p);
        }
        let rg = self.needs(parts);
        self.push(value, Op::Sum(parts.to_vec()), rg)
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let y = node.value.as_ref().expect("value");
                acc(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Gelu(a) => {
                let dx = self.value(*a).mapv(|x| {
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
                });
                acc(*a, g * &dx);
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.as_ref().expect("value");
                let mut dx = Mat::zeros(y.dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(dx.rows_mut()) {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gamma);
                let cols = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dr = dxhat.row(r);
                    let xr = xhat.row(r);
                    let sum_d = dr.sum();
                    let sum_dx: f64 = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] =
                            inv_std[r] / cols * (cols * dr[c] - sum_d - xr[c] * sum_dx);
                    }
                }
                acc(*x, dx);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let spread = g.broadcast((rows, g.ncols())).expect("row broadcast");
                acc(*a, spread.mapv(|v| v / rows as f64));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    acc(p, g.slice(s![offset..offset + n, ..]).to_owned());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    acc(p, g.slice(s![.., offset..offset + n]).to_owned());
                    offset += n;
                }
            }
            Op::SqDist(a, b) => {
                let diff = (self.value(*a) - self.value(*b)) * (2.0 * g[[0, 0]]);
                acc(*b, -&diff);
                acc(*a, diff);
            }
            Op::Cosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let na = av.mapv(|x| x * x).sum().sqrt();
                let nb = bv.mapv(|x| x * x).sum().sqrt();
                if na < COSINE_EPS || nb < COSINE_EPS {
                    return;
                }
                let c = node.value.as_ref().expect("value")[[0, 0]];
                let scale = g[[0, 0]];
                acc(*a, (bv / (na * nb) - av * (c / (na * na))) * scale);
                acc(*b, (av / (na * nb) - bv * (c / (nb * nb))) * scale);
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let lse = node.value.as_ref().expect("value")[[0, 0]];
                acc(*a, av.mapv(|x| (x - lse).exp()) * g[[0, 0]]);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, g.clone());
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Collects parameter gradients into a store-aligned buffer.
    pub fn param_grads(mut self, graph: &Graph<'_>) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(graph.params);
        for (pid, var) in graph.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out.grads[pid] = self.grads[v.0].take();
            }
        }
        out
    }
}

/// Cosine similarity on plain slices with the same degenerate-input rule as
/// the graph op.
pub fn cosine_of(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
