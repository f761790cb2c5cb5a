//! Dense tensor compute core.
//!
//! A [`Graph`] records operations as they are evaluated. Each node stores its
//! value and, when any input carries one, a forward-mode tangent (dual
//! evaluation), so a single forward pass yields both outputs and
//! Jacobian-vector products. [`Graph::backward`] replays the recorded nodes in
//! reverse to produce vector-Jacobian products.
//!
//! Tensors are at most 2-D. Binary elementwise ops accept equal shapes, a
//! row-vector right operand (bias broadcast), or a single-element right
//! operand.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Shape(format!(
                "tensors are at most 2-D, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor; a 1-D tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a 2-D tensor; length of a 1-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    /// Row-wise normalisation; keeps the per-row inverse std.
    LayerNorm(NodeId, Vec<f64>),
    /// Mean cross-entropy over rows; keeps the row softmax.
    CrossEntropy(NodeId, Vec<usize>, Vec<f64>),
    Mean(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    tangent: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `aᵀ·b` for a: (k, n), b: (k, p) -> (n, p)
fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for kk in 0..k {
        let brow = &b[kk * p..(kk + 1) * p];
        for i in 0..n {
            let aki = a[kk * n + i];
            if aki == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    out
}

/// `a·bᵀ` for a: (n, p), b: (k, p) -> (n, k)
fn matmul_nt(a: &[f64], b: &[f64], n: usize, p: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..k {
            out[i * k + j] = arow
                .iter()
                .zip(&b[j * p..(j + 1) * p])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn combine(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Row => {
            let c = b.data.len();
            a.data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data[i % c]))
                .collect()
        }
        Broadcast::Scalar => {
            let s = b.data[0];
            a.data.iter().map(|&x| f(x, s)).collect()
        }
    }
}

/// Sums `g` (shaped like the left operand) down to the right operand's shape.
fn reduce_to(g: &[f64], mode: Broadcast, right_len: usize) -> Vec<f64> {
    match mode {
        Broadcast::Same => g.to_vec(),
        Broadcast::Row => {
            let mut out = vec![0.0; right_len];
            for (i, v) in g.iter().enumerate() {
                out[i % right_len] += v;
            }
            out
        }
        Broadcast::Scalar => vec![g.iter().sum()],
    }
}

fn add_into(slot: &mut Option<Tensor>, shape_of: &Tensor, contribution: Vec<f64>) {
    match slot {
        Some(t) => {
            for (x, y) in t.data.iter_mut().zip(contribution) {
                *x += y;
            }
        }
        None => *slot = Some(shape_of.with_data(contribution)),
    }
}

fn row_softmax(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
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

    fn push(
        &mut self,
        value: Tensor,
        tangent: Option<Tensor>,
        op: Op,
        needs_grad: bool,
    ) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        self.nodes.push(Node {
            value,
            tangent,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf node. Gradients flow to it iff `value.requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, tangent: Option<Tensor>) -> Result<NodeId> {
        if let Some(t) = &tangent {
            if t.shape != value.shape {
                return Err(Error::Shape(format!(
                    "tangent shape {:?} differs from value shape {:?}",
                    t.shape, value.shape
                )));
            }
        }
        let needs = value.requires_grad;
        self.push(value, tangent, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Result<NodeId> {
        value.requires_grad = false;
        self.leaf(value, None)
    }

    pub fn param(&mut self, mut value: Tensor, tangent: Option<Tensor>) -> Result<NodeId> {
        value.requires_grad = true;
        self.leaf(value, tangent)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Forward-mode tangent of a node; `None` means identically zero.
    pub fn tangent(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].tangent.as_ref()
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn broadcast_mode(&self, a: NodeId, b: NodeId, what: &str) -> Result<Broadcast> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.shape == bv.shape {
            Ok(Broadcast::Same)
        } else if bv.shape.len() == 1 && av.shape.len() == 2 && bv.shape[0] == av.shape[1] {
            Ok(Broadcast::Row)
        } else if bv.data.len() == 1 && bv.shape.len() <= 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(Error::Shape(format!(
                "{what}: cannot broadcast {:?} with {:?}",
                av.shape, bv.shape
            )))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape, bv.shape
            )));
        }
        let (n, k, p) = (av.shape[0], av.shape[1], bv.shape[1]);
        let value = Tensor::matrix(n, p, matmul_raw(&av.data, &bv.data, n, k, p))?;
        let (at, bt) = (self.node(a).tangent.as_ref(), self.node(b).tangent.as_ref());
        let tangent = match (at, bt) {
            (None, None) => None,
            _ => {
                let mut t = vec![0.0; n * p];
                if let Some(da) = at {
                    for (o, v) in t.iter_mut().zip(matmul_raw(&da.data, &bv.data, n, k, p)) {
                        *o += v;
                    }
                }
                if let Some(db) = bt {
                    for (o, v) in t.iter_mut().zip(matmul_raw(&av.data, &db.data, n, k, p)) {
                        *o += v;
                    }
                }
                Some(value.with_data(t))
            }
        };
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(value, tangent, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast_mode(a, b, "add")?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let value = av.with_data(combine(av, bv, mode, |x, y| x + y));
        let tangent = match (&self.node(a).tangent, &self.node(b).tangent) {
            (None, None) => None,
            (ta, tb) => {
                let da = ta.clone().unwrap_or_else(|| av.zeros_like());
                let db = tb.clone().unwrap_or_else(|| bv.zeros_like());
                Some(av.with_data(combine(&da, &db, mode, |x, y| x + y)))
            }
        };
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(value, tangent, Op::Add(a, b, mode), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast_mode(a, b, "mul")?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let value = av.with_data(combine(av, bv, mode, |x, y| x * y));
        let tangent = match (&self.node(a).tangent, &self.node(b).tangent) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = vec![0.0; av.data.len()];
                if let Some(da) = ta {
                    for (o, v) in t.iter_mut().zip(combine(da, bv, mode, |x, y| x * y)) {
                        *o += v;
                    }
                }
                if let Some(db) = tb {
                    for (o, v) in t.iter_mut().zip(combine(av, db, mode, |x, y| x * y)) {
                        *o += v;
                    }
                }
                Some(av.with_data(t))
            }
        };
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(value, tangent, Op::Mul(a, b, mode), needs)
    }

    fn unary(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<NodeId> {
        let av = &self.node(a).value;
        let value = av.with_data(av.data.iter().map(|&x| f(x)).collect());
        let tangent = self.node(a).tangent.as_ref().map(|da| {
            av.with_data(
                av.data
                    .iter()
                    .zip(&da.data)
                    .map(|(&x, &d)| d * df(x))
                    .collect(),
            )
        });
        let needs = self.node(a).needs_grad;
        self.push(value, tangent, op, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(
            a,
            Op::Relu(a),
            |x| x.max(0.0),
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Gelu(a), gelu, gelu_prime)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a).value;
        let cols = av.cols();
        let s = row_softmax(&av.data, cols);
        let tangent = self.node(a).tangent.as_ref().map(|da| {
            let mut t = vec![0.0; s.len()];
            for r in 0..av.rows() {
                let range = r * cols..(r + 1) * cols;
                let dot: f64 = s[range.clone()]
                    .iter()
                    .zip(&da.data[range.clone()])
                    .map(|(x, y)| x * y)
                    .sum();
                for j in range {
                    t[j] = s[j] * (da.data[j] - dot);
                }
            }
            av.with_data(t)
        });
        let value = av.with_data(s);
        let needs = self.node(a).needs_grad;
        self.push(value, tangent, Op::Softmax(a), needs)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a).value;
        let cols = av.cols();
        if cols == 0 {
            return Err(Error::Shape("layer_norm over zero columns".into()));
        }
        let rows = av.rows();
        let mut y = vec![0.0; av.data.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &av.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, x) in y[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let tangent = self.node(a).tangent.as_ref().map(|da| {
            let mut t = vec![0.0; y.len()];
            for r in 0..rows {
                let range = r * cols..(r + 1) * cols;
                let d = &da.data[range.clone()];
                let yr = &y[range.clone()];
                let md = d.iter().sum::<f64>() / cols as f64;
                let myd = yr.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for (j, o) in t[range].iter_mut().enumerate() {
                    *o = inv_std[r] * (d[j] - md - yr[j] * myd);
                }
            }
            av.with_data(t)
        });
        let value = av.with_data(y);
        let needs = self.node(a).needs_grad;
        self.push(value, tangent, Op::LayerNorm(a, inv_std), needs)
    }

    /// Mean over rows of `logsumexp(z) - z[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let zv = &self.node(logits).value;
        if zv.shape.len() != 2 || zv.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} with {} labels",
                zv.shape,
                labels.len()
            )));
        }
        let (n, c) = (zv.rows(), zv.cols());
        if n == 0 {
            return Err(Error::Empty("cross_entropy over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let p = row_softmax(&zv.data, c);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &zv.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= n as f64;
        let tangent = self.node(logits).tangent.as_ref().map(|dz| {
            let mut acc = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let pr = &p[i * c..(i + 1) * c];
                let dr = &dz.data[i * c..(i + 1) * c];
                acc += pr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() - dr[y];
            }
            Tensor::scalar(acc / n as f64)
        });
        let needs = self.node(logits).needs_grad;
        self.push(
            Tensor::scalar(loss),
            tangent,
            Op::CrossEntropy(logits, labels.to_vec(), p),
            needs,
        )
    }

    /// Mean over every element.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.node(a).value;
        if av.data.is_empty() {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let n = av.data.len() as f64;
        let value = Tensor::scalar(av.data.iter().sum::<f64>() / n);
        let tangent = self
            .node(a)
            .tangent
            .as_ref()
            .map(|da| Tensor::scalar(da.data.iter().sum::<f64>() / n));
        let needs = self.node(a).needs_grad;
        self.push(value, tangent, Op::Mean(a), needs)
    }

    /// Reverse pass for a scalar loss.
    pub fn backward_scalar(&self, loss: NodeId) -> Result<Gradients> {
        let v = &self.node(loss).value;
        match v.item() {
            None => Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                v.shape
            ))),
            Some(x) if !x.is_finite() => Err(Error::Numeric(format!("loss is {x}"))),
            Some(_) => self.backward(loss, &v.with_data(vec![1.0])),
        }
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// to every node that requires a gradient.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let out = &self.node(output).value;
        if seed.data.len() != out.data.len() {
            return Err(Error::Shape(format!(
                "seed of {} values for output {:?}",
                seed.data.len(),
                out.shape
            )));
        }
        if !seed.is_finite() {
            return Err(Error::Numeric("non-finite backward seed".into()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(out.with_data(seed.data.clone()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                    let (n, k, p) = (av.shape[0], av.shape[1], bv.shape[1]);
                    if self.node(*a).needs_grad {
                        add_into(&mut adj[a.0], av, matmul_nt(&g.data, &bv.data, n, p, k));
                    }
                    if self.node(*b).needs_grad {
                        add_into(&mut adj[b.0], bv, matmul_tn(&av.data, &g.data, n, k, p));
                    }
                }
                Op::Add(a, b, mode) => {
                    if self.node(*a).needs_grad {
                        add_into(&mut adj[a.0], &self.node(*a).value, g.data.clone());
                    }
                    if self.node(*b).needs_grad {
                        let bv = &self.node(*b).value;
                        add_into(&mut adj[b.0], bv, reduce_to(&g.data, *mode, bv.data.len()));
                    }
                }
                Op::Mul(a, b, mode) => {
                    let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                    if self.node(*a).needs_grad {
                        add_into(&mut adj[a.0], av, combine(&g, bv, *mode, |x, y| x * y));
                    }
                    if self.node(*b).needs_grad {
                        let prod: Vec<f64> =
                            g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        add_into(&mut adj[b.0], bv, reduce_to(&prod, *mode, bv.data.len()));
                    }
                }
                Op::Relu(a) => {
                    let av = &self.node(*a).value;
                    let d = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut adj[a.0], av, d);
                }
                Op::Gelu(a) => {
                    let av = &self.node(*a).value;
                    let d = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(&gv, &x)| gv * gelu_prime(x))
                        .collect();
                    add_into(&mut adj[a.0], av, d);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let cols = s.cols();
                    let mut d = vec![0.0; s.data.len()];
                    for r in 0..s.rows() {
                        let range = r * cols..(r + 1) * cols;
                        let dot: f64 = s.data[range.clone()]
                            .iter()
                            .zip(&g.data[range.clone()])
                            .map(|(x, y)| x * y)
                            .sum();
                        for j in range {
                            d[j] = s.data[j] * (g.data[j] - dot);
                        }
                    }
                    add_into(&mut adj[a.0], &self.node(*a).value, d);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut d = vec![0.0; y.data.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let gr = &g.data[range.clone()];
                        let yr = &y.data[range.clone()];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (j, o) in d[range].iter_mut().enumerate() {
                            *o = is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    add_into(&mut adj[a.0], &self.node(*a).value, d);
                }
                Op::CrossEntropy(z, labels, p) => {
                    let zv = &self.node(*z).value;
                    let (n, c) = (zv.rows(), zv.cols());
                    let scale = g.data[0] / n as f64;
                    let mut d: Vec<f64> = p.iter().map(|v| v * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] -= scale;
                    }
                    add_into(&mut adj[z.0], zv, d);
                }
                Op::Mean(a) => {
                    let av = &self.node(*a).value;
                    let v = g.data[0] / av.data.len() as f64;
                    add_into(&mut adj[a.0], av, vec![v; av.data.len()]);
                }
            }
            adj[idx] = Some(g);
        }

        for a in adj.iter().flatten() {
            if !a.is_finite() {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}
