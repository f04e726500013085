//! Reverse-mode gradient tape over small dense vectors.
//!
//! Parameters live in a [`ParamStore`] owned outside the tape. A [`Graph`]
//! borrows the store immutably, records one forward pass as a list of nodes
//! and replays it backwards to produce [`Grads`] shaped like the store.
//! Every node value is a flat `Vec<f64>`; scalars are length-one vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ParamId = usize;

/// A named, row-major parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "tensor data does not match its shape");
        self.tensors.push(Tensor {
            name: name.into(),
            rows,
            cols,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`], one buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id]
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.data.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Embed { table: ParamId, row: usize },
    Affine { w: ParamId, b: ParamId, x: Var },
    Concat(Vec<Var>),
    Tanh(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Sum(Vec<Var>),
    Floor { x: Var, active: bool },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// One recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-one node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.len(), 1, "scalar() on a vector node");
        value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Constant)
    }

    /// The whole tensor, flattened.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data.clone();
        self.push(value, Op::Param(id))
    }

    pub fn embed(&mut self, table: ParamId, row: usize) -> Var {
        let value = self.params.get(table).row(row).to_vec();
        self.push(value, Op::Embed { table, row })
    }

    /// `W x + b` with `W` of shape (out × in) and `b` of length out.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let wt = self.params.get(w);
        let bias = &self.params.get(b).data;
        let input = &self.nodes[x.0].value;
        assert_eq!(wt.cols, input.len(), "affine input width mismatch for {}", wt.name);
        let value = (0..wt.rows)
            .map(|r| {
                let row = wt.row(r);
                bias[r] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push(value, Op::Affine { w, b, x })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts.iter().flat_map(|p| self.nodes[p.0].value.iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(value, Op::Tanh(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let input = &self.nodes[x.0].value;
        let lse = crate::util::log_sum_exp(input);
        let value = input.iter().map(|v| v - lse).collect();
        self.push(value, Op::LogSoftmax(x))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let value = vec![self.nodes[x.0].value[index]];
        self.push(value, Op::Pick(x, index))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise shape mismatch");
        va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v * factor).collect();
        self.push(value, Op::Scale(x, factor))
    }

    pub fn offset(&mut self, x: Var, shift: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v + shift).collect();
        self.push(value, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v * v).collect();
        self.push(value, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(value, Op::Ln(x))
    }

    /// Sum of every element of every input, as a scalar.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|p| self.nodes[p.0].value.iter().sum::<f64>()).sum();
        self.push(vec![total], Op::Sum(parts.to_vec()))
    }

    /// `max(x, floor)` for a scalar; the gradient is zero while the floor binds.
    pub fn floor(&mut self, x: Var, floor: f64) -> Var {
        let v = self.scalar(x);
        let active = v < floor;
        self.push(vec![if active { floor } else { v }], Op::Floor { x, active })
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_value = self.scalar(root);
        if !root_value.is_finite() {
            return Err(Error::Training(format!("non-finite loss {root_value}")));
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (dst, src) in grads.data[*id].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Embed { table, row } => {
                    let cols = self.params.get(*table).cols;
                    let dst = &mut grads.data[*table][row * cols..(row + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Affine { w, b, x } => {
                    let wt = self.params.get(*w);
                    let input = &self.nodes[x.0].value;
                    {
                        let gw = &mut grads.data[*w];
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                            for (d, xi) in dst.iter_mut().zip(input) {
                                *d += gr * xi;
                            }
                        }
                    }
                    for (d, gr) in grads.data[*b].iter_mut().zip(&g) {
                        *d += gr;
                    }
                    let gx = acc(&mut adj, *x, wt.cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (d, wv) in gx.iter_mut().zip(wt.row(r)) {
                            *d += gr * wv;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let dst = acc(&mut adj, *p, len);
                        for (d, s) in dst.iter_mut().zip(&g[offset..offset + len]) {
                            *d += s;
                        }
                        offset += len;
                    }
                }
                Op::Tanh(x) => {
                    let dst = acc(&mut adj, *x, g.len());
                    for ((d, gi), y) in dst.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.iter().sum();
                    let dst = acc(&mut adj, *x, g.len());
                    for ((d, gi), y) in dst.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi - y.exp() * total;
                    }
                }
                Op::Pick(x, i) => {
                    let len = self.nodes[x.0].value.len();
                    acc(&mut adj, *x, len)[*i] += g[0];
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let dst = acc(&mut adj, v, g.len());
                        for (d, gi) in dst.iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let dst = acc(&mut adj, *a, g.len());
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d += gi;
                    }
                    let dst = acc(&mut adj, *b, g.len());
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(gi, y)| gi * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * x).collect();
                    for (d, s) in acc(&mut adj, *a, g.len()).iter_mut().zip(ga) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut adj, *b, g.len()).iter_mut().zip(gb) {
                        *d += s;
                    }
                }
                Op::Scale(x, factor) => {
                    let dst = acc(&mut adj, *x, g.len());
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d += gi * factor;
                    }
                }
                Op::Offset(x) => {
                    let dst = acc(&mut adj, *x, g.len());
                    for (d, gi) in dst.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Square(x) => {
                    let input = &self.nodes[x.0].value;
                    let upd: Vec<f64> = g.iter().zip(input).map(|(gi, v)| 2.0 * gi * v).collect();
                    for (d, s) in acc(&mut adj, *x, g.len()).iter_mut().zip(upd) {
                        *d += s;
                    }
                }
                Op::Exp(x) => {
                    let dst = acc(&mut adj, *x, g.len());
                    for ((d, gi), y) in dst.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y;
                    }
                }
                Op::Ln(x) => {
                    let input = &self.nodes[x.0].value;
                    let upd: Vec<f64> = g.iter().zip(input).map(|(gi, v)| gi / v).collect();
                    for (d, s) in acc(&mut adj, *x, g.len()).iter_mut().zip(upd) {
                        *d += s;
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for d in acc(&mut adj, *p, len).iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Floor { x, active } => {
                    if !active {
                        acc(&mut adj, *x, 1)[0] += g[0];
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Plain (optionally momentum) gradient descent with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Clip threshold on the global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Per-tensor learning-rate multipliers; missing entries mean 1.
    pub lr_scale: Vec<f64>,
    velocity: Option<Grads>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            clip_norm,
            lr_scale: Vec::new(),
            velocity: None,
        }
    }

    /// Multiplies the learning rate of one tensor.
    pub fn scale_lr(&mut self, id: ParamId, factor: f64) {
        if self.lr_scale.len() <= id {
            self.lr_scale.resize(id + 1, 1.0);
        }
        self.lr_scale[id] *= factor;
    }

    pub fn step(&mut self, params: &mut ParamStore, mut grads: Grads) -> Result<StepStats> {
        let stats = clip(&mut grads, self.clip_norm)?;
        let update = if self.momentum > 0.0 {
            let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
            for (v, g) in velocity.data.iter_mut().zip(&grads.data) {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = self.momentum * *vi + gi;
                }
            }
            velocity.clone()
        } else {
            grads
        };
        for (id, g) in update.data.iter().enumerate() {
            let lr = self.lr * self.lr_scale.get(id).copied().unwrap_or(1.0);
            for (p, gi) in params.get_mut(id).data.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        Ok(stats)
    }
}

fn clip(grads: &mut Grads, clip_norm: Option<f64>) -> Result<StepStats> {
    if !grads.is_finite() {
        return Err(Error::Training("non-finite gradient".into()));
    }
    let grad_norm = grads.global_norm();
    let mut clipped = false;
    if let Some(max) = clip_norm {
        if grad_norm > max {
            grads.scale(max / grad_norm);
            clipped = true;
        }
    }
    Ok(StepStats { grad_norm, clipped })
}
