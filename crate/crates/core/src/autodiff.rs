//! Define-by-run reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation as a [`Node`] holding its forward
//! value. Nodes only reference earlier nodes, so the tape is a DAG in
//! creation order and [`Tape::backward`] is a single reverse sweep.
//!
//! The tape is rebuilt for every training step. Learnable tensors enter via
//! [`Tape::leaf`]; everything else (sampled noise, frozen tensors) via
//! [`Tape::constant`].

use crate::error::{shape_err, NtsError, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation applied by [`Tape::nonlinearity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    pub fn as_str(self) -> &'static str {
        match self {
            Nonlinearity::Identity => "identity",
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the input `v` and output `y`.
    /// The relu kink at 0 gets derivative 0.
    fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            Nonlinearity::Identity => 1.0,
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = NtsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Nonlinearity::Identity),
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            other => Err(NtsError::Config(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Deliberately wrong backward rule, used to self-test gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    /// Negates the vector adjoint of [`Tape::matvec`].
    FlipMatvecInput,
    /// Negates the first-argument adjoint of [`Tape::contract_trilinear`].
    FlipTrilinearX,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Min(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Trilinear {
        w: NodeId,
        x: NodeId,
        y: NodeId,
        z: NodeId,
    },
    Bilinear {
        w: NodeId,
        a: NodeId,
        b: NodeId,
    },
    Matvec {
        w: NodeId,
        v: NodeId,
    },
    Softmax3(NodeId),
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Combine3 {
        alpha: NodeId,
        args: [NodeId; 3],
    },
    L2Norm(NodeId),
    SqL2Norm(NodeId),
    Nonlin(NodeId, Nonlinearity),
    Row {
        table: NodeId,
        index: usize,
    },
    Sum(NodeId),
    NegLogSoftmax {
        logits: NodeId,
        target: usize,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Min(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::Softmax3(a)
            | Op::L2Norm(a)
            | Op::SqL2Norm(a)
            | Op::Nonlin(a, _)
            | Op::Sum(a) => vec![*a],
            Op::Trilinear { w, x, y, z } => vec![*w, *x, *y, *z],
            Op::Bilinear { w, a, b } => vec![*w, *a, *b],
            Op::Matvec { w, v } => vec![*w, *v],
            Op::Stack(items) => items.clone(),
            Op::Combine3 { alpha, args } => vec![*alpha, args[0], args[1], args[2]],
            Op::Row { table, .. } => vec![*table],
            Op::NegLogSoftmax { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    fault: Option<AdjointFault>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; all zeros when `id` does not feed the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn is_reachable(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<AdjointFault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Registers a learnable tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "elementwise operands")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Coordinatewise minimum. Ties route the adjoint to the first operand.
    pub fn min_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Min(a, b), f64::min)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect())
            .expect("shape preserved");
        self.push(Op::AddConst(a, c), value)
    }

    /// `out[o] = Σ_{i,j,k} W[o,i,j,k]·x[i]·y[j]·z[k]`.
    pub fn contract_trilinear(&mut self, w: NodeId, x: NodeId, y: NodeId, z: NodeId) -> Result<NodeId> {
        let (wv, xv, yv, zv) = (self.value(w), self.value(x), self.value(y), self.value(z));
        let s = wv.shape();
        if s.len() != 4
            || xv.shape() != [s[1]]
            || yv.shape() != [s[2]]
            || zv.shape() != [s[3]]
        {
            return shape_err(format!(
                "trilinear contraction of {:?} with {:?}, {:?}, {:?}",
                s,
                xv.shape(),
                yv.shape(),
                zv.shape()
            ));
        }
        let (d_out, di, dj, dk) = (s[0], s[1], s[2], s[3]);
        let (wd, xd, yd, zd) = (wv.data(), xv.data(), yv.data(), zv.data());
        let mut out = vec![0.0; d_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &xi) in xd.iter().enumerate() {
                let mut acc_i = 0.0;
                for (j, &yj) in yd.iter().enumerate() {
                    let base = ((o * di + i) * dj + j) * dk;
                    acc_i += yj * dot(&wd[base..base + dk], zd);
                }
                acc += xi * acc_i;
            }
            *slot = acc;
        }
        let value = Tensor::vector(out);
        Ok(self.push(Op::Trilinear { w, x, y, z }, value))
    }

    /// `out[o] = Σ_{i,j} W[o,i,j]·a[i]·b[j]`.
    pub fn contract_bilinear(&mut self, w: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (wv, av, bv) = (self.value(w), self.value(a), self.value(b));
        let s = wv.shape();
        if s.len() != 3 || av.shape() != [s[1]] || bv.shape() != [s[2]] {
            return shape_err(format!(
                "bilinear contraction of {:?} with {:?}, {:?}",
                s,
                av.shape(),
                bv.shape()
            ));
        }
        let (d_out, di, dj) = (s[0], s[1], s[2]);
        let (wd, ad, bd) = (wv.data(), av.data(), bv.data());
        let out = (0..d_out)
            .map(|o| {
                (0..di)
                    .map(|i| {
                        let base = (o * di + i) * dj;
                        ad[i] * dot(&wd[base..base + dj], bd)
                    })
                    .sum()
            })
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(Op::Bilinear { w, a, b }, value))
    }

    pub fn matvec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (wv, vv) = (self.value(w), self.value(v));
        let s = wv.shape();
        if s.len() != 2 || vv.shape() != [s[1]] {
            return shape_err(format!("matvec of {:?} with {:?}", s, vv.shape()));
        }
        let cols = s[1];
        let out = wv.data().chunks(cols).map(|row| dot(row, vv.data())).collect();
        let value = Tensor::vector(out);
        Ok(self.push(Op::Matvec { w, v }, value))
    }

    /// Numerically stable softmax of exactly three logits.
    pub fn softmax3(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != [3] {
            return shape_err(format!("softmax3 expects shape [3], got {:?}", lv.shape()));
        }
        if !lv.all_finite() {
            return Err(NtsError::Numeric(format!("non-finite logits {:?}", lv.data())));
        }
        let value = Tensor::vector(softmax(lv.data()));
        Ok(self.push(Op::Softmax3(logits), value))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "dot operands")?;
        let value = Tensor::scalar(dot(va.data(), vb.data()));
        Ok(self.push(Op::Dot(a, b), value))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return shape_err("stack of zero items");
        }
        let mut data = Vec::with_capacity(items.len());
        for &id in items {
            let v = self.value(id);
            if !v.is_scalar() {
                return shape_err(format!("stack expects scalars, got {:?}", v.shape()));
            }
            data.push(v.item());
        }
        let value = Tensor::vector(data);
        Ok(self.push(Op::Stack(items.to_vec()), value))
    }

    /// `alpha[0]·a + alpha[1]·b + alpha[2]·c`.
    pub fn combine3(&mut self, alpha: NodeId, args: [NodeId; 3]) -> Result<NodeId> {
        let av = self.value(alpha);
        if av.shape() != [3] {
            return shape_err(format!("combine3 weights need shape [3], got {:?}", av.shape()));
        }
        let first = self.value(args[0]);
        for &other in &args[1..] {
            same_shape(first, self.value(other), "combine3 operands")?;
        }
        let weights = av.data().to_vec();
        let mut out = vec![0.0; first.len()];
        for (k, &arg) in args.iter().enumerate() {
            axpy(&mut out, weights[k], self.value(arg).data());
        }
        let value = Tensor::new(first.shape().to_vec(), out)?;
        Ok(self.push(Op::Combine3 { alpha, args }, value))
    }

    pub fn l2_norm(&mut self, v: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(v).sq_norm().sqrt());
        self.push(Op::L2Norm(v), value)
    }

    pub fn sq_l2_norm(&mut self, v: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(v).sq_norm());
        self.push(Op::SqL2Norm(v), value)
    }

    pub fn nonlinearity(&mut self, v: NodeId, kind: Nonlinearity) -> NodeId {
        let vv = self.value(v);
        let value = Tensor::new(
            vv.shape().to_vec(),
            vv.data().iter().map(|&x| kind.apply(x)).collect(),
        )
        .expect("shape preserved");
        self.push(Op::Nonlin(v, kind), value)
    }

    /// Row `index` of a rank-2 table, as a vector.
    pub fn row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return shape_err(format!("row lookup on shape {:?}", tv.shape()));
        }
        if index >= tv.shape()[0] {
            return Err(NtsError::Index(format!(
                "row {index} out of range for {} rows",
                tv.shape()[0]
            )));
        }
        let value = tv.row(index)?;
        Ok(self.push(Op::Row { table, index }, value))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, v: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(v).data().iter().sum());
        self.push(Op::Sum(v), value)
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let stacked = self.stack(items)?;
        let total = self.sum(stacked);
        Ok(self.scale(total, 1.0 / items.len() as f64))
    }

    /// `-log softmax(logits)[target]`.
    pub fn neg_log_softmax(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return shape_err(format!("logits must be a vector, got {:?}", lv.shape()));
        }
        if target >= lv.len() {
            return Err(NtsError::Index(format!(
                "target {target} out of range for {} logits",
                lv.len()
            )));
        }
        if !lv.all_finite() {
            return Err(NtsError::Numeric("non-finite logits".into()));
        }
        let d = lv.data();
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - d[target]);
        Ok(self.push(Op::NegLogSoftmax { logits, target }, value))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &|d| axpy(d, 1.0, gd));
                acc(*b, &|d| axpy(d, 1.0, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| axpy(d, 1.0, gd));
                acc(*b, &|d| axpy(d, -1.0, gd));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for ((o, gi), bi) in d.iter_mut().zip(gd).zip(vb) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &|d| {
                    for ((o, gi), ai) in d.iter_mut().zip(gd).zip(va) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Min(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if va[i] <= vb[i] {
                            d[i] += gd[i];
                        }
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        if va[i] > vb[i] {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| axpy(d, *c, gd)),
            Op::AddConst(a, _) => acc(*a, &|d| axpy(d, 1.0, gd)),
            Op::Trilinear { w, x, y, z } => {
                let wv = self.value(*w);
                let s = wv.shape();
                let (di, dj, dk) = (s[1], s[2], s[3]);
                let (wd, xd, yd, zd) = (wv.data(), self.value(*x).data(), self.value(*y).data(), self.value(*z).data());
                let mut dw = vec![0.0; wd.len()];
                let mut dx = vec![0.0; di];
                let mut dy = vec![0.0; dj];
                let mut dz = vec![0.0; dk];
                for (o, &go) in gd.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for i in 0..di {
                        for j in 0..dj {
                            let base = ((o * di + i) * dj + j) * dk;
                            let row = &wd[base..base + dk];
                            let s_row = dot(row, zd);
                            let c = go * xd[i] * yd[j];
                            dx[i] += go * yd[j] * s_row;
                            dy[j] += go * xd[i] * s_row;
                            axpy(&mut dz, c, row);
                            axpy(&mut dw[base..base + dk], c, zd);
                        }
                    }
                }
                if self.fault == Some(AdjointFault::FlipTrilinearX) {
                    dx.iter_mut().for_each(|v| *v = -*v);
                }
                acc(*w, &|d| axpy(d, 1.0, &dw));
                acc(*x, &|d| axpy(d, 1.0, &dx));
                acc(*y, &|d| axpy(d, 1.0, &dy));
                acc(*z, &|d| axpy(d, 1.0, &dz));
            }
            Op::Bilinear { w, a, b } => {
                let wv = self.value(*w);
                let s = wv.shape();
                let (di, dj) = (s[1], s[2]);
                let (wd, ad, bd) = (wv.data(), self.value(*a).data(), self.value(*b).data());
                let mut dw = vec![0.0; wd.len()];
                let mut da = vec![0.0; di];
                let mut db = vec![0.0; dj];
                for (o, &go) in gd.iter().enumerate() {
                    for i in 0..di {
                        let base = (o * di + i) * dj;
                        let row = &wd[base..base + dj];
                        da[i] += go * dot(row, bd);
                        axpy(&mut db, go * ad[i], row);
                        axpy(&mut dw[base..base + dj], go * ad[i], bd);
                    }
                }
                acc(*w, &|d| axpy(d, 1.0, &dw));
                acc(*a, &|d| axpy(d, 1.0, &da));
                acc(*b, &|d| axpy(d, 1.0, &db));
            }
            Op::Matvec { w, v } => {
                let wv = self.value(*w);
                let cols = wv.shape()[1];
                let vd = self.value(*v).data();
                let sign = if self.fault == Some(AdjointFault::FlipMatvecInput) { -1.0 } else { 1.0 };
                acc(*w, &|d| {
                    for (o, &go) in gd.iter().enumerate() {
                        axpy(&mut d[o * cols..(o + 1) * cols], go, vd);
                    }
                });
                acc(*v, &|d| {
                    for (o, &go) in gd.iter().enumerate() {
                        axpy(d, sign * go, &wv.data()[o * cols..(o + 1) * cols]);
                    }
                });
            }
            Op::Softmax3(a) => {
                let p = node.value.data();
                let inner = dot(gd, p);
                acc(*a, &|d| {
                    for i in 0..3 {
                        d[i] += p[i] * (gd[i] - inner);
                    }
                });
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| axpy(d, g0, vb));
                acc(*b, &|d| axpy(d, g0, va));
            }
            Op::Stack(items) => {
                for (k, &id) in items.iter().enumerate() {
                    acc(id, &|d| d[0] += gd[k]);
                }
            }
            Op::Combine3 { alpha, args } => {
                let weights = self.value(*alpha).data();
                acc(*alpha, &|d| {
                    for (k, arg) in args.iter().enumerate() {
                        d[k] += dot(gd, self.value(*arg).data());
                    }
                });
                for (k, &arg) in args.iter().enumerate() {
                    acc(arg, &|d| axpy(d, weights[k], gd));
                }
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let va = self.value(*a).data();
                    acc(*a, &|d| axpy(d, gd[0] / norm, va));
                } else {
                    acc(*a, &|_| {});
                }
            }
            Op::SqL2Norm(a) => {
                let va = self.value(*a).data();
                acc(*a, &|d| axpy(d, 2.0 * gd[0], va));
            }
            Op::Nonlin(a, kind) => {
                let (vin, vout) = (self.value(*a).data(), node.value.data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * kind.derivative(vin[i], vout[i]);
                    }
                });
            }
            Op::Row { table, index } => {
                let cols = self.value(*table).shape()[1];
                acc(*table, &|d| axpy(&mut d[index * cols..(index + 1) * cols], 1.0, gd));
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|v| *v += gd[0])),
            Op::NegLogSoftmax { logits, target } => {
                let p = softmax(self.value(*logits).data());
                acc(*logits, &|d| {
                    for (i, pi) in p.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        d[i] += gd[0] * (pi - onehot);
                    }
                });
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Binds a named tensor set onto a tape as leaves.
pub fn bind_leaves(tape: &mut Tape, tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, NodeId> {
    tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect()
}
