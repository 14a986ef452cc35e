//! Ternary operators `[x, y, z]_γ` behind one interface.
//!
//! Six kinds share [`TernaryOp::apply`]:
//!
//! - `tensor_fusion`: `σ(W1(x⊗y⊗z) + W2(x⊗g_γ) + W3 z + b_γ)`, with `W1`
//!   dense or CP-factored.
//! - `attention_aggregation`: `α1 x + α2 y + α3 z` where
//!   `α = softmax(⟨u_γ,x⟩, ⟨u_γ,y⟩, ⟨u_γ,z⟩)`.
//! - `oracle_hadamard`: `x∘y∘z∘g_γ`, an exact ternary Γ-semiring product
//!   over coordinatewise `+`.
//! - `oracle_tropical`: `x+y+z+g_γ`, exact over coordinatewise `min`.
//! - `baseline_cascaded_binary`: `x ⊗ (y ⊗ z)` with one shared bilinear map.
//! - `baseline_trilinear_diag`: `Σ_i x_i y_i z_i`, a scalar (DistMult-style).
//!
//! Oracle context vectors are frozen; every other tensor is learnable.

use crate::autodiff::{NodeId, Nonlinearity, Tape};
use crate::error::{NtsError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const ENTITIES: &str = "entities";
pub const RELATIONS: &str = "relations";
pub const CTX_G: &str = "ctx.g";
pub const CTX_U: &str = "ctx.u";
pub const CTX_B: &str = "ctx.b";
pub const W1: &str = "w1";
pub const W1_CP_X: &str = "w1.cp.x";
pub const W1_CP_Y: &str = "w1.cp.y";
pub const W1_CP_Z: &str = "w1.cp.z";
pub const W1_CP_OUT: &str = "w1.cp.out";
pub const W2: &str = "w2";
pub const W3: &str = "w3";
pub const BILINEAR: &str = "bilinear";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    TensorFusion,
    AttentionAggregation,
    OracleHadamard,
    OracleTropical,
    BaselineCascadedBinary,
    BaselineTrilinearDiag,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::TensorFusion,
        OpKind::AttentionAggregation,
        OpKind::OracleHadamard,
        OpKind::OracleTropical,
        OpKind::BaselineCascadedBinary,
        OpKind::BaselineTrilinearDiag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::TensorFusion => "tensor_fusion",
            OpKind::AttentionAggregation => "attention_aggregation",
            OpKind::OracleHadamard => "oracle_hadamard",
            OpKind::OracleTropical => "oracle_tropical",
            OpKind::BaselineCascadedBinary => "baseline_cascaded_binary",
            OpKind::BaselineTrilinearDiag => "baseline_trilinear_diag",
        }
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, OpKind::OracleHadamard | OpKind::OracleTropical)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, OpKind::BaselineCascadedBinary | OpKind::BaselineTrilinearDiag)
    }
}

impl FromStr for OpKind {
    type Err = NtsError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| NtsError::Config(format!("unknown operator kind '{s}'")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The additive monoid an operator is distributive over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monoid {
    Sum,
    Min,
}

impl Monoid {
    pub fn combine(self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        match self {
            Monoid::Sum => tape.add(a, b),
            Monoid::Min => tape.min_elementwise(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TernaryOpSpec {
    pub kind: OpKind,
    pub dim: usize,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp_rank: Option<usize>,
}

fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::Tanh
}

impl TernaryOpSpec {
    pub fn new(kind: OpKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            nonlinearity: default_nonlinearity(),
            cp_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(NtsError::Config("op.dim must be at least 1".into()));
        }
        match self.cp_rank {
            Some(0) => Err(NtsError::Config("op.cp_rank must be positive".into())),
            Some(_) if self.kind != OpKind::TensorFusion => Err(NtsError::Config(
                "op.cp_rank only applies to tensor_fusion".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Named learnable tensors plus vocabulary sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelParams {
    /// Fresh parameters for `spec` over the given vocabularies.
    ///
    /// Contractions use `Uniform[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// embeddings use `Normal(0, 1/d)`.
    pub fn init<R: Rng + ?Sized>(
        spec: &TernaryOpSpec,
        num_entities: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init_with(spec, num_entities, num_relations, false, rng)
    }

    /// Like [`ModelParams::init`] for a vocabulary shared by entities and
    /// relations: relation `i` reuses the embedding of entity `i`.
    pub fn init_tied<R: Rng + ?Sized>(spec: &TernaryOpSpec, vocab_size: usize, rng: &mut R) -> Result<Self> {
        Self::init_with(spec, vocab_size, vocab_size, true, rng)
    }

    fn init_with<R: Rng + ?Sized>(
        spec: &TernaryOpSpec,
        num_entities: usize,
        num_relations: usize,
        tied: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(NtsError::Data("empty vocabulary".into()));
        }
        let d = spec.dim;
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut tensors = BTreeMap::new();
        tensors.insert(ENTITIES.to_string(), Tensor::normal(&[num_entities, d], emb_std, rng));
        if !tied {
            tensors.insert(RELATIONS.to_string(), Tensor::normal(&[num_relations, d], emb_std, rng));
        }
        match spec.kind {
            OpKind::TensorFusion => {
                match spec.cp_rank {
                    None => {
                        tensors.insert(W1.into(), Tensor::uniform(&[d, d, d, d], glorot(d * d * d, d), rng));
                    }
                    Some(r) => {
                        for name in [W1_CP_X, W1_CP_Y, W1_CP_Z] {
                            tensors.insert(name.into(), Tensor::uniform(&[r, d], glorot(d, r), rng));
                        }
                        tensors.insert(W1_CP_OUT.into(), Tensor::uniform(&[d, r], glorot(r, d), rng));
                    }
                }
                tensors.insert(W2.into(), Tensor::uniform(&[d, d, d], glorot(d * d, d), rng));
                tensors.insert(W3.into(), Tensor::uniform(&[d, d], glorot(d, d), rng));
                tensors.insert(CTX_G.into(), Tensor::normal(&[num_relations, d], emb_std, rng));
                tensors.insert(CTX_B.into(), Tensor::zeros(&[num_relations, d]));
            }
            OpKind::AttentionAggregation => {
                tensors.insert(CTX_U.into(), Tensor::normal(&[num_relations, d], emb_std, rng));
            }
            OpKind::OracleHadamard => {
                tensors.insert(CTX_G.into(), Tensor::full(&[num_relations, d], 1.0));
            }
            OpKind::OracleTropical => {
                tensors.insert(CTX_G.into(), Tensor::zeros(&[num_relations, d]));
            }
            OpKind::BaselineCascadedBinary => {
                tensors.insert(BILINEAR.into(), Tensor::uniform(&[d, d, d], glorot(d * d, d), rng));
            }
            OpKind::BaselineTrilinearDiag => {}
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| NtsError::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NtsError::Config(format!("missing parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn num_entities(&self) -> usize {
        self.tensors[ENTITIES].shape()[0]
    }

    pub fn num_relations(&self) -> usize {
        self.tensors.get(RELATIONS).unwrap_or(&self.tensors[ENTITIES]).shape()[0]
    }

    /// Whether relation embeddings are rows of the entity table.
    pub fn is_tied(&self) -> bool {
        !self.tensors.contains_key(RELATIONS)
    }

    pub fn dim(&self) -> usize {
        self.tensors[ENTITIES].shape()[1]
    }

    /// Total scalar parameter count.
    pub fn size(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Parameter tensors registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub ids: BTreeMap<String, NodeId>,
    num_entities: usize,
    num_relations: usize,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NtsError::Config(format!("parameter '{name}' not bound")))
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Rebuilds the binding from an id map produced elsewhere (gradient checks).
    pub fn from_ids(tape: &Tape, ids: BTreeMap<String, NodeId>) -> Result<Self> {
        let rows = |name: &str| -> Result<usize> {
            let id = ids
                .get(name)
                .ok_or_else(|| NtsError::Config(format!("parameter '{name}' not bound")))?;
            Ok(tape.value(*id).shape()[0])
        };
        Ok(Self {
            num_entities: rows(ENTITIES)?,
            num_relations: if ids.contains_key(RELATIONS) { rows(RELATIONS)? } else { rows(ENTITIES)? },
            ids,
        })
    }

    pub fn entity(&self, tape: &mut Tape, e: usize) -> Result<NodeId> {
        let table = self.id(ENTITIES)?;
        tape.row(table, e)
    }

    pub fn relation(&self, tape: &mut Tape, r: usize) -> Result<NodeId> {
        let table = match self.ids.get(RELATIONS) {
            Some(&id) => id,
            None => self.id(ENTITIES)?,
        };
        tape.row(table, r)
    }
}

/// A ternary operator instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryOp {
    pub spec: TernaryOpSpec,
}

impl TernaryOp {
    pub fn new(spec: TernaryOpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn kind(&self) -> OpKind {
        self.spec.kind
    }

    pub fn monoid(&self) -> Monoid {
        match self.spec.kind {
            OpKind::OracleTropical => Monoid::Min,
            _ => Monoid::Sum,
        }
    }

    /// Whether `apply` returns a score rather than an element of S.
    pub fn is_scalar_output(&self) -> bool {
        self.spec.kind == OpKind::BaselineTrilinearDiag
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.spec.kind.is_oracle() && name == CTX_G)
    }

    /// Registers parameters on `tape`: learnable ones as leaves, frozen ones
    /// as constants.
    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> BoundParams {
        let ids = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let id = if self.is_trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        BoundParams {
            ids,
            num_entities: params.num_entities(),
            num_relations: params.num_relations(),
        }
    }

    /// Registers every parameter as a constant, for evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape, params: &ModelParams) -> BoundParams {
        BoundParams {
            ids: params
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
                .collect(),
            num_entities: params.num_entities(),
            num_relations: params.num_relations(),
        }
    }

    fn check_relation(&self, p: &BoundParams, rel: usize) -> Result<()> {
        if rel >= p.num_relations {
            return Err(NtsError::Index(format!(
                "relation {rel} out of range for {} relations",
                p.num_relations
            )));
        }
        Ok(())
    }

    /// `[x, y, z]_rel` on the tape.
    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: NodeId, y: NodeId, z: NodeId, rel: usize) -> Result<NodeId> {
        self.check_relation(p, rel)?;
        match self.spec.kind {
            OpKind::TensorFusion => self.tensor_fusion(tape, p, x, y, z, rel),
            OpKind::AttentionAggregation => {
                let u = tape.row(p.id(CTX_U)?, rel)?;
                let lx = tape.dot(u, x)?;
                let ly = tape.dot(u, y)?;
                let lz = tape.dot(u, z)?;
                let logits = tape.stack(&[lx, ly, lz])?;
                let alpha = tape.softmax3(logits)?;
                tape.combine3(alpha, [x, y, z])
            }
            OpKind::OracleHadamard => {
                let g = tape.row(p.id(CTX_G)?, rel)?;
                let xy = tape.mul_elementwise(x, y)?;
                let xyz = tape.mul_elementwise(xy, z)?;
                tape.mul_elementwise(xyz, g)
            }
            OpKind::OracleTropical => {
                let g = tape.row(p.id(CTX_G)?, rel)?;
                let xy = tape.add(x, y)?;
                let xyz = tape.add(xy, z)?;
                tape.add(xyz, g)
            }
            OpKind::BaselineCascadedBinary => {
                let b = p.id(BILINEAR)?;
                let yz = tape.contract_bilinear(b, y, z)?;
                tape.contract_bilinear(b, x, yz)
            }
            OpKind::BaselineTrilinearDiag => {
                let xy = tape.mul_elementwise(x, y)?;
                let xyz = tape.mul_elementwise(xy, z)?;
                Ok(tape.sum(xyz))
            }
        }
    }

    fn tensor_fusion(&self, tape: &mut Tape, p: &BoundParams, x: NodeId, y: NodeId, z: NodeId, rel: usize) -> Result<NodeId> {
        let tri = trilinear_term(tape, p, self.spec.cp_rank.is_some(), x, y, z)?;
        let g = tape.row(p.id(CTX_G)?, rel)?;
        let ctx = tape.contract_bilinear(p.id(W2)?, x, g)?;
        let lin = tape.matvec(p.id(W3)?, z)?;
        let b = tape.row(p.id(CTX_B)?, rel)?;
        let s1 = tape.add(tri, ctx)?;
        let s2 = tape.add(s1, lin)?;
        let pre = tape.add(s2, b)?;
        Ok(tape.nonlinearity(pre, self.spec.nonlinearity))
    }
}

/// `W1(x⊗y⊗z)` for dense `W1`, or `Σ_r O[:,r]·⟨A_r,x⟩⟨B_r,y⟩⟨C_r,z⟩` in CP form.
fn trilinear_term(tape: &mut Tape, p: &BoundParams, cp: bool, x: NodeId, y: NodeId, z: NodeId) -> Result<NodeId> {
    if !cp {
        return tape.contract_trilinear(p.id(W1)?, x, y, z);
    }
    let a = tape.matvec(p.id(W1_CP_X)?, x)?;
    let b = tape.matvec(p.id(W1_CP_Y)?, y)?;
    let c = tape.matvec(p.id(W1_CP_Z)?, z)?;
    let ab = tape.mul_elementwise(a, b)?;
    let abc = tape.mul_elementwise(ab, c)?;
    tape.matvec(p.id(W1_CP_OUT)?, abc)
}

/// Dense `[d, d, d, d]` tensor equivalent to a set of CP factors.
pub fn cp_to_dense(params: &ModelParams) -> Result<Tensor> {
    let (fx, fy, fz, fo) = (
        params.get(W1_CP_X)?,
        params.get(W1_CP_Y)?,
        params.get(W1_CP_Z)?,
        params.get(W1_CP_OUT)?,
    );
    let (rank, d) = (fx.shape()[0], fx.shape()[1]);
    let d_out = fo.shape()[0];
    let mut out = vec![0.0; d_out * d * d * d];
    for o in 0..d_out {
        for r in 0..rank {
            let w = fo.data()[o * rank + r];
            for i in 0..d {
                let wi = w * fx.data()[r * d + i];
                for j in 0..d {
                    let wij = wi * fy.data()[r * d + j];
                    for k in 0..d {
                        out[((o * d + i) * d + j) * d + k] += wij * fz.data()[r * d + k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![d_out, d, d, d], out)
}
