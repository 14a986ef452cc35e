//! Monte-Carlo estimates of how far an operator is from the ternary
//! Γ-semiring axioms.
//!
//! Both residuals are squared Euclidean norms built on the tape, so they
//! can be added to a training loss:
//!
//! - associativity: `‖[x,y,[u,v,w]_γ]_δ − [[x,y,u]_γ,v,w]_δ‖²`
//! - distributivity in slot 1: `‖[x⊕y,u,v]_γ − ([x,u,v]_γ ⊕ [y,u,v]_γ)‖²`,
//!   and likewise for slots 2 and 3,
//!
//! where `⊕` is the operator's monoid (`+`, or `min` for the tropical oracle).

use crate::autodiff::{NodeId, Tape};
use crate::datasets::Triple;
use crate::error::{NtsError, Result};
use crate::ops::{BoundParams, TernaryOp};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    MinibatchEmbeddings,
    Gaussian,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSampleConfig {
    #[serde(default = "defaults::num_samples")]
    pub num_samples: usize,
    #[serde(default = "defaults::source")]
    pub source: SampleSource,
    #[serde(default = "defaults::gaussian_scale")]
    pub gaussian_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::SampleSource;
    pub fn num_samples() -> usize {
        16
    }
    pub fn source() -> SampleSource {
        SampleSource::Mixed
    }
    pub fn gaussian_scale() -> f64 {
        0.25
    }
}

impl Default for ResidualSampleConfig {
    fn default() -> Self {
        Self {
            num_samples: defaults::num_samples(),
            source: defaults::source(),
            gaussian_scale: defaults::gaussian_scale(),
            seed: 0,
        }
    }
}

impl ResidualSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(NtsError::Config("reg.num_samples must be at least 1".into()));
        }
        if !(self.gaussian_scale > 0.0 && self.gaussian_scale.is_finite()) {
            return Err(NtsError::Config("reg.gaussian_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Which argument of the operator is split in a distributivity residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Slot {
    First,
    Second,
    Third,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::First, Slot::Second, Slot::Third];

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            1 => Ok(Slot::First),
            2 => Ok(Slot::Second),
            3 => Ok(Slot::Third),
            other => Err(NtsError::Config(format!("distributivity slot must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Slot::First => 1,
            Slot::Second => 2,
            Slot::Third => 3,
        }
    }
}

fn nestable(op: &TernaryOp) -> Result<()> {
    if op.is_scalar_output() {
        return Err(NtsError::Config(format!(
            "{} returns a score, so axiom residuals are undefined",
            op.kind()
        )));
    }
    Ok(())
}

/// Squared left-nested associativity gap for one sample.
#[allow(clippy::too_many_arguments)]
pub fn assoc_residual(
    tape: &mut Tape,
    op: &TernaryOp,
    p: &BoundParams,
    [x, y, u, v, w]: [NodeId; 5],
    gamma: usize,
    delta: usize,
) -> Result<NodeId> {
    nestable(op)?;
    let inner = op.apply(tape, p, u, v, w, gamma)?;
    let lhs = op.apply(tape, p, x, y, inner, delta)?;
    let inner = op.apply(tape, p, x, y, u, gamma)?;
    let rhs = op.apply(tape, p, inner, v, w, delta)?;
    let diff = tape.sub(lhs, rhs)?;
    Ok(tape.sq_l2_norm(diff))
}

/// Squared distributivity gap when `x ⊕ y` sits in `slot` and `u, v` fill
/// the other two arguments in order.
pub fn dist_residual(
    tape: &mut Tape,
    op: &TernaryOp,
    p: &BoundParams,
    slot: Slot,
    [x, y, u, v]: [NodeId; 4],
    gamma: usize,
) -> Result<NodeId> {
    nestable(op)?;
    let monoid = op.monoid();
    let place = |a: NodeId| match slot {
        Slot::First => (a, u, v),
        Slot::Second => (u, a, v),
        Slot::Third => (u, v, a),
    };
    let joined = monoid.combine(tape, x, y)?;
    let (a, b, c) = place(joined);
    let lhs = op.apply(tape, p, a, b, c, gamma)?;
    let (a, b, c) = place(x);
    let rx = op.apply(tape, p, a, b, c, gamma)?;
    let (a, b, c) = place(y);
    let ry = op.apply(tape, p, a, b, c, gamma)?;
    let rhs = monoid.combine(tape, rx, ry)?;
    let diff = tape.sub(lhs, rhs)?;
    Ok(tape.sq_l2_norm(diff))
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizerLosses {
    pub assoc: NodeId,
    pub dist: NodeId,
}

/// Draws operands for the residual estimators.
pub struct OperandSampler {
    rng: ChaCha8Rng,
    source: SampleSource,
    scale: f64,
    pool: Vec<usize>,
    dim: usize,
    num_relations: usize,
}

impl OperandSampler {
    pub fn new(cfg: &ResidualSampleConfig, batch: &[Triple], p: &BoundParams, dim: usize) -> Result<Self> {
        cfg.validate()?;
        if batch.is_empty() {
            return Err(NtsError::Data("regularizer needs a non-empty batch".into()));
        }
        let pool: BTreeSet<usize> = batch.iter().flat_map(|t| [t.head, t.tail]).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            source: cfg.source,
            scale: cfg.gaussian_scale,
            pool: pool.into_iter().collect(),
            dim,
            num_relations: p.num_relations(),
        })
    }

    /// `N` operands for sample number `sample`; mixed sampling uses batch
    /// embeddings for even samples and Gaussian noise for odd ones.
    pub fn operands<const N: usize>(&mut self, tape: &mut Tape, p: &BoundParams, sample: usize) -> Result<[NodeId; N]> {
        let use_batch = match self.source {
            SampleSource::MinibatchEmbeddings => true,
            SampleSource::Gaussian => false,
            SampleSource::Mixed => sample.is_multiple_of(2),
        };
        let mut out = Vec::with_capacity(N);
        for _ in 0..N {
            out.push(if use_batch {
                let e = self.pool[self.rng.random_range(0..self.pool.len())];
                p.entity(tape, e)?
            } else {
                tape.constant(Tensor::normal(&[self.dim], self.scale, &mut self.rng))
            });
        }
        Ok(out.try_into().expect("exactly N operands"))
    }

    pub fn relation(&mut self) -> usize {
        self.rng.random_range(0..self.num_relations)
    }

    pub fn slot(&mut self) -> Slot {
        Slot::ALL[self.rng.random_range(0..3)]
    }
}

/// Mean associativity and distributivity residuals over `cfg.num_samples`
/// samples each. Each distributivity sample picks its slot uniformly.
pub fn regularizer_loss(
    tape: &mut Tape,
    op: &TernaryOp,
    p: &BoundParams,
    batch: &[Triple],
    cfg: &ResidualSampleConfig,
) -> Result<RegularizerLosses> {
    nestable(op)?;
    let dim = op.spec.dim;
    let mut sampler = OperandSampler::new(cfg, batch, p, dim)?;
    let mut assoc = Vec::with_capacity(cfg.num_samples);
    let mut dist = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let xs = sampler.operands::<5>(tape, p, i)?;
        let (gamma, delta) = (sampler.relation(), sampler.relation());
        assoc.push(assoc_residual(tape, op, p, xs, gamma, delta)?);

        let ys = sampler.operands::<4>(tape, p, i)?;
        let slot = sampler.slot();
        let gamma = sampler.relation();
        dist.push(dist_residual(tape, op, p, slot, ys, gamma)?);
    }
    Ok(RegularizerLosses {
        assoc: tape.mean(&assoc)?,
        dist: tape.mean(&dist)?,
    })
}
