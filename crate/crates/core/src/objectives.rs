//! Task losses, the composite objective, Adam and the early-stopped
//! training loop.

use crate::autodiff::{NodeId, Tape};
use crate::datasets::{Triple, TripleDataset};
use crate::error::{NtsError, Result};
use crate::evaluation::{evaluate_triples, MetricsReport};
use crate::ops::{BoundParams, ModelParams, TernaryOp, TernaryOpSpec};
use crate::regularizers::{regularizer_loss, ResidualSampleConfig};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    Nll,
    Margin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub margin: f64,
    pub num_negatives: usize,
    pub lambda_assoc: f64,
    pub lambda_dist: f64,
    pub task_loss: TaskLoss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 200,
            patience: 20,
            margin: 1.0,
            num_negatives: 4,
            lambda_assoc: 0.1,
            lambda_dist: 0.1,
            task_loss: TaskLoss::Nll,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NtsError::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad("train.betas must lie in (0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("train.eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("train.patience must be positive");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("train.margin must be positive");
        }
        if self.num_negatives == 0 {
            return bad("train.num_negatives must be positive");
        }
        if !(self.lambda_assoc >= 0.0 && self.lambda_dist >= 0.0) {
            return bad("train.lambda_assoc and train.lambda_dist must be non-negative");
        }
        Ok(())
    }
}

/// `s(h, r, t) = −‖[x_h, x_r, x_t]_r‖`, or the raw score for scalar operators.
pub fn score(tape: &mut Tape, op: &TernaryOp, p: &BoundParams, h: usize, r: usize, t: usize) -> Result<NodeId> {
    let xh = p.entity(tape, h)?;
    let xr = p.relation(tape, r)?;
    let xt = p.entity(tape, t)?;
    let z = op.apply(tape, p, xh, xr, xt, r)?;
    if op.is_scalar_output() {
        return Ok(z);
    }
    let norm = tape.l2_norm(z);
    Ok(tape.scale(norm, -1.0))
}

/// Mean of `−log softmax_{t′ ∈ candidates} s(h, r, t′)` at the true tail.
pub fn nll_loss(tape: &mut Tape, op: &TernaryOp, p: &BoundParams, batch: &[Triple], candidates: &[usize]) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(NtsError::Data("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for tr in batch {
        let target = candidates
            .iter()
            .position(|&c| c == tr.tail)
            .ok_or_else(|| NtsError::Data(format!("true tail {} is not a candidate", tr.tail)))?;
        let scores = candidates
            .iter()
            .map(|&c| score(tape, op, p, tr.head, tr.relation, c))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.stack(&scores)?;
        terms.push(tape.neg_log_softmax(logits, target)?);
    }
    tape.mean(&terms)
}

/// Mean hinge `max(0, margin − s(h,r,t) + s(h,r,t′))` over positives and
/// their corrupted tails. `negatives[i]` holds the corruptions of `batch[i]`.
pub fn margin_loss(
    tape: &mut Tape,
    op: &TernaryOp,
    p: &BoundParams,
    batch: &[Triple],
    negatives: &[Vec<usize>],
    margin: f64,
) -> Result<NodeId> {
    if batch.is_empty() || batch.len() != negatives.len() {
        return Err(NtsError::Data("margin loss needs one negative list per positive".into()));
    }
    let mut terms = Vec::new();
    for (tr, negs) in batch.iter().zip(negatives) {
        if negs.is_empty() {
            return Err(NtsError::Data("no negatives for a positive".into()));
        }
        let pos = score(tape, op, p, tr.head, tr.relation, tr.tail)?;
        for &n in negs {
            let neg = score(tape, op, p, tr.head, tr.relation, n)?;
            terms.push(hinge(tape, pos, neg, margin)?);
        }
    }
    tape.mean(&terms)
}

/// `max(0, margin − pos + neg)` for scalar score nodes.
pub fn hinge(tape: &mut Tape, pos: NodeId, neg: NodeId, margin: f64) -> Result<NodeId> {
    let gap = tape.sub(neg, pos)?;
    let shifted = tape.add_const(gap, margin);
    Ok(tape.nonlinearity(shifted, crate::autodiff::Nonlinearity::Relu))
}

/// Corrupted tails drawn uniformly from entities other than the true tail.
pub fn sample_negatives<R: Rng + ?Sized>(batch: &[Triple], num_entities: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if num_entities < 2 {
        return Err(NtsError::Data("cannot corrupt tails with a single entity".into()));
    }
    Ok(batch
        .iter()
        .map(|tr| {
            (0..k)
                .map(|_| {
                    let c = rng.random_range(0..num_entities - 1);
                    if c >= tr.tail {
                        c + 1
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect())
}

/// `task + λ_assoc·assoc + λ_dist·dist`. Zero-weighted terms are left off
/// the tape, so with both λ at zero the result is the task node itself.
pub fn composite_loss(
    tape: &mut Tape,
    task: NodeId,
    regs: Option<(NodeId, NodeId)>,
    lambda_assoc: f64,
    lambda_dist: f64,
) -> Result<NodeId> {
    let mut total = task;
    if let Some((assoc, dist)) = regs {
        if lambda_assoc != 0.0 {
            let a = tape.scale(assoc, lambda_assoc);
            total = tape.add(total, a)?;
        }
        if lambda_dist != 0.0 {
            let d = tape.scale(dist, lambda_dist);
            total = tape.add(total, d)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    [beta1, beta2]: [f64; 2],
    eps: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let theta = params.get_mut(name)?;
        if theta.shape() != g.shape() {
            return Err(NtsError::Shape(format!("gradient for '{name}' has shape {:?}", g.shape())));
        }
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        let (th, md, vd) = (theta.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            th[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub assoc_residual: Option<f64>,
    pub dist_residual: Option<f64>,
    pub valid_loss: f64,
    pub valid_mrr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint; 0 means the initialization.
    pub best_epoch: usize,
    pub best_valid_loss: Option<f64>,
}

fn step_seed(base: u64, epoch: usize, step: usize) -> u64 {
    base ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gradient of `loss` for every learnable parameter.
pub fn leaf_grads(tape: &Tape, op: &TernaryOp, p: &BoundParams, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(p.ids
        .iter()
        .filter(|(name, _)| op.is_trainable(name))
        .map(|(name, &id)| (name.clone(), grads.get(id)))
        .collect())
}

/// Task loss value over `triples` with parameters frozen.
pub fn evaluate_task_loss(
    op: &TernaryOp,
    params: &ModelParams,
    triples: &[Triple],
    cfg: &TrainConfig,
    negatives_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = op.bind_frozen(&mut tape, params);
    let loss = match cfg.task_loss {
        TaskLoss::Nll => {
            let candidates: Vec<usize> = (0..params.num_entities()).collect();
            nll_loss(&mut tape, op, &p, triples, &candidates)?
        }
        TaskLoss::Margin => {
            let mut rng = ChaCha8Rng::seed_from_u64(negatives_seed);
            let negs = sample_negatives(triples, params.num_entities(), cfg.num_negatives, &mut rng)?;
            margin_loss(&mut tape, op, &p, triples, &negs, cfg.margin)?
        }
    };
    Ok(tape.value(loss).item())
}

/// Adam training with early stopping on the validation task loss. Returns
/// the best-validation parameters and one log record per completed epoch.
pub fn train(
    dataset: &TripleDataset,
    spec: &TernaryOpSpec,
    cfg: &TrainConfig,
    reg: &ResidualSampleConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    reg.validate()?;
    if dataset.train.is_empty() || dataset.valid.is_empty() {
        return Err(NtsError::Data("training needs non-empty train and valid splits".into()));
    }
    let op = TernaryOp::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = if dataset.shares_vocabulary() {
        ModelParams::init_tied(spec, dataset.entities.len(), &mut rng)?
    } else {
        ModelParams::init(spec, dataset.entities.len(), dataset.relations.len(), &mut rng)?
    };
    let mut state = AdamState::new(&params);
    let candidates: Vec<usize> = (0..dataset.entities.len()).collect();
    let regularized = !op.is_scalar_output();
    // baselines are trained without algebraic pressure
    let (lambda_assoc, lambda_dist) = if spec.kind.is_baseline() {
        (0.0, 0.0)
    } else {
        (cfg.lambda_assoc, cfg.lambda_dist)
    };
    let valid_seed = cfg.seed ^ 0x76_616c_6964;

    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut order = dataset.train.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut assoc_sum, mut dist_sum, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let p = op.bind(&mut tape, &params);
            let task = match cfg.task_loss {
                TaskLoss::Nll => nll_loss(&mut tape, &op, &p, batch, &candidates)?,
                TaskLoss::Margin => {
                    let negs = sample_negatives(batch, dataset.entities.len(), cfg.num_negatives, &mut rng)?;
                    margin_loss(&mut tape, &op, &p, batch, &negs, cfg.margin)?
                }
            };
            let regs = if regularized {
                let step_cfg = ResidualSampleConfig {
                    seed: step_seed(reg.seed, epoch, step),
                    ..reg.clone()
                };
                let r = regularizer_loss(&mut tape, &op, &p, batch, &step_cfg)?;
                Some((r.assoc, r.dist))
            } else {
                None
            };
            let loss = composite_loss(&mut tape, task, regs, lambda_assoc, lambda_dist)?;
            let grads = leaf_grads(&tape, &op, &p, loss)?;
            adam_step(&mut params, &grads, &mut state, cfg.lr, cfg.betas, cfg.eps)?;

            let w = batch.len() as f64;
            weight += w;
            task_sum += w * tape.value(task).item();
            if let Some((a, d)) = regs {
                assoc_sum += w * tape.value(a).item();
                dist_sum += w * tape.value(d).item();
            }
        }
        if !params.all_finite() {
            return Err(NtsError::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        let valid_loss = evaluate_task_loss(&op, &params, &dataset.valid, cfg, valid_seed)?;
        let valid_metrics: MetricsReport = evaluate_triples(&op, &params, dataset, &dataset.valid)?;
        log.push(EpochRecord {
            epoch,
            task_loss: task_sum / weight,
            assoc_residual: regularized.then_some(assoc_sum / weight),
            dist_residual: regularized.then_some(dist_sum / weight),
            valid_loss,
            valid_mrr: valid_metrics.mrr,
        });
        match stopper.observe(epoch, valid_loss) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let best_valid_loss = (stopper.best_epoch() > 0).then(|| stopper.best());
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch: stopper.best_epoch(),
        best_valid_loss,
    })
}
