//! Composite checks built from the other modules: the gradient-check suite
//! over every operator and loss, and the λ sweep.

use crate::autodiff::{AdjointFault, NodeId, Nonlinearity, Tape};
use crate::datasets::{Triple, TripleDataset};
use crate::error::{NtsError, Result};
use crate::evaluation::{evaluate_triples, lambda_sweep_trend, SweepRun, TrendVerdict};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::objectives::{composite_loss, margin_loss, nll_loss, sample_negatives, train, TrainConfig};
use crate::ops::{BoundParams, ModelParams, OpKind, TernaryOp, TernaryOpSpec, CTX_B};
use crate::regularizers::{regularizer_loss, ResidualSampleConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// What a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// `⟨c, [x_h, x_r, x_t]_r⟩` for a fixed random `c`.
    Operator(OpKind, Nonlinearity, bool),
    Nll,
    Margin,
    Assoc,
    Dist,
    Composite,
}

impl GradTarget {
    pub fn all() -> Vec<GradTarget> {
        use OpKind::*;
        let mut out: Vec<GradTarget> = [Nonlinearity::Identity, Nonlinearity::Tanh, Nonlinearity::Relu]
            .into_iter()
            .map(|nl| GradTarget::Operator(TensorFusion, nl, false))
            .collect();
        out.push(GradTarget::Operator(TensorFusion, Nonlinearity::Tanh, true));
        for kind in [AttentionAggregation, BaselineCascadedBinary, BaselineTrilinearDiag] {
            out.push(GradTarget::Operator(kind, Nonlinearity::Tanh, false));
        }
        out.extend([GradTarget::Nll, GradTarget::Margin, GradTarget::Assoc, GradTarget::Dist, GradTarget::Composite]);
        out
    }

    pub fn name(&self) -> String {
        match self {
            GradTarget::Operator(OpKind::TensorFusion, nl, cp) => {
                format!("op/tensor_fusion_{nl}{}", if *cp { "_cp" } else { "" })
            }
            GradTarget::Operator(kind, _, _) => format!("op/{kind}"),
            GradTarget::Nll => "loss/nll".into(),
            GradTarget::Margin => "loss/margin".into(),
            GradTarget::Assoc => "loss/assoc".into(),
            GradTarget::Dist => "loss/dist".into(),
            GradTarget::Composite => "loss/composite".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradSuiteOptions {
    pub configs_per_target: usize,
    pub dims: Vec<usize>,
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
    pub fault: Option<AdjointFault>,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        Self {
            configs_per_target: 50,
            dims: vec![2, 8],
            max_coords_per_tensor: 12,
            seed: 0,
            step: 1e-5,
            tol: 1e-4,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSummary {
    pub max_rel_error: f64,
    pub pass: bool,
    pub configs: usize,
    pub coords_checked: usize,
    /// Seed and dimension of the worst configuration.
    pub worst_seed: u64,
    pub worst_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSuiteReport {
    pub pass: bool,
    pub step: f64,
    pub tol: f64,
    pub targets: BTreeMap<String, TargetSummary>,
}

const SUITE_ENTITIES: usize = 5;
const SUITE_RELATIONS: usize = 2;

fn random_triples(rng: &mut ChaCha8Rng, n: usize) -> Vec<Triple> {
    (0..n)
        .map(|_| {
            Triple::new(
                rng.random_range(0..SUITE_ENTITIES),
                rng.random_range(0..SUITE_RELATIONS),
                rng.random_range(0..SUITE_ENTITIES),
            )
        })
        .collect()
}

/// Runs one gradient check of `target` at dimension `d`.
pub fn check_target(target: GradTarget, d: usize, seed: u64, opts: &GradSuiteOptions) -> Result<crate::gradcheck::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = match target {
        GradTarget::Operator(kind, nl, cp) => TernaryOpSpec {
            nonlinearity: nl,
            cp_rank: cp.then_some(d),
            ..TernaryOpSpec::new(kind, d)
        },
        // alternate the operator underneath the losses
        _ if seed.is_multiple_of(2) => TernaryOpSpec::new(OpKind::TensorFusion, d),
        _ => TernaryOpSpec::new(OpKind::AttentionAggregation, d),
    };
    let op = TernaryOp::new(spec.clone())?;
    let mut params = ModelParams::init(&spec, SUITE_ENTITIES, SUITE_RELATIONS, &mut rng)?;
    if params.tensors.contains_key(CTX_B) {
        params.set(CTX_B, Tensor::normal(&[SUITE_RELATIONS, d], 0.3, &mut rng));
    }
    let batch = random_triples(&mut rng, 3);
    let probe = Tensor::normal(&[d], 1.0, &mut rng);
    let negatives = sample_negatives(&batch, SUITE_ENTITIES, 2, &mut rng)?;
    let reg = ResidualSampleConfig {
        num_samples: 2,
        seed: rng.random(),
        ..Default::default()
    };
    let candidates: Vec<usize> = (0..SUITE_ENTITIES).collect();

    let f = |tape: &mut Tape, ids: &BTreeMap<String, NodeId>| -> Result<NodeId> {
        let p = BoundParams::from_ids(tape, ids.clone())?;
        match target {
            GradTarget::Operator(..) => {
                let t = batch[0];
                let x = p.entity(tape, t.head)?;
                let y = p.relation(tape, t.relation)?;
                let z = p.entity(tape, t.tail)?;
                let out = op.apply(tape, &p, x, y, z, t.relation)?;
                if op.is_scalar_output() {
                    return Ok(out);
                }
                let c = tape.constant(probe.clone());
                tape.dot(c, out)
            }
            GradTarget::Nll => nll_loss(tape, &op, &p, &batch, &candidates),
            GradTarget::Margin => margin_loss(tape, &op, &p, &batch, &negatives, 1.0),
            GradTarget::Assoc => Ok(regularizer_loss(tape, &op, &p, &batch, &reg)?.assoc),
            GradTarget::Dist => Ok(regularizer_loss(tape, &op, &p, &batch, &reg)?.dist),
            GradTarget::Composite => {
                let task = nll_loss(tape, &op, &p, &batch, &candidates)?;
                let r = regularizer_loss(tape, &op, &p, &batch, &reg)?;
                composite_loss(tape, task, Some((r.assoc, r.dist)), 0.5, 0.5)
            }
        }
    };
    let gc = GradCheckOptions {
        step: opts.step,
        tol: opts.tol,
        max_coords_per_tensor: Some(opts.max_coords_per_tensor),
        seed,
        fault: opts.fault,
    };
    grad_check(f, &params.tensors, &gc)
}

/// Checks every target over `configs_per_target` seeded configurations,
/// cycling through `dims`.
pub fn gradient_suite(opts: &GradSuiteOptions) -> Result<GradSuiteReport> {
    if opts.dims.is_empty() || opts.configs_per_target == 0 {
        return Err(NtsError::Config("gradient suite needs dims and at least one config".into()));
    }
    let mut targets = BTreeMap::new();
    for target in GradTarget::all() {
        let mut summary = TargetSummary {
            max_rel_error: 0.0,
            pass: true,
            configs: 0,
            coords_checked: 0,
            worst_seed: 0,
            worst_dim: 0,
        };
        for c in 0..opts.configs_per_target {
            let d = opts.dims[c % opts.dims.len()];
            let seed = opts.seed.wrapping_add(c as u64);
            let r = check_target(target, d, seed, opts)?;
            summary.configs += 1;
            summary.coords_checked += r.coords_checked;
            if summary.configs == 1 || r.max_rel_error > summary.max_rel_error {
                summary.max_rel_error = r.max_rel_error;
                summary.worst_seed = seed;
                summary.worst_dim = d;
            }
        }
        summary.pass = summary.max_rel_error < opts.tol;
        targets.insert(target.name(), summary);
    }
    Ok(GradSuiteReport {
        pass: targets.values().all(|t| t.pass),
        step: opts.step,
        tol: opts.tol,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub verdict: TrendVerdict,
}

pub const SWEEP_LAMBDAS: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

/// Trains one model per `(λ, seed)` with `λ_assoc = λ_dist = λ` and judges
/// the trend of the residuals logged in each run's last epoch.
pub fn lambda_sweep(
    dataset: &TripleDataset,
    spec: &TernaryOpSpec,
    base: &TrainConfig,
    reg: &ResidualSampleConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<SweepOutcome> {
    let op = TernaryOp::new(spec.clone())?;
    if op.is_scalar_output() {
        return Err(NtsError::Config(format!("{} has no residuals to sweep", spec.kind)));
    }
    let mut runs = Vec::with_capacity(lambdas.len() * seeds.len());
    for &lambda in lambdas {
        for &seed in seeds {
            let cfg = TrainConfig {
                lambda_assoc: lambda,
                lambda_dist: lambda,
                seed,
                ..base.clone()
            };
            let out = train(dataset, spec, &cfg, reg)?;
            let last = out
                .log
                .last()
                .ok_or_else(|| NtsError::Data("sweep run trained no epochs".into()))?;
            let test_hits1 = if dataset.test.is_empty() {
                None
            } else {
                Some(evaluate_triples(&op, &out.params, dataset, &dataset.test)?.hits_at(1))
            };
            runs.push(SweepRun {
                lambda,
                seed,
                assoc_residual: last.assoc_residual.unwrap_or(0.0),
                dist_residual: last.dist_residual.unwrap_or(0.0),
                test_hits1,
            });
        }
    }
    let verdict = lambda_sweep_trend(&runs)?;
    Ok(SweepOutcome { runs, verdict })
}
