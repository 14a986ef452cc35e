//! Filtered tail ranking, MRR / Hits@k, rule satisfaction and axiom
//! residual reporting.

use crate::autodiff::Tape;
use crate::datasets::{Triple, TripleDataset};
use crate::error::{NtsError, Result};
use crate::objectives::score;
use crate::ops::{ModelParams, TernaryOp};
use crate::regularizers::{assoc_residual, dist_residual, OperandSampler, ResidualSampleConfig, Slot};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const HITS_AT: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankResult {
    /// Tie-averaged rank, `1 ≤ rank ≤ candidates`.
    pub rank: f64,
    /// Candidates left after filtering, the true tail included.
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub rule_satisfaction: Option<f64>,
    pub assoc_residual_mean: Option<f64>,
    pub dist_residual_mean: Option<f64>,
}

impl MetricsReport {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits[&k]
    }
}

/// Scores of `(h, r, t′)` for every entity `t′`.
pub fn tail_scores(op: &TernaryOp, params: &ModelParams, h: usize, r: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = op.bind_frozen(&mut tape, params);
    (0..params.num_entities())
        .map(|t| {
            let s = score(&mut tape, op, &p, h, r, t)?;
            Ok(tape.value(s).item())
        })
        .collect()
}

/// `1 + #{higher} + #{equal}/2` over candidates that are not filtered out,
/// where the true candidate itself is never filtered or counted.
pub fn filtered_rank(scores: &[f64], true_t: usize, filtered: impl Fn(usize) -> bool) -> RankResult {
    let target = scores[true_t];
    let (mut higher, mut equal, mut candidates) = (0usize, 0usize, 1usize);
    for (t, &s) in scores.iter().enumerate() {
        if t == true_t || filtered(t) {
            continue;
        }
        candidates += 1;
        if s > target {
            higher += 1;
        } else if s == target {
            equal += 1;
        }
    }
    RankResult {
        rank: 1.0 + higher as f64 + equal as f64 / 2.0,
        candidates,
    }
}

/// Filtered, tie-averaged rank of `true_t` among all tails for `(h, r, ·)`.
pub fn rank_tail(op: &TernaryOp, params: &ModelParams, h: usize, r: usize, true_t: usize, ds: &TripleDataset) -> Result<RankResult> {
    if params.num_entities() != ds.entities.len() {
        return Err(NtsError::Data(format!(
            "model has {} entities but the dataset has {}",
            params.num_entities(),
            ds.entities.len()
        )));
    }
    if h >= params.num_entities() || true_t >= params.num_entities() {
        return Err(NtsError::Index(format!("entity id out of range in ({h}, {r}, {true_t})")));
    }
    let scores = tail_scores(op, params, h, r)?;
    Ok(filtered_rank(&scores, true_t, |t| ds.all_true.contains(&Triple::new(h, r, t))))
}

pub fn compute_metrics(ranks: &[RankResult]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(NtsError::Data("no ranks to aggregate".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| 1.0 / r.rank).sum::<f64>() / n;
    let hits = HITS_AT
        .iter()
        .map(|&k| {
            let hit = ranks.iter().filter(|r| r.rank <= k as f64).count() as f64;
            (k, hit / n)
        })
        .collect();
    Ok(MetricsReport {
        mrr,
        hits,
        num_queries: ranks.len(),
        rule_satisfaction: None,
        assoc_residual_mean: None,
        dist_residual_mean: None,
    })
}

pub fn evaluate_triples(op: &TernaryOp, params: &ModelParams, ds: &TripleDataset, triples: &[Triple]) -> Result<MetricsReport> {
    let ranks = triples
        .iter()
        .map(|t| rank_tail(op, params, t.head, t.relation, t.tail, ds))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&ranks)
}

pub fn triple_scores(op: &TernaryOp, params: &ModelParams, triples: &[Triple]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = op.bind_frozen(&mut tape, params);
    triples
        .iter()
        .map(|t| {
            let s = score(&mut tape, op, &p, t.head, t.relation, t.tail)?;
            Ok(tape.value(s).item())
        })
        .collect()
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(NtsError::Data("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Rule threshold: median score of the given positives.
pub fn calibrate_threshold(op: &TernaryOp, params: &ModelParams, positives: &[Triple]) -> Result<f64> {
    median(&triple_scores(op, params, positives)?)
}

/// Fraction of scores at or above `tau`.
pub fn satisfaction_rate(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(NtsError::Data("no rules to check".into()));
    }
    Ok(scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64)
}

/// Fraction of rules `(A, B, C)` with `s(A, B, C) ≥ tau`.
pub fn rule_satisfaction(op: &TernaryOp, params: &ModelParams, rules: &[Triple], tau: f64) -> Result<f64> {
    if rules.is_empty() {
        return Err(NtsError::Data("no rules to check".into()));
    }
    satisfaction_rate(&triple_scores(op, params, rules)?, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub operator: String,
    pub num_samples: usize,
    pub seed: u64,
    pub assoc_residual_mean: f64,
    pub dist_residual_mean: f64,
    /// Distributivity means for slots 1, 2, 3.
    pub dist_residual_per_slot: [f64; 3],
    pub assoc_residual_max: f64,
    pub dist_residual_max: f64,
}

/// Seed offset separating report samples from training samples.
pub const REPORT_SEED_OFFSET: u64 = 0xA710_5EED;

/// Residual means over `10 × cfg.num_samples` fresh samples. Every
/// distributivity sample is evaluated in all three slots.
pub fn axiom_report(op: &TernaryOp, params: &ModelParams, cfg: &ResidualSampleConfig, pool: &[Triple]) -> Result<AxiomReport> {
    let n = cfg.num_samples * 10;
    let report_cfg = ResidualSampleConfig {
        num_samples: n,
        seed: cfg.seed.wrapping_add(REPORT_SEED_OFFSET),
        ..cfg.clone()
    };
    residual_summary(op, params, &report_cfg, pool)
}

/// Residual statistics over exactly `cfg.num_samples` samples drawn with `cfg.seed`.
pub fn residual_summary(op: &TernaryOp, params: &ModelParams, cfg: &ResidualSampleConfig, pool: &[Triple]) -> Result<AxiomReport> {
    let mut assoc = Vec::with_capacity(cfg.num_samples);
    let mut per_slot = [0.0; 3];
    let mut dist_max = 0.0f64;
    let mut tape = Tape::new();
    let p = op.bind_frozen(&mut tape, params);
    let mut sampler = OperandSampler::new(cfg, pool, &p, op.spec.dim)?;
    for i in 0..cfg.num_samples {
        let xs = sampler.operands::<5>(&mut tape, &p, i)?;
        let (g, d) = (sampler.relation(), sampler.relation());
        let a = assoc_residual(&mut tape, op, &p, xs, g, d)?;
        assoc.push(tape.value(a).item());

        let ys = sampler.operands::<4>(&mut tape, &p, i)?;
        let g = sampler.relation();
        for slot in Slot::ALL {
            let r = dist_residual(&mut tape, op, &p, slot, ys, g)?;
            let v = tape.value(r).item();
            per_slot[slot.index() - 1] += v;
            dist_max = dist_max.max(v);
        }
    }
    let n = cfg.num_samples as f64;
    let per_slot = per_slot.map(|s| s / n);
    Ok(AxiomReport {
        operator: op.kind().to_string(),
        num_samples: cfg.num_samples,
        seed: cfg.seed,
        assoc_residual_mean: assoc.iter().sum::<f64>() / n,
        dist_residual_mean: per_slot.iter().sum::<f64>() / 3.0,
        dist_residual_per_slot: per_slot,
        assoc_residual_max: assoc.iter().copied().fold(0.0, f64::max),
        dist_residual_max: dist_max,
    })
}

/// Final residuals of one training run in a λ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub lambda: f64,
    pub seed: u64,
    pub assoc_residual: f64,
    pub dist_residual: f64,
    pub test_hits1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub runs: usize,
    pub median_assoc_residual: f64,
    pub median_dist_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub pass: bool,
    pub assoc_non_increasing: bool,
    pub dist_non_increasing: bool,
    /// Largest-λ median over smallest-λ median.
    pub assoc_ratio: f64,
    pub dist_ratio: f64,
    pub table: Vec<SweepRow>,
}

/// Passes iff the median final residuals are non-increasing in λ, for both
/// associativity and distributivity. Every λ needs the same number of runs.
pub fn lambda_sweep_trend(runs: &[SweepRun]) -> Result<TrendVerdict> {
    let mut groups: Vec<(f64, Vec<&SweepRun>)> = Vec::new();
    let mut sorted: Vec<&SweepRun> = runs.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    for run in sorted {
        match groups.last_mut() {
            Some((l, g)) if *l == run.lambda => g.push(run),
            _ => groups.push((run.lambda, vec![run])),
        }
    }
    if groups.len() < 2 {
        return Err(NtsError::Data("a λ sweep needs at least two λ values".into()));
    }
    let per_lambda = groups[0].1.len();
    if groups.iter().any(|(_, g)| g.len() != per_lambda) {
        return Err(NtsError::Data("λ sweep has missing runs".into()));
    }
    let table = groups
        .iter()
        .map(|(lambda, g)| {
            Ok(SweepRow {
                lambda: *lambda,
                runs: g.len(),
                median_assoc_residual: median(&g.iter().map(|r| r.assoc_residual).collect::<Vec<_>>())?,
                median_dist_residual: median(&g.iter().map(|r| r.dist_residual).collect::<Vec<_>>())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let non_increasing = |f: fn(&SweepRow) -> f64| table.windows(2).all(|w| f(&w[1]) <= f(&w[0]));
    let assoc_ok = non_increasing(|r| r.median_assoc_residual);
    let dist_ok = non_increasing(|r| r.median_dist_residual);
    let (first, last) = (&table[0], &table[table.len() - 1]);
    Ok(TrendVerdict {
        pass: assoc_ok && dist_ok,
        assoc_non_increasing: assoc_ok,
        dist_non_increasing: dist_ok,
        assoc_ratio: last.median_assoc_residual / first.median_assoc_residual,
        dist_ratio: last.median_dist_residual / first.median_dist_residual,
        table,
    })
}
