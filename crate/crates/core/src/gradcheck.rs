//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the loss on a fresh tape for every perturbed
//! coordinate, so it only relies on forward values. It compares
//! `(f(p+h) - f(p-h)) / 2h` against the analytic adjoint with relative error
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use crate::autodiff::{bind_leaves, AdjointFault, NodeId, Tape};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per tensor, chosen at random.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Fault injected into the analytic pass only.
    pub fault: Option<AdjointFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub coords_checked: usize,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks `f`, which builds a scalar loss from parameter nodes bound on the
/// supplied tape.
pub fn grad_check<F>(f: F, params: &BTreeMap<String, Tensor>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let mut tape = Tape::with_fault(opts.fault);
    let ids = bind_leaves(&mut tape, params);
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = bind_leaves(&mut tape, p);
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        coords_checked: 0,
        worst: None,
    };
    for (name, tensor) in params {
        let analytic = grads.get(ids[name]);
        let n = tensor.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = tensor.data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic.data()[idx], numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.pass = report.max_rel_error < opts.tol;
    Ok(report)
}
