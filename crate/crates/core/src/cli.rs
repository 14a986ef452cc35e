//! The `nts` command line.

use crate::autodiff::AdjointFault;
use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::datasets::{load_rules, load_tsv, save_rules, save_tsv, RuleSet, Split, Triple, TripleDataset};
use crate::error::{NtsError, Result};
use crate::evaluation::{axiom_report, calibrate_threshold, evaluate_triples, rule_satisfaction, AxiomReport, MetricsReport};
use crate::harness::{gradient_suite, lambda_sweep, GradSuiteOptions, SWEEP_LAMBDAS};
use crate::objectives::{train, TrainOutcome};
use crate::ops::{ModelParams, TernaryOp};
use crate::regularizers::ResidualSampleConfig;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "nts", version, about = "Neural ternary semiring toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Parity,
    Rules,
    ToyKg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory of TSV splits.
    GenData {
        #[arg(value_enum)]
        generator: Generator,
        /// Parity modulus.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Parity positives kept per relation (default: all).
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long, default_value_t = 8)]
        n_atoms: usize,
        #[arg(long, default_value_t = 12)]
        n_rules: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed and reg.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a TSV dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every operator and loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Flip the sign of one adjoint to show the check catches it.
        #[arg(long)]
        inject_bug: bool,
        #[arg(long, default_value_t = 50)]
        configs: usize,
    },
    /// Report axiom residuals of a trained model, or sweep λ.
    AxiomCheck {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train λ ∈ {0, 0.01, 0.1, 1} over several seeds and judge the trend.
        #[arg(long, requires = "config")]
        sweep: bool,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Runs one command, writing its primary output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData {
            generator,
            k,
            n_per_class,
            n_atoms,
            n_rules,
            seed,
            out,
        } => {
            let data = match generator {
                Generator::Parity => DataConfig::Parity { k, n_per_class, seed },
                Generator::Rules => DataConfig::Rules { n_atoms, n_rules, seed },
                Generator::ToyKg => DataConfig::ToyKg { seed },
            };
            let manifest = gen_data(&data, &out)?;
            emit(stdout, &manifest)
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let out = out.or_else(|| cfg.out.clone()).ok_or_else(|| {
                NtsError::Config("no output directory: pass --out or set `out` in the config".into())
            })?;
            let metrics = train_run(&cfg, &out)?;
            emit(stdout, &metrics)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let metrics = eval_checkpoint(&checkpoint, &dataset, Split::parse(&split)?)?;
            emit(stdout, &metrics)
        }
        Command::Gradcheck {
            config,
            inject_bug,
            configs,
        } => {
            let mut opts = GradSuiteOptions {
                configs_per_target: configs,
                fault: inject_bug.then_some(AdjointFault::FlipTrilinearX),
                ..Default::default()
            };
            if let Some(path) = config {
                let cfg = RunConfig::load(&path)?;
                opts.dims = vec![cfg.op.dim];
                opts.seed = cfg.train.seed;
            }
            let report = gradient_suite(&opts)?;
            emit(stdout, &report)?;
            if report.pass {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .targets
                    .iter()
                    .filter(|(_, t)| !t.pass)
                    .map(|(n, _)| n.as_str())
                    .collect();
                Err(NtsError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::AxiomCheck {
            config,
            checkpoint,
            sweep,
            seeds,
            out,
            seed,
        } => {
            if let Some(path) = checkpoint {
                let ckpt = Checkpoint::load(&path)?;
                let op = TernaryOp::new(ckpt.spec.clone())?;
                let pool = entity_pool(&ckpt.params);
                let report = residual_report(&op, &ckpt.params, &ResidualSampleConfig::default(), &pool)?;
                return emit(stdout, &report);
            }
            let path = config.ok_or_else(|| NtsError::Config("pass --config or --checkpoint".into()))?;
            let cfg = load_config(&path, seed)?;
            let (ds, _) = cfg.data.load()?;
            if sweep {
                if seeds == 0 {
                    return Err(NtsError::Config("--seeds must be positive".into()));
                }
                let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
                let outcome = lambda_sweep(&ds, &cfg.op, &cfg.train, &cfg.reg, &SWEEP_LAMBDAS, &seed_list)?;
                if let Some(dir) = out.or_else(|| cfg.out.clone()) {
                    std::fs::create_dir_all(&dir)?;
                    let mut csv = String::from("lambda,seed,assoc_residual,dist_residual\n");
                    for r in &outcome.runs {
                        writeln!(csv, "{},{},{},{}", r.lambda, r.seed, r.assoc_residual, r.dist_residual).unwrap();
                    }
                    std::fs::write(dir.join("residual_vs_lambda.csv"), csv)?;
                    std::fs::write(dir.join("sweep.json"), to_json(&outcome)?)?;
                }
                return emit(stdout, &outcome);
            }
            let outcome = train(&ds, &cfg.op, &cfg.train, &cfg.reg)?;
            let op = TernaryOp::new(cfg.op.clone())?;
            let report = residual_report(&op, &outcome.params, &cfg.reg, &ds.train)?;
            emit(stdout, &report)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| NtsError::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn emit<T: Serialize>(stdout: &mut dyn Write, value: &T) -> Result<()> {
    stdout.write_all(to_json(value)?.as_bytes())?;
    Ok(())
}

fn dataset_counts(ds: &TripleDataset) -> serde_json::Value {
    json!({
        "entities": ds.entities.len(),
        "relations": ds.relations.len(),
        "train": ds.train.len(),
        "valid": ds.valid.len(),
        "test": ds.test.len(),
    })
}

/// Generates `data` into `out` and returns the manifest that was written.
pub fn gen_data(data: &DataConfig, out: &Path) -> Result<serde_json::Value> {
    data.validate()?;
    if matches!(data, DataConfig::Tsv { .. }) {
        return Err(NtsError::Config("gen-data needs a generator, not a TSV source".into()));
    }
    let (ds, rules) = data.load()?;
    std::fs::create_dir_all(out)?;
    save_tsv(&ds, out)?;
    if let Some(rules) = &rules {
        save_rules(&ds, rules, out)?;
    }
    let mut manifest = serde_json::to_value(data).map_err(|e| NtsError::Data(e.to_string()))?;
    manifest["counts"] = dataset_counts(&ds);
    if let Some(rules) = &rules {
        manifest["counts"]["rules"] = json!(rules.rules.len());
    }
    std::fs::write(out.join("manifest.json"), to_json(&manifest)?)?;
    Ok(manifest)
}

fn residual_report(op: &TernaryOp, params: &ModelParams, reg: &ResidualSampleConfig, pool: &[Triple]) -> Result<Option<AxiomReport>> {
    if op.is_scalar_output() {
        return Ok(None);
    }
    axiom_report(op, params, reg, pool).map(Some)
}

/// One self-loop triple per entity, so residual sampling can draw any entity.
fn entity_pool(params: &ModelParams) -> Vec<Triple> {
    (0..params.num_entities()).map(|e| Triple::new(e, 0, e)).collect()
}

/// Test-split metrics plus residual means and, for rule data, the rule
/// satisfaction rate.
fn full_metrics(
    op: &TernaryOp,
    params: &ModelParams,
    ds: &TripleDataset,
    triples: &[Triple],
    rules: Option<&RuleSet>,
    reg: &ResidualSampleConfig,
) -> Result<(MetricsReport, Option<AxiomReport>)> {
    let mut metrics = evaluate_triples(op, params, ds, triples)?;
    let residuals = residual_report(op, params, reg, &ds.train)?;
    if let Some(r) = &residuals {
        metrics.assoc_residual_mean = Some(r.assoc_residual_mean);
        metrics.dist_residual_mean = Some(r.dist_residual_mean);
    }
    if let Some(rules) = rules {
        let calib = if ds.valid.is_empty() { &ds.train } else { &ds.valid };
        let tau = calibrate_threshold(op, params, calib)?;
        metrics.rule_satisfaction = Some(rule_satisfaction(op, params, &rules.rules, tau)?);
    }
    Ok((metrics, residuals))
}

/// Trains per `cfg` and writes the run directory `out`. Nothing is written
/// unless loading and training succeed.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let (ds, rules) = cfg.data.load()?;
    let outcome = train(&ds, &cfg.op, &cfg.train, &cfg.reg)?;
    let op = TernaryOp::new(cfg.op.clone())?;
    let (eval_split, triples) = if ds.test.is_empty() { ("valid", &ds.valid) } else { ("test", &ds.test) };
    let (metrics, residuals) = full_metrics(&op, &outcome.params, &ds, triples, rules.as_ref(), &cfg.reg)?;

    std::fs::create_dir_all(out)?;
    let effective = RunConfig {
        out: Some(out.to_path_buf()),
        ..cfg.clone()
    };
    std::fs::write(out.join("config.toml"), effective.to_toml()?)?;
    std::fs::write(out.join("manifest.json"), to_json(&run_manifest(cfg, &ds, &outcome, eval_split, residuals))?)?;
    let mut log = String::new();
    let mut csv = String::from("epoch,assoc_residual,dist_residual\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec).map_err(|e| NtsError::Data(e.to_string()))?);
        log.push('\n');
        writeln!(csv, "{},{},{}", rec.epoch, cell(rec.assoc_residual), cell(rec.dist_residual)).unwrap();
    }
    std::fs::write(out.join("epochs.jsonl"), log)?;
    std::fs::write(out.join("residuals.csv"), csv)?;
    std::fs::write(out.join("metrics.json"), to_json(&metrics)?)?;
    Checkpoint::new(&cfg.op, &ds, &outcome.params).save(&out.join("checkpoint.bin"))?;
    Ok(metrics)
}

fn run_manifest(
    cfg: &RunConfig,
    ds: &TripleDataset,
    outcome: &TrainOutcome,
    eval_split: &str,
    residuals: Option<AxiomReport>,
) -> serde_json::Value {
    json!({
        "command": "train",
        "version": env!("CARGO_PKG_VERSION"),
        "data": cfg.data,
        "counts": dataset_counts(ds),
        "op": cfg.op,
        "seed": cfg.train.seed,
        "num_parameters": outcome.params.size(),
        "tied_embeddings": outcome.params.is_tied(),
        "epochs_run": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_valid_loss": outcome.best_valid_loss,
        "eval_split": eval_split,
        "axiom_report": residuals,
    })
}

/// Evaluates a checkpoint on one split of a TSV dataset directory.
pub fn eval_checkpoint(checkpoint: &Path, dataset: &Path, split: Split) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_tsv(dataset)?;
    ckpt.check_vocab(&ds)?;
    let rules = load_rules(&ds, dataset)?;
    let op = TernaryOp::new(ckpt.spec.clone())?;
    let triples = ds.split(split);
    if triples.is_empty() {
        return Err(NtsError::Data(format!("split {split:?} is empty")));
    }
    let (metrics, _) = full_metrics(&op, &ckpt.params, &ds, triples, rules.as_ref(), &ResidualSampleConfig::default())?;
    Ok(metrics)
}
