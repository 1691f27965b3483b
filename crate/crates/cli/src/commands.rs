use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use kla_core::autodiff::model::ModelConfig;
use kla_core::autodiff::tape::TapeError;
use kla_core::autodiff::train::{
    self as training, load_checkpoint, save_checkpoint, write_trace, OptimConfig, Schedule, TrainError,
};
use kla_core::bench::{self, BenchConfig, BenchResult, ExecPath};
use kla_core::chunk::equivalence_sweep;
use kla_core::recurrence::{RecurrenceError, RuleKind, UpdateRule, DEFAULT_EPS};
use kla_core::tasks::{Dataset, Split, TaskConfig, TaskError, TaskKind};
use kla_core::tensor::Precision;
use kla_core::theory::{run_suite, SuiteConfig, TheoryError};

use crate::config::Common;
use crate::{BenchArgs, EquivArgs, EvalArgs, GenArgs, TrainArgs, VerifyArgs};

#[derive(Debug)]
pub enum CliError {
    /// Usage or configuration problem (exit 2).
    Config(String),
    /// A check, metric or run failed (exit 1).
    Failure(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(s) | CliError::Failure(s) => f.write_str(s),
        }
    }
}

impl From<RecurrenceError> for CliError {
    fn from(e: RecurrenceError) -> Self {
        match e {
            RecurrenceError::Config(_) | RecurrenceError::Range { .. } => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::Config(_) => CliError::Config(e.to_string()),
            TheoryError::Recurrence(r) => r.into(),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Infeasible(_) => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyDataset => CliError::Config(e.to_string()),
            TrainError::Tape(TapeError::Invalid { op: "model config", .. }) => CliError::Config(e.to_string()),
            TrainError::Task(t) => t.into(),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

/// Caps the worker pool at `KLA_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("KLA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("KLA_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failure(e.to_string()))
}

/// Writes a JSON report to `out`, or to stdout when no path is given.
fn emit(out: Option<&PathBuf>, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf, CliError> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| CliError::Config(format!("{command} requires --out <dir>")))?;
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

pub fn verify(common: &Common, args: &VerifyArgs) -> Result<(), CliError> {
    common.require_f64("verify")?;
    let cfg = SuiteConfig {
        samples: common.samples.unwrap_or(1000),
        max_dim: common.dk.unwrap_or(32),
        seed: common.seed.unwrap_or(42),
        mutate_coefficient: args.mutate,
    };
    let report = run_suite(&cfg)?;
    for r in &report.reports {
        eprintln!(
            "{:<24} {}  max dev {:.3e}  tol {:.0e}  n = {}",
            r.check,
            if r.pass { "pass" } else { "FAIL" },
            r.max_deviation,
            r.tolerance,
            r.samples
        );
    }
    emit(common.out.as_ref(), &report)?;
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<&str> = report.reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
        Err(CliError::Failure(format!("failed checks: {}", failed.join(", "))))
    }
}

pub fn equiv(common: &Common, args: &EquivArgs) -> Result<(), CliError> {
    common.require_f64("equiv")?;
    let rules = match &common.rule {
        Some(_) => vec![common.rule_or(RuleKind::Kla)?],
        None => vec![UpdateRule::gdn(), UpdateRule::kla()],
    };
    let chunks = common.chunk.map_or_else(|| vec![1, 2, 4, 16, 64], |c| vec![c]);
    let lengths = common.len.map_or_else(|| vec![5, 64, 257, 512], |l| vec![l]);
    let (d_k, _, d_v) = common.dims(16)?;
    let eps = common.eps.unwrap_or(DEFAULT_EPS);
    let seed = common.seed.unwrap_or(42);
    let cases = equivalence_sweep(&rules, &chunks, &lengths, d_k, d_v, eps, seed)?;
    let max = cases.iter().map(|c| c.max_deviation()).fold(0.0, f64::max);
    let pass = max <= args.tol;
    eprintln!("{} cases, max deviation {max:.3e} (tol {:.0e})", cases.len(), args.tol);
    emit(
        common.out.as_ref(),
        &json!({
            "d_k": d_k, "d_v": d_v, "eps": eps, "seed": seed,
            "tolerance": args.tol, "max_deviation": max, "pass": pass, "cases": cases,
        }),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failure(format!("max deviation {max:.3e} exceeds {:.0e}", args.tol)))
    }
}

pub fn gen(common: &Common, args: &GenArgs) -> Result<(), CliError> {
    let kind: TaskKind = args.task.parse()?;
    let seed = common.seed_required("gen")?;
    let mut cfg = TaskConfig::default_for(kind);
    if let Some(l) = common.len {
        cfg.length = l;
    }
    if let Some(v) = args.vocab {
        cfg.vocab = v;
    }
    if let Some(p) = args.pairs {
        cfg.num_pairs = p;
    }
    if args.queries.is_some() {
        cfg.num_queries = args.queries;
    }
    if let Some(s) = args.stacks {
        cfg.num_stacks = s;
    }
    cfg.extrapolation = args.extrapolation;
    if let Some(n) = common.samples {
        cfg.splits.train = n;
    }
    if let Some(n) = args.valid_size {
        cfg.splits.valid = n;
    }
    if let Some(n) = args.test_size {
        cfg.splits.test = n;
    }
    cfg.validate()?;
    let dir = out_dir(common, "gen")?;
    let data = Dataset::generate(&cfg, seed)?;
    let manifest = data.write(&dir)?;
    eprintln!("wrote {} samples to {}", data.len(), dir.display());
    emit(None, &manifest)
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.join("manifest.json").is_file() {
        return Err(CliError::Config(format!("{} holds no dataset manifest", path.display())));
    }
    Ok(Dataset::read(path)?)
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<(), CliError> {
    common.require_f64("train")?;
    let seed = common.seed_required("train")?;
    let data = read_dataset(&args.data)?;
    let (d_k, v_expand, _) = common.dims(16)?;
    if v_expand == 0 {
        return Err(CliError::Config("dv must be a multiple of dk for training".into()));
    }
    let defaults = ModelConfig::default();
    let model = ModelConfig {
        rule: common.rule_or(RuleKind::Kla)?,
        vocab: data.config.vocab,
        d_model: common.d_model.unwrap_or(defaults.d_model),
        d_k,
        v_expand,
        n_layers: args.layers.unwrap_or(defaults.n_layers),
        mlp_hidden: args.mlp_hidden.unwrap_or(defaults.mlp_hidden),
        eps: common.eps.unwrap_or(defaults.eps),
        alpha_bias_init: args.alpha_bias.unwrap_or(defaults.alpha_bias_init),
        ..defaults
    };
    let od = OptimConfig::default();
    let opt = OptimConfig {
        lr: args.lr.unwrap_or(od.lr),
        schedule: if args.constant_lr { Schedule::Constant } else { od.schedule },
        batch_size: args.batch.unwrap_or(od.batch_size),
        max_steps: args.steps.unwrap_or(od.max_steps),
        eval_every: args.eval_every.unwrap_or(od.eval_every),
        patience: args.patience.unwrap_or(od.patience),
        target_accuracy: args.target,
        eval_samples: args.eval_samples,
        ..od
    };
    let dir = out_dir(common, "train")?;
    let outcome = match training::train(&model, &data, &opt, seed) {
        Err(TrainError::NonFinite { step, diagnostic }) => {
            let path = dir.join("diagnostic.txt");
            fs::write(&path, &diagnostic).map_err(|e| io_failure(&path, e))?;
            return Err(CliError::Failure(format!(
                "non-finite loss at step {step}; diagnostic written to {}",
                path.display()
            )));
        }
        other => other?,
    };
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&ckpt, &model, &outcome.params, outcome.best_step as u64).map_err(|e| io_failure(&ckpt, e))?;
    let metrics = dir.join("metrics.csv");
    write_trace(&metrics, &outcome.trace).map_err(|e| io_failure(&metrics, e))?;
    let summary = json!({
        "model": model,
        "optimizer": opt,
        "seed": seed,
        "data": args.data,
        "steps": outcome.steps,
        "stop": outcome.stop,
        "best_eval": outcome.best_eval,
        "best_step": outcome.best_step,
        "files": ["checkpoint.bin", "metrics.csv"],
    });
    emit(Some(&dir.join("manifest.json")), &summary)?;
    eprintln!(
        "{} steps ({:?}), best validation accuracy {}",
        outcome.steps,
        outcome.stop,
        outcome.best_eval.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    emit(None, &summary)
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<(), CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Config(format!("no checkpoint at {}", args.checkpoint.display())));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = read_dataset(&args.data)?;
    if data.config.vocab > ckpt.config.vocab {
        return Err(CliError::Config(format!(
            "dataset vocabulary {} exceeds the model's {}",
            data.config.vocab, ckpt.config.vocab
        )));
    }
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => return Err(CliError::Config(format!("unknown split {other}"))),
    };
    let samples = data.split(split);
    let accuracy = training::evaluate_model(&ckpt.config, &ckpt.params, samples)?;
    let report = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "split": split,
        "samples": samples.len(),
        "scored": samples.iter().map(|s| s.scored()).sum::<usize>(),
        "accuracy": accuracy,
    });
    emit(common.out.as_ref(), &report)?;
    match args.min_accuracy {
        Some(min) if accuracy < min => Err(CliError::Failure(format!("accuracy {accuracy:.4} below {min}"))),
        _ => Ok(()),
    }
}

pub fn bench(common: &Common, args: &BenchArgs) -> Result<(), CliError> {
    let (prefill, decode) = match args.mode.as_str() {
        "prefill" => (true, false),
        "decode" => (false, true),
        "both" => (true, true),
        other => return Err(CliError::Config(format!("unknown bench mode {other}"))),
    };
    let (d_k, _, d_v) = common.dims(64)?;
    let cfg = BenchConfig {
        d_k,
        d_v,
        chunk: common.chunk.unwrap_or(kla_core::chunk::DEFAULT_CHUNK),
        eps: common.eps.unwrap_or(DEFAULT_EPS),
        reps: args.reps,
        warmup: args.warmup,
        seed: common.seed.unwrap_or(42),
    };
    cfg.validate()?;
    let rules = match &common.rule {
        Some(_) => vec![common.rule_or(RuleKind::Kla)?],
        None => vec![UpdateRule::kla(), UpdateRule::gdn()],
    };
    let chunkable = rules.iter().all(|r| matches!(r.kind, RuleKind::Kla | RuleKind::Gdn));
    let paths: Vec<ExecPath> = if chunkable {
        vec![ExecPath::Tokenwise, ExecPath::Chunkwise]
    } else {
        vec![ExecPath::Tokenwise]
    };
    let lengths = args.lengths.clone().unwrap_or_else(|| vec![256, 512, 1024, 2048, 4096]);
    let contexts = args.contexts.clone().unwrap_or_else(|| vec![1024, 32768]);
    let precision = common.precision()?;
    let dir = out_dir(common, "bench")?;

    let mut summary = json!({ "config": cfg, "precision": precision });
    if prefill {
        let results = match precision {
            Precision::F64 => bench::bench_prefill::<f64>(&rules, &paths, &lengths, &cfg)?,
            Precision::F32 => bench::bench_prefill::<f32>(&rules, &paths, &lengths, &cfg)?,
        };
        write_results(&dir.join("prefill.csv"), &results)?;
        summary["prefill"] = prefill_summary(&results);
    }
    if decode {
        let results = match precision {
            Precision::F64 => bench::bench_decode::<f64>(&rules, &contexts, args.gen_tokens, &cfg)?,
            Precision::F32 => bench::bench_decode::<f32>(&rules, &contexts, args.gen_tokens, &cfg)?,
        };
        write_results(&dir.join("decode.csv"), &results)?;
        summary["decode"] = decode_summary(&results);
    }
    emit(Some(&dir.join("manifest.json")), &summary)?;
    emit(None, &summary)
}

fn write_results(path: &Path, results: &[BenchResult]) -> Result<(), CliError> {
    for r in results {
        eprintln!(
            "{:<9} {:<9} L = {:>6}  median {:>10.3} ms  [{:.3}, {:.3}]  {:.0} tok/s",
            r.rule, r.path, r.length, r.median_ms, r.min_ms, r.max_ms, r.tok_per_s
        );
    }
    bench::write_csv(path, results).map_err(|e| io_failure(path, e))
}

fn prefill_summary(results: &[BenchResult]) -> serde_json::Value {
    let mut doubling = serde_json::Map::new();
    for rule in [RuleKind::Kla, RuleKind::Gdn] {
        for path in [ExecPath::Tokenwise, ExecPath::Chunkwise] {
            let r = bench::doubling_ratios(results, rule, path);
            if !r.is_empty() {
                doubling.insert(format!("{rule}/{path}"), json!(r));
            }
        }
    }
    json!({
        "kla_over_gdn_chunkwise": bench::rule_ratios(results, RuleKind::Kla, RuleKind::Gdn, ExecPath::Chunkwise),
        "kla_over_gdn_tokenwise": bench::rule_ratios(results, RuleKind::Kla, RuleKind::Gdn, ExecPath::Tokenwise),
        "doubling": doubling,
    })
}

fn decode_summary(results: &[BenchResult]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for rule in [RuleKind::Kla, RuleKind::Gdn] {
        let mine: Vec<&BenchResult> = results.iter().filter(|r| r.rule == rule).collect();
        if let (Some(lo), Some(hi)) = (
            mine.iter().min_by_key(|r| r.length),
            mine.iter().max_by_key(|r| r.length),
        ) {
            out.insert(
                rule.to_string(),
                json!({
                    "short_context": lo.length, "long_context": hi.length,
                    "tpot_ratio": hi.tpot_ms / lo.tpot_ms,
                }),
            );
        }
    }
    serde_json::Value::Object(out)
}
