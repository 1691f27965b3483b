//! AdamW training loop, checkpoints and metric traces.
//!
//! A step splits the batch into fixed micro-batches, builds one tape per
//! micro-batch and reduces the gradients in micro-batch order, so the result
//! is bit-identical however many threads run the micro-batches.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "KLACKPT\0"
//! version    u32      1
//! header_len u64
//! header     JSON     {"config": ModelConfig, "step": u64, "tensors": [{"name", "rows", "cols"}]}
//! data       f64 × Σ rows·cols, tensors in header order, row-major
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{grad, logits, predictions, Batch, LayerParams, ModelConfig};
use super::tape::{SeqShape, TapeError};
use crate::tasks::{self, Dataset, Predictor, TaskError, TaskSample};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KLACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("empty training split")]
    EmptyDataset,
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}\n{diagnostic}")]
    NonFinite { step: usize, diagnostic: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Learning-rate schedule over `max_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup_frac · max_steps`, then cosine decay to
    /// `final_ratio · lr`.
    WarmupCosine { warmup_frac: f64, final_ratio: f64 },
}

impl Schedule {
    /// Multiplier on the peak rate at 1-based `step`.
    pub fn factor(self, step: usize, max_steps: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup_frac, final_ratio } => {
                let warm = (warmup_frac * max_steps as f64).round() as usize;
                if step <= warm {
                    return step as f64 / warm as f64;
                }
                let span = max_steps.saturating_sub(warm).max(1) as f64;
                let progress = ((step - warm) as f64 / span).min(1.0);
                final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    pub batch_size: usize,
    /// Sequences per tape.
    pub micro_batch: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Validation samples used per evaluation; `None` uses the whole split.
    pub eval_samples: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: Schedule::WarmupCosine {
                warmup_frac: 0.02,
                final_ratio: 0.1,
            },
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip: 1.0,
            batch_size: 32,
            micro_batch: 8,
            max_steps: 5000,
            eval_every: 200,
            patience: 10,
            target_accuracy: None,
            eval_samples: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(TrainError::Config(s.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.clip < 0.0 {
            return bad("eps must be positive, decay and clip non-negative");
        }
        if let Schedule::WarmupCosine { warmup_frac, final_ratio } = self.schedule {
            if !(0.0..1.0).contains(&warmup_frac) || !(0.0..=1.0).contains(&final_ratio) {
                return bad("warmup fraction must lie in [0, 1) and final ratio in [0, 1]");
            }
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.eval_every == 0 {
            return bad("batch size, micro-batch and eval interval must be positive");
        }
        Ok(())
    }
}

/// Whether decoupled weight decay applies to a tensor.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with("w_") || leaf == "embedding" || leaf == "head"
}

pub struct AdamW {
    config: OptimConfig,
    m: LayerParams,
    v: LayerParams,
    t: u64,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &LayerParams) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Clips `grads` in place and applies one update at the configured peak
    /// rate; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut LayerParams, grads: &mut LayerParams) -> f64 {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut LayerParams, grads: &mut LayerParams, lr: f64) -> f64 {
        let c = &self.config;
        let norm = grads
            .values()
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if c.clip > 0.0 && norm > c.clip {
            let s = c.clip / norm;
            grads.values_mut().iter_mut().for_each(|g| g.scale_in_place(s));
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let names: Vec<bool> = params.names().iter().map(|n| decays(n)).collect();
        for (i, decay) in names.into_iter().enumerate() {
            let p = params.values_mut()[i].as_mut_slice();
            let g = grads.values()[i].as_slice();
            let m = self.m.values_mut()[i].as_mut_slice();
            let v = self.v.values_mut()[i].as_mut_slice();
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                if decay {
                    p[j] -= lr * c.weight_decay * p[j];
                }
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.adam_eps);
            }
        }
        norm
    }
}

/// Stacks equal-length samples into a sequence-major batch.
pub fn make_batch(samples: &[&TaskSample]) -> Result<Batch> {
    let len = samples.first().map_or(0, |s| s.len());
    if samples.iter().any(|s| s.len() != len) {
        return Err(TrainError::Task(TaskError::Malformed("ragged batch".into())));
    }
    let mut b = Batch {
        shape: SeqShape {
            batch: samples.len(),
            len,
        },
        ids: Vec::with_capacity(samples.len() * len),
        targets: Vec::with_capacity(samples.len() * len),
        mask: Vec::with_capacity(samples.len() * len),
    };
    for s in samples {
        b.ids.extend(s.input_ids.iter().map(|&t| t as usize));
        b.targets.extend(s.target_ids.iter().map(|&t| t as usize));
        b.mask.extend_from_slice(&s.loss_mask);
    }
    Ok(b)
}

/// Mean masked loss and gradient over `samples`, reduced across
/// micro-batches in a fixed order.
pub fn batch_grad(
    config: &ModelConfig,
    params: &LayerParams,
    samples: &[&TaskSample],
    micro: usize,
) -> Result<(f64, LayerParams)> {
    let chunks: Vec<&[&TaskSample]> = samples.chunks(micro.max(1)).collect();
    let run = |chunk: &&[&TaskSample]| -> Result<(usize, f64, LayerParams)> {
        let batch = make_batch(chunk)?;
        let scored = batch.mask.iter().filter(|&&m| m).count();
        if scored == 0 {
            return Ok((0, 0.0, params.zeros_like()));
        }
        let (l, g) = grad(config, params, &batch)?;
        Ok((scored, l, g))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = chunks.iter().map(run).collect::<Result<_>>()?;

    let total: usize = parts.iter().map(|p| p.0).sum();
    if total == 0 {
        return Err(TrainError::Task(TaskError::EmptyMask));
    }
    let mut acc = params.zeros_like();
    let mut loss = 0.0;
    for (scored, l, g) in parts {
        if scored == 0 {
            continue;
        }
        let w = scored as f64 / total as f64;
        loss += w * l;
        for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
            a.axpy(w, b).expect("matching shapes");
        }
    }
    Ok((loss, acc))
}

/// Argmax predictions of a model, batched.
pub struct ModelPredictor<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a LayerParams,
    pub batch_size: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, samples: &[TaskSample]) -> tasks::Result<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let refs: Vec<&TaskSample> = chunk.iter().collect();
            let batch = make_batch(&refs).map_err(|e| TaskError::Malformed(e.to_string()))?;
            let z = logits(self.config, self.params, &batch).map_err(|e| TaskError::Malformed(e.to_string()))?;
            let pred = predictions(&z);
            let len = batch.shape.len;
            out.extend(pred.chunks(len.max(1)).map(|p| p.iter().map(|&t| t as u32).collect()));
        }
        Ok(out)
    }
}

pub fn evaluate_model(config: &ModelConfig, params: &LayerParams, samples: &[TaskSample]) -> Result<f64> {
    let mut p = ModelPredictor {
        config,
        params,
        batch_size: 64,
    };
    Ok(tasks::evaluate(&mut p, samples)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Target,
    Patience,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best evaluation (the initial ones if none ran).
    pub params: LayerParams,
    pub final_params: LayerParams,
    pub trace: Vec<MetricRow>,
    pub best_eval: Option<f64>,
    pub best_step: usize,
    pub steps: usize,
    pub stop: StopReason,
}

/// Trains on the train split, evaluating on the validation split.
pub fn train(config: &ModelConfig, data: &Dataset, opt: &OptimConfig, seed: u64) -> Result<TrainOutcome> {
    train_from(config, LayerParams::init(config, seed), data, opt, seed)
}

pub fn train_from(
    config: &ModelConfig,
    init: LayerParams,
    data: &Dataset,
    opt: &OptimConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    opt.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let eval_set: &[TaskSample] = match opt.eval_samples {
        Some(n) => &data.valid[..n.min(data.valid.len())],
        None => &data.valid,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut params = init;
    let mut best = params.clone();
    let mut best_eval: Option<f64> = None;
    let mut best_step = 0;
    let mut stale = 0;
    let mut adam = AdamW::new(opt.clone(), &params);
    let mut trace = Vec::with_capacity(opt.max_steps);
    let mut stop = StopReason::MaxSteps;
    let mut steps = 0;

    for step in 1..=opt.max_steps {
        let mut picked = Vec::with_capacity(opt.batch_size);
        for _ in 0..opt.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&data.train[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut g) = batch_grad(config, &params, &picked, opt.micro_batch)?;
        if !loss.is_finite() || g.values().iter().any(|m| !m.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                diagnostic: diagnostic(loss, &params, &g, &trace),
            });
        }
        let lr = opt.lr * opt.schedule.factor(step, opt.max_steps);
        adam.step_with_lr(&mut params, &mut g, lr);
        steps = step;
        let mut row = MetricRow {
            step,
            loss,
            eval_acc: None,
        };
        if step % opt.eval_every == 0 && !eval_set.is_empty() {
            let acc = evaluate_model(config, &params, eval_set)?;
            row.eval_acc = Some(acc);
            if best_eval.is_none_or(|b| acc > b) {
                best_eval = Some(acc);
                best = params.clone();
                best_step = step;
                stale = 0;
            } else {
                stale += 1;
            }
            trace.push(row);
            if opt.target_accuracy.is_some_and(|t| acc >= t) {
                stop = StopReason::Target;
                break;
            }
            if stale >= opt.patience {
                stop = StopReason::Patience;
                break;
            }
            continue;
        }
        trace.push(row);
    }
    if best_eval.is_none() {
        best = params.clone();
    }
    Ok(TrainOutcome {
        params: best,
        final_params: params,
        trace,
        best_eval,
        best_step,
        steps,
        stop,
    })
}

fn diagnostic(loss: f64, params: &LayerParams, grads: &LayerParams, trace: &[MetricRow]) -> String {
    let mut s = format!("loss = {loss}\n");
    for ((name, p), g) in params.iter().zip(grads.values()) {
        let _ = writeln!(
            s,
            "{name}: |param|max = {:.3e}{}, |grad|max = {:.3e}{}",
            p.max_abs(),
            if p.is_finite() { "" } else { " (non-finite)" },
            g.max_abs(),
            if g.is_finite() { "" } else { " (non-finite)" },
        );
    }
    if let Some(last) = trace.last() {
        let _ = writeln!(s, "last finite step {} loss {}", last.step, last.loss);
    }
    s
}

pub fn write_trace(path: &Path, trace: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "eval_acc"])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss),
            r.eval_acc.map_or_else(String::new, |a| a.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_err = |what: &str| TrainError::Checkpoint(format!("bad {what} in metric trace"));
        out.push(MetricRow {
            step: field(0).parse().map_err(|_| parse_err("step"))?,
            loss: field(1).parse().map_err(|_| parse_err("loss"))?,
            eval_acc: match field(2) {
                "" => None,
                a => Some(a.parse().map_err(|_| parse_err("eval_acc"))?),
            },
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorHeader>,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: LayerParams,
    pub step: u64,
}

pub fn checkpoint_bytes(config: &ModelConfig, params: &LayerParams, step: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: config.clone(),
        step,
        tensors: params
            .iter()
            .map(|(name, m)| TensorHeader {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in params.values() {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &LayerParams, step: u64) -> Result<()> {
    let bytes = checkpoint_bytes(config, params, step)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |s: &str| TrainError::Checkpoint(s.into());
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u4 = [0u8; 4];
    r.read_exact(&mut u4).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(u4);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u8b).map_err(|_| bad("truncated header length"))?;
    let hlen = u64::from_le_bytes(u8b) as usize;
    if r.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..hlen])?;
    r = &r[hlen..];
    header.config.validate()?;
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if r.len() != 8 * expected {
        return Err(TrainError::Checkpoint(format!(
            "payload holds {} bytes, header describes {}",
            r.len(),
            8 * expected
        )));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    for t in header.tensors {
        let n = t.rows * t.cols;
        let data: Vec<f64> = r[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        r = &r[8 * n..];
        names.push(t.name);
        values.push(Matrix::from_vec_unchecked(t.rows, t.cols, data));
    }
    let params = LayerParams::from_parts(names, values);
    let reference = LayerParams::init(&header.config, 0);
    if reference.names() != params.names()
        || reference.values().iter().zip(params.values()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(bad("tensor layout does not match the stored model config"));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        step: header.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path)?)
}
