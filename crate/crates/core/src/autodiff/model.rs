//! Toy sequence model: embedding → N × (pre-norm mixer + pre-norm MLP, both
//! residual) → final norm → output head.
//!
//! The mixer projects queries, keys and values, passes each through a
//! width-two causal depthwise convolution, derives the gates by sigmoid
//! projections of the normalized input and runs the selected update rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{ScanInputs, SeqShape, Tape, TapeError, Var};
use crate::recurrence::{
    step_in_place, Gating, Normalization, RuleKind, StepScratch, TokenView, UpdateRule, DEFAULT_EPS,
    ETA_FLOOR,
};
use crate::tensor::Matrix;

/// Architecture and rule of a toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rule: UpdateRule,
    pub vocab: usize,
    pub d_model: usize,
    pub d_k: usize,
    /// `d_v = d_k · v_expand`.
    pub v_expand: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub eps: f64,
    /// Width-two causal convolution on queries, keys and values.
    pub short_conv: bool,
    /// Initial bias of the decay gate. Zero gives `α ≈ 0.5` at start;
    /// a positive value starts the state closer to full retention.
    #[serde(default)]
    pub alpha_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::kla(),
            vocab: 64,
            d_model: 32,
            d_k: 16,
            v_expand: 1,
            n_layers: 2,
            mlp_hidden: 64,
            eps: DEFAULT_EPS,
            short_conv: true,
            alpha_bias_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn d_v(&self) -> usize {
        self.d_k * self.v_expand
    }

    pub fn validate(&self) -> Result<(), TapeError> {
        let bad = |reason: &str| TapeError::Invalid {
            op: "model config",
            reason: reason.into(),
        };
        self.rule.validate().map_err(|e| bad(&e.to_string()))?;
        if self.vocab == 0 || self.d_model == 0 || self.d_k == 0 || self.v_expand == 0 {
            return Err(bad("dimensions must be positive"));
        }
        if self.n_layers == 0 || self.mlp_hidden == 0 {
            return Err(bad("need at least one layer and a nonempty MLP"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(bad("eps must be finite and nonnegative"));
        }
        if !self.alpha_bias_init.is_finite() {
            return Err(bad("alpha_bias_init must be finite"));
        }
        Ok(())
    }

    fn uses_alpha_projection(&self) -> bool {
        let k = self.rule.kind;
        k == RuleKind::Gla || (k.uses_scalar_decay() && self.rule.gating == Gating::Dual)
    }

    fn alpha_width(&self) -> usize {
        if self.rule.kind == RuleKind::Gla {
            self.d_k
        } else {
            1
        }
    }

    fn uses_eta_projection(&self) -> bool {
        let r = &self.rule;
        r.kind == RuleKind::RetNetMamba2
            || (r.kind.is_delta() && r.normalization != Normalization::KeyNormOnly)
            || (r.kind.uses_scalar_decay() && r.gating == Gating::Single)
    }
}

/// Every trainable tensor of a model, addressed by name.
///
/// Per layer `i` the names are `layer{i}.` followed by `norm_mix`, `w_q`,
/// `w_k`, `w_v`, `conv_q`, `conv_k`, `conv_v` (with short convolution),
/// `w_alpha`, `b_alpha` (when the rule has its own decay gate), `w_eta`,
/// `b_eta` (when it has a write gate), `scale` (learned-scalar
/// normalization), `w_o`, `norm_mlp`, `w_in`, `w_out`. Shared tensors are
/// `embedding`, `norm_final` and `head`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl LayerParams {
    pub fn from_parts(names: Vec<String>, values: Vec<Matrix>) -> Self {
        assert_eq!(names.len(), values.len());
        Self { names, values }
    }

    /// Initialization: normal(0, 0.02) for projections, embedding and head;
    /// ones for norm gains; zeros for biases (the decay-gate bias takes
    /// `alpha_bias_init`); identity taps for the
    /// convolution; the rule's initial value for a learned scalar.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut proj = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let (d, dk, dv, h) = (config.d_model, config.d_k, config.d_v(), config.mlp_hidden);
        let ones = |n: usize| Matrix::from_fn(1, n, |_, _| 1.0);
        let conv = |n: usize| Matrix::from_fn(2, n, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut add = |name: String, m: Matrix| {
            names.push(name);
            values.push(m);
        };
        add("embedding".into(), proj(config.vocab, d));
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            add(p("norm_mix"), ones(d));
            add(p("w_q"), proj(d, dk));
            add(p("w_k"), proj(d, dk));
            add(p("w_v"), proj(d, dv));
            if config.short_conv {
                add(p("conv_q"), conv(dk));
                add(p("conv_k"), conv(dk));
                add(p("conv_v"), conv(dv));
            }
            if config.uses_alpha_projection() {
                let a = config.alpha_width();
                add(p("w_alpha"), proj(d, a));
                add(p("b_alpha"), Matrix::from_fn(1, a, |_, _| config.alpha_bias_init));
            }
            if config.uses_eta_projection() {
                add(p("w_eta"), proj(d, 1));
                add(p("b_eta"), Matrix::zeros(1, 1));
            }
            if let Normalization::LearnedScalar(c) = config.rule.normalization {
                add(p("scale"), Matrix::from_vec_unchecked(1, 1, vec![c]));
            }
            add(p("w_o"), proj(dv, d));
            add(p("norm_mlp"), ones(d));
            add(p("w_in"), proj(d, h));
            add(p("w_out"), proj(h, d));
        }
        add("norm_final".into(), ones(d));
        add("head".into(), proj(d, config.vocab));
        Self { names, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Token ids, targets and loss mask of a batch, sequence-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub shape: SeqShape,
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Per-layer mixer inputs recorded by [`forward`], used to cross-check the
/// fused scan against the tokenwise recurrence.
#[derive(Clone, Debug)]
pub struct MixerTrace {
    pub k: Matrix,
    pub v: Matrix,
    pub q: Matrix,
    pub alpha: Option<Matrix>,
    pub eta: Option<Matrix>,
    pub scale: Option<f64>,
    pub output: Matrix,
}

/// Tape handles produced by [`forward`].
pub struct Forward {
    pub params: Vec<Var>,
    pub logits: Var,
    pub mixers: Vec<MixerVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct MixerVars {
    pub k: Var,
    pub v: Var,
    pub q: Var,
    pub alpha: Option<Var>,
    pub eta: Option<Var>,
    pub scale: Option<Var>,
    pub output: Var,
}

fn param(params: &LayerParams, vars: &[Var], name: &str) -> Result<Var, TapeError> {
    params.index_of(name).map(|i| vars[i]).ok_or_else(|| TapeError::Invalid {
        op: "forward",
        reason: format!("missing parameter {name}"),
    })
}

/// Registers `params` as leaves on `tape` and records the forward pass.
pub fn forward(tape: &mut Tape, config: &ModelConfig, params: &LayerParams, batch: &Batch) -> Result<Forward, TapeError> {
    let vars: Vec<Var> = params.values.iter().map(|m| tape.param(m.clone())).collect();
    forward_with(tape, config, params, vars, batch)
}

/// Records the forward pass using already registered parameter handles
/// (`vars[i]` holds `params.values()[i]`).
pub fn forward_with(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &LayerParams,
    vars: Vec<Var>,
    batch: &Batch,
) -> Result<Forward, TapeError> {
    let p = |name: &str| param(params, &vars, name);
    let shape = batch.shape;
    let n = shape.rows();
    if batch.ids.len() != n {
        return Err(TapeError::Invalid {
            op: "forward",
            reason: "ids length does not match batch shape".into(),
        });
    }
    let rule = config.rule;
    let mut x = tape.embed(p("embedding")?, &batch.ids)?;
    let mut mixers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        let h = tape.rms_norm(x, p(&name("norm_mix"))?)?;
        let mut q = tape.matmul(h, p(&name("w_q"))?)?;
        let mut k = tape.matmul(h, p(&name("w_k"))?)?;
        let mut v = tape.matmul(h, p(&name("w_v"))?)?;
        if config.short_conv {
            q = tape.short_conv(q, p(&name("conv_q"))?, shape)?;
            k = tape.short_conv(k, p(&name("conv_k"))?, shape)?;
            v = tape.short_conv(v, p(&name("conv_v"))?, shape)?;
        }
        let q_hat = tape.row_normalize(q);

        let eta = if config.uses_eta_projection() {
            let z = tape.matmul(h, p(&name("w_eta"))?)?;
            let z = tape.add_row(z, p(&name("b_eta"))?)?;
            let s = tape.sigmoid(z);
            Some(tape.clamp(s, ETA_FLOOR, 1.0))
        } else {
            None
        };
        let alpha = if config.uses_alpha_projection() {
            let z = tape.matmul(h, p(&name("w_alpha"))?)?;
            let z = tape.add_row(z, p(&name("b_alpha"))?)?;
            Some(tape.sigmoid(z))
        } else if rule.gating == Gating::Single {
            eta
        } else {
            None
        };
        let decay = if rule.kind.uses_scalar_decay() || rule.kind == RuleKind::Gla {
            alpha
        } else {
            None
        };

        let ones = || Matrix::from_fn(n, 1, |_, _| 1.0);
        let eta_var = || {
            eta.ok_or_else(|| TapeError::Invalid {
                op: "forward",
                reason: "rule needs a write gate".into(),
            })
        };
        let mut scale = None;
        let beta = match rule.kind {
            RuleKind::LinearAttention | RuleKind::Gla => tape.constant(ones()),
            RuleKind::RetNetMamba2 => eta_var()?,
            kind => {
                let base = match rule.normalization {
                    Normalization::Kaczmarz if kind == RuleKind::Kla => {
                        let kk = tape.row_sum_sq(k);
                        let denom = tape.add_scalar(kk, config.eps);
                        tape.div(eta_var()?, denom)?
                    }
                    Normalization::Kaczmarz | Normalization::None => eta_var()?,
                    Normalization::KeyNormOnly => {
                        let kk = tape.row_sum_sq(k);
                        let denom = tape.add_scalar(kk, config.eps);
                        let one = tape.constant(ones());
                        tape.div(one, denom)?
                    }
                    Normalization::LearnedScalar(_) => {
                        let c = p(&name("scale"))?;
                        scale = Some(c);
                        tape.scale_by(eta_var()?, c)?
                    }
                };
                let base = if rule.sequence_factor == crate::recurrence::SequenceFactor::Off {
                    base
                } else {
                    let f = Matrix::from_fn(n, 1, |r, _| rule.sequence_factor.at(r % shape.len + 1));
                    let f = tape.constant(f);
                    tape.mul(base, f)?
                };
                if kind == RuleKind::Longhorn {
                    // ρ = β/(1 + β‖k‖²)
                    let kk = tape.row_sum_sq(k);
                    let bk = tape.mul(base, kk)?;
                    let denom = tape.add_scalar(bk, 1.0);
                    tape.div(base, denom)?
                } else {
                    base
                }
            }
        };

        let o = tape.scan(
            ScanInputs {
                k,
                v,
                q: q_hat,
                decay,
                beta,
                delta: rule.kind.is_delta(),
            },
            shape,
        )?;
        mixers.push(MixerVars {
            k,
            v,
            q,
            alpha,
            eta,
            scale,
            output: o,
        });
        let proj = tape.matmul(o, p(&name("w_o"))?)?;
        x = tape.add(x, proj)?;

        let h = tape.rms_norm(x, p(&name("norm_mlp"))?)?;
        let up = tape.matmul(h, p(&name("w_in"))?)?;
        let act = tape.silu(up);
        let down = tape.matmul(act, p(&name("w_out"))?)?;
        x = tape.add(x, down)?;
    }
    let h = tape.rms_norm(x, p("norm_final")?)?;
    let logits = tape.matmul(h, p("head")?)?;
    Ok(Forward {
        params: vars,
        logits,
        mixers,
    })
}

/// Mean masked cross-entropy of `params` on `batch`.
pub fn loss(config: &ModelConfig, params: &LayerParams, batch: &Batch) -> Result<f64, TapeError> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, config, params, batch)?;
    let l = tape.cross_entropy(f.logits, &batch.targets, &batch.mask)?;
    Ok(tape.value(l).get(0, 0))
}

/// Loss and reverse-mode gradients shaped like `params`.
pub fn grad(config: &ModelConfig, params: &LayerParams, batch: &Batch) -> Result<(f64, LayerParams), TapeError> {
    grad_of(params, |tape, vars| {
        let f = forward_with(tape, config, params, vars.to_vec(), batch)?;
        tape.cross_entropy(f.logits, &batch.targets, &batch.mask)
    })
}

/// Gradients of the scalar built by `loss_fn` on a tape whose leaves are
/// `params`, passed in order.
pub fn grad_of(
    params: &LayerParams,
    loss_fn: impl FnOnce(&mut Tape, &[Var]) -> Result<Var, TapeError>,
) -> Result<(f64, LayerParams), TapeError> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.values.iter().map(|m| tape.param(m.clone())).collect();
    let l = loss_fn(&mut tape, &leaves)?;
    let mut grads = tape.backward(l)?;
    let values = leaves.iter().map(|&v| grads.take(&tape, v)).collect();
    Ok((tape.value(l).get(0, 0), LayerParams::from_parts(params.names.clone(), values)))
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for every scalar.
pub fn finite_diff(params: &LayerParams, h: f64, mut loss_fn: impl FnMut(&LayerParams) -> f64) -> LayerParams {
    assert!(h > 0.0, "step must be positive");
    let mut work = params.clone();
    let mut out = params.zeros_like();
    for t in 0..params.len() {
        for idx in 0..params.values[t].as_slice().len() {
            let orig = params.values[t].as_slice()[idx];
            work.values[t].as_mut_slice()[idx] = orig + h;
            let up = loss_fn(&work);
            work.values[t].as_mut_slice()[idx] = orig - h;
            let down = loss_fn(&work);
            work.values[t].as_mut_slice()[idx] = orig;
            out.values[t].as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest elementwise relative error `|g − f| / max(|g|, |f|)` over entries
/// where `|g| > floor`, per tensor.
pub fn relative_errors(analytic: &LayerParams, numeric: &LayerParams, floor: f64) -> Vec<(String, f64)> {
    analytic
        .iter()
        .zip(numeric.values())
        .map(|((name, g), f)| {
            let worst = g
                .as_slice()
                .iter()
                .zip(f.as_slice())
                .filter(|(a, _)| a.abs() > floor)
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
                .fold(0.0, f64::max);
            (name.to_string(), worst)
        })
        .collect()
}

/// Forward pass that also returns every mixer's inputs and outputs.
pub fn forward_traced(config: &ModelConfig, params: &LayerParams, batch: &Batch) -> Result<(Matrix, Vec<MixerTrace>), TapeError> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, config, params, batch)?;
    let traces = f
        .mixers
        .iter()
        .map(|m| MixerTrace {
            k: tape.value(m.k).clone(),
            v: tape.value(m.v).clone(),
            q: tape.value(m.q).clone(),
            alpha: m.alpha.map(|a| tape.value(a).clone()),
            eta: m.eta.map(|e| tape.value(e).clone()),
            scale: m.scale.map(|s| tape.value(s).get(0, 0)),
            output: tape.value(m.output).clone(),
        })
        .collect();
    Ok((tape.value(f.logits).clone(), traces))
}

/// Re-runs one mixer with the tokenwise recurrence, from a zero state per
/// sequence, using the gates recorded in `trace`.
pub fn reference_mixer(config: &ModelConfig, trace: &MixerTrace, shape: SeqShape) -> Result<Matrix, TapeError> {
    let mut rule = config.rule;
    if let (Normalization::LearnedScalar(_), Some(c)) = (rule.normalization, trace.scale) {
        rule.normalization = Normalization::LearnedScalar(c);
    }
    let (d_k, d_v) = (trace.k.cols(), trace.v.cols());
    let mut out = Matrix::zeros(shape.rows(), d_v);
    let mut scratch = StepScratch::new(d_v);
    for b in 0..shape.batch {
        let mut state = Matrix::zeros(d_k, d_v);
        for t in 0..shape.len {
            let r = b * shape.len + t;
            let eta = trace.eta.as_ref().map_or(1.0, |e| e.get(r, 0));
            let (alpha, alpha_diag) = match &trace.alpha {
                Some(a) if a.cols() == 1 => (a.get(r, 0), None),
                Some(a) => (1.0, Some(a.row(r))),
                None => (1.0, None),
            };
            let view = TokenView {
                k: trace.k.row(r),
                v: trace.v.row(r),
                q: trace.q.row(r),
                alpha,
                eta,
                alpha_diag,
            };
            step_in_place(&rule, &mut state, view, config.eps, t + 1, &mut scratch, out.row_mut(r)).map_err(|e| {
                TapeError::Invalid {
                    op: "reference_mixer",
                    reason: e.to_string(),
                }
            })?;
        }
    }
    Ok(out)
}

/// Argmax prediction per row.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Logits without recording gradients.
pub fn logits(config: &ModelConfig, params: &LayerParams, batch: &Batch) -> Result<Matrix, TapeError> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, config, params, batch)?;
    Ok(tape.value(f.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrence::SequenceFactor;
    use rand::Rng;

    pub(crate) fn small_config(rule: UpdateRule) -> ModelConfig {
        ModelConfig {
            rule,
            vocab: 11,
            d_model: 6,
            d_k: 3,
            v_expand: 2,
            n_layers: 2,
            mlp_hidden: 5,
            eps: 1e-6,
            short_conv: true,
            alpha_bias_init: 0.0,
        }
    }

    /// Parameters at a larger scale than the training init so that every
    /// block carries gradients well above round-off.
    pub(crate) fn spread_params(config: &ModelConfig, seed: u64) -> LayerParams {
        let mut p = LayerParams::init(config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for (name, m) in p.names.clone().iter().zip(p.values_mut()) {
            for x in m.as_mut_slice() {
                let jitter: f64 = rng.random_range(-0.5..0.5);
                *x = if name.contains("norm") || name.contains("conv") || name.ends_with("scale") {
                    *x + jitter
                } else {
                    *x * 25.0 + jitter
                };
            }
        }
        p
    }

    pub(crate) fn random_batch(vocab: usize, shape: SeqShape, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.rows();
        Batch {
            shape,
            ids: (0..n).map(|_| rng.random_range(0..vocab)).collect(),
            targets: (0..n).map(|_| rng.random_range(0..vocab)).collect(),
            mask: (0..n).map(|i| i % 3 != 1).collect(),
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_rule() {
        let shape = SeqShape { batch: 2, len: 4 };
        for (ix, kind) in RuleKind::ALL.into_iter().enumerate() {
            let config = small_config(UpdateRule::new(kind));
            let params = spread_params(&config, 100 + ix as u64);
            let batch = random_batch(config.vocab, shape, 200 + ix as u64);
            let (_, g) = grad(&config, &params, &batch).unwrap();
            let fd = finite_diff(&params, 1e-5, |p| loss(&config, p, &batch).unwrap());
            for (name, err) in relative_errors(&g, &fd, 1e-8) {
                assert!(err <= 1e-5, "{kind} {name}: {err:e}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_ablations() {
        let shape = SeqShape { batch: 2, len: 4 };
        let rules = [
            UpdateRule::kla().with_normalization(Normalization::KeyNormOnly),
            UpdateRule::kla().with_normalization(Normalization::LearnedScalar(0.8)),
            UpdateRule::kla().with_normalization(Normalization::None),
            UpdateRule::kla().with_gating(Gating::Single),
            UpdateRule::kla().with_sequence_factor(SequenceFactor::InvSqrtT),
        ];
        for (ix, rule) in rules.into_iter().enumerate() {
            let config = small_config(rule);
            let params = spread_params(&config, 300 + ix as u64);
            let batch = random_batch(config.vocab, shape, 400 + ix as u64);
            let (_, g) = grad(&config, &params, &batch).unwrap();
            let fd = finite_diff(&params, 1e-5, |p| loss(&config, p, &batch).unwrap());
            for (name, err) in relative_errors(&g, &fd, 1e-8) {
                assert!(err <= 1e-5, "{rule:?} {name}: {err:e}");
            }
        }
    }

    #[test]
    fn fused_scan_matches_tokenwise_recurrence() {
        let shape = SeqShape { batch: 3, len: 7 };
        let mut rules: Vec<UpdateRule> = RuleKind::ALL.into_iter().map(UpdateRule::new).collect();
        rules.push(UpdateRule::kla().with_normalization(Normalization::LearnedScalar(0.6)));
        rules.push(UpdateRule::kla().with_normalization(Normalization::KeyNormOnly));
        rules.push(UpdateRule::kla().with_gating(Gating::Single));
        rules.push(UpdateRule::gdn().with_sequence_factor(SequenceFactor::InvT));
        for (ix, rule) in rules.into_iter().enumerate() {
            let config = small_config(rule);
            let params = spread_params(&config, ix as u64);
            let batch = random_batch(config.vocab, shape, ix as u64);
            let (_, traces) = forward_traced(&config, &params, &batch).unwrap();
            for trace in &traces {
                let reference = reference_mixer(&config, trace, shape).unwrap();
                let dev = reference.max_abs_diff(&trace.output).unwrap();
                assert!(dev < 1e-12, "{rule:?}: {dev:e}");
            }
        }
    }

    #[test]
    fn key_gradient_sees_the_kaczmarz_denominator() {
        let shape = SeqShape { batch: 2, len: 4 };
        let kla = small_config(UpdateRule::kla());
        let gdn = small_config(UpdateRule::gdn());
        for seed in 0..5 {
            let params = spread_params(&kla, seed);
            let batch = random_batch(kla.vocab, shape, seed);
            let (_, a) = grad(&kla, &params, &batch).unwrap();
            let (_, b) = grad(&gdn, &params, &batch).unwrap();
            let gap = a.get("layer0.w_k").unwrap().max_abs_diff(b.get("layer0.w_k").unwrap()).unwrap();
            assert!(gap > 1e-8, "seed {seed}: {gap:e}");
        }
    }

    #[test]
    fn single_parameter_richardson_check() {
        // f(θ) = ½ (sin θ · 3)², one scalar routed through the tape ops
        let params = LayerParams::from_parts(vec!["theta".into()], vec![Matrix::from_vec_unchecked(1, 1, vec![0.7])]);
        let build = |tape: &mut Tape, vars: &[Var]| {
            let s = tape.sigmoid(vars[0]);
            let three = tape.constant(Matrix::from_vec_unchecked(1, 1, vec![3.0]));
            let y = tape.mul(s, three)?;
            Ok(tape.half_sum_sq(y))
        };
        let (_, g) = grad_of(&params, build).unwrap();
        let fd = finite_diff(&params, 1e-6, |p| {
            let s = 1.0 / (1.0 + (-p.values()[0].get(0, 0)).exp());
            0.5 * (3.0 * s).powi(2)
        });
        let diff = (g.values()[0].get(0, 0) - fd.values()[0].get(0, 0)).abs();
        assert!(diff < 1e-8, "{diff:e}");
    }

    #[test]
    fn quadratic_finite_difference_is_exact() {
        let params = LayerParams::from_parts(vec!["p".into()], vec![Matrix::from_vec_unchecked(1, 2, vec![1.5, -0.25])]);
        let fd = finite_diff(&params, 1e-3, |p| 0.5 * p.values()[0].frobenius_norm().powi(2));
        assert!(fd.values()[0].max_abs_diff(&params.values()[0]).unwrap() < 1e-10);
    }

    #[test]
    fn init_shapes_and_names() {
        let config = ModelConfig {
            v_expand: 4,
            ..ModelConfig::default()
        };
        let p = LayerParams::init(&config, 42);
        assert_eq!(p.get("layer1.w_v").unwrap().shape(), (32, 64));
        assert_eq!(p.get("layer0.w_o").unwrap().shape(), (64, 32));
        assert_eq!(p.get("layer0.b_alpha").unwrap(), &Matrix::zeros(1, 1));
        assert!(p.get("layer0.scale").is_none());
        assert_eq!(LayerParams::init(&config, 42), p);
        let gla = LayerParams::init(&small_config(UpdateRule::new(RuleKind::Gla)), 1);
        assert_eq!(gla.get("layer0.w_alpha").unwrap().shape(), (6, 3));
        assert!(gla.get("layer0.w_eta").is_none());
        assert!(config.validate().is_ok());
        assert!(ModelConfig { d_k: 0, ..ModelConfig::default() }.validate().is_err());
    }
}
