//! Per-token state updates for the additive, gated and delta-rule families.
//!
//! Every rule edits a single `d_k × d_v` associative state `S`. The delta-rule
//! selectors share one template
//!
//! ```text
//! S̃ = decay(S)
//! e = v − S̃ᵀ k
//! S' = S̃ + β k eᵀ
//! ```
//!
//! and differ only in how `β` is chosen. For [`RuleKind::Kla`] the coefficient
//! is `η / (‖k‖² + ε)`, which for `η = 1, ε = 0` is the exact Kaczmarz
//! projection of `S̃` onto `{S : Sᵀk = v}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{l2_norm_sq, Matrix, Real, TensorError, Vector};

/// Stabilizer added to `‖k‖²` in the Kaczmarz coefficient.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Lower clamp applied to `η` after the sigmoid.
pub const ETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecurrenceError {
    #[error("{name} = {value} is outside {range}")]
    Range {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("coefficient denominator is zero (zero key with eps = 0)")]
    Singular,
    #[error("invalid rule configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = RecurrenceError> = std::result::Result<T, E>;

/// The update-rule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// `S = S + k vᵀ`
    LinearAttention,
    /// `S = α S + η k vᵀ`
    RetNetMamba2,
    /// `S = Diag(α) S + k vᵀ`
    Gla,
    /// `S = (I − ρ k kᵀ) S + ρ k vᵀ`
    Longhorn,
    /// `S = (I − η k kᵀ) S + η k vᵀ`
    DeltaNet,
    /// `S = (I − η k kᵀ) α S + η k vᵀ`
    Gdn,
    /// `S = α S + η/(‖k‖²+ε) k (v − α Sᵀk)ᵀ`
    Kla,
}

impl RuleKind {
    pub const ALL: [RuleKind; 7] = [
        RuleKind::LinearAttention,
        RuleKind::RetNetMamba2,
        RuleKind::Gla,
        RuleKind::Longhorn,
        RuleKind::DeltaNet,
        RuleKind::Gdn,
        RuleKind::Kla,
    ];

    pub fn is_delta(self) -> bool {
        matches!(
            self,
            RuleKind::Longhorn | RuleKind::DeltaNet | RuleKind::Gdn | RuleKind::Kla
        )
    }

    /// Whether the state is scaled by the scalar gate `α` before the write.
    pub fn uses_scalar_decay(self) -> bool {
        matches!(self, RuleKind::RetNetMamba2 | RuleKind::Gdn | RuleKind::Kla)
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::LinearAttention => "linear",
            RuleKind::RetNetMamba2 => "retnet",
            RuleKind::Gla => "gla",
            RuleKind::Longhorn => "longhorn",
            RuleKind::DeltaNet => "deltanet",
            RuleKind::Gdn => "gdn",
            RuleKind::Kla => "kla",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = RecurrenceError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "linear" | "linearattention" | "la" => RuleKind::LinearAttention,
            "retnet" | "mamba2" | "retnetmamba2" => RuleKind::RetNetMamba2,
            "gla" => RuleKind::Gla,
            "longhorn" => RuleKind::Longhorn,
            "deltanet" | "delta" => RuleKind::DeltaNet,
            "gdn" | "gateddeltanet" => RuleKind::Gdn,
            "kla" | "kaczmarz" => RuleKind::Kla,
            other => return Err(RecurrenceError::Config(format!("unknown rule `{other}`"))),
        })
    }
}

/// How the delta-rule write coefficient is normalized.
///
/// `Kaczmarz` is the default and means "the selector's own coefficient":
/// `η/(‖k‖²+ε)` for KLA and `η` for GDN, DeltaNet and Longhorn. The other
/// variants replace that coefficient and are only accepted by delta-rule
/// selectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Kaczmarz,
    /// `β = η`, plain sigmoid gate.
    None,
    /// `β = 1/(‖k‖²+ε)`, gate dropped.
    KeyNormOnly,
    /// `β = c·η` with a trainable scalar `c` (initialized at 1.0).
    LearnedScalar(f64),
}

/// Whether decay and write strength come from separate projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Dual,
    /// One projection drives both: the step uses `η` as the decay `α`.
    Single,
}

/// Optional position-dependent multiplier on the delta coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceFactor {
    #[default]
    Off,
    /// `1/t`
    InvT,
    /// `1/√t`
    InvSqrtT,
    /// `1/ln(t+1)`
    InvLogT,
}

impl SequenceFactor {
    /// Multiplier at 1-based absolute position `t`.
    pub fn at(self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        match self {
            SequenceFactor::Off => 1.0,
            SequenceFactor::InvT => 1.0 / t,
            SequenceFactor::InvSqrtT => 1.0 / t.sqrt(),
            SequenceFactor::InvLogT => 1.0 / (t + 1.0).ln(),
        }
    }
}

/// A rule selector together with its ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    pub kind: RuleKind,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub gating: Gating,
    #[serde(default)]
    pub sequence_factor: SequenceFactor,
}

impl UpdateRule {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            normalization: Normalization::Kaczmarz,
            gating: Gating::Dual,
            sequence_factor: SequenceFactor::Off,
        }
    }

    pub fn kla() -> Self {
        Self::new(RuleKind::Kla)
    }

    pub fn gdn() -> Self {
        Self::new(RuleKind::Gdn)
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_gating(mut self, gating: Gating) -> Self {
        self.gating = gating;
        self
    }

    pub fn with_sequence_factor(mut self, factor: SequenceFactor) -> Self {
        self.sequence_factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalization != Normalization::Kaczmarz && !self.kind.is_delta() {
            return Err(RecurrenceError::Config(format!(
                "normalization {:?} requires a delta-rule selector, got {}",
                self.normalization, self.kind
            )));
        }
        if let Normalization::LearnedScalar(c) = self.normalization {
            if !c.is_finite() {
                return Err(RecurrenceError::Config("learned scalar must be finite".into()));
            }
        }
        if self.sequence_factor != SequenceFactor::Off && !self.kind.is_delta() {
            return Err(RecurrenceError::Config(format!(
                "sequence factor requires a delta-rule selector, got {}",
                self.kind
            )));
        }
        if self.gating == Gating::Single && !self.kind.uses_scalar_decay() {
            return Err(RecurrenceError::Config(format!(
                "single gating requires a scalar-decay selector, got {}",
                self.kind
            )));
        }
        Ok(())
    }
}

impl From<RuleKind> for UpdateRule {
    fn from(kind: RuleKind) -> Self {
        Self::new(kind)
    }
}

/// The recurrent associative memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMatrix<T: Real = f64>(Matrix<T>);

impl<T: Real> StateMatrix<T> {
    pub fn new(s: Matrix<T>) -> Result<Self> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { index: 0 }.into());
        }
        Ok(Self(s))
    }

    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self(Matrix::zeros(d_k, d_v))
    }

    pub fn d_k(&self) -> usize {
        self.0.rows()
    }

    pub fn d_v(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }
}

impl<T: Real> From<Matrix<T>> for StateMatrix<T> {
    fn from(s: Matrix<T>) -> Self {
        Self(s)
    }
}

/// One timestep's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInput<T: Real = f64> {
    pub k: Vector<T>,
    pub v: Vector<T>,
    pub q: Vector<T>,
    pub alpha: T,
    pub eta: T,
    /// Per-row decay used by GLA. Falls back to `alpha` broadcast when absent.
    pub alpha_diag: Option<Vector<T>>,
}

impl<T: Real> TokenInput<T> {
    /// Checked constructor.
    pub fn new(k: Vector<T>, v: Vector<T>, q: Vector<T>, alpha: T, eta: T) -> Result<Self> {
        let x = Self {
            k,
            v,
            q,
            alpha,
            eta,
            alpha_diag: None,
        };
        x.validate()?;
        Ok(x)
    }

    pub fn with_alpha_diag(mut self, alpha_diag: Vector<T>) -> Result<Self> {
        self.alpha_diag = Some(alpha_diag);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_eta(self.eta)?;
        if self.k.len() != self.q.len() {
            return Err(TensorError::ShapeMismatch {
                op: "token q/k",
                left: (self.k.len(), 1),
                right: (self.q.len(), 1),
            }
            .into());
        }
        if !(self.k.is_finite() && self.v.is_finite() && self.q.is_finite()) {
            return Err(TensorError::NonFinite { index: 0 }.into());
        }
        if let Some(d) = &self.alpha_diag {
            if d.len() != self.k.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "alpha_diag",
                    left: (d.len(), 1),
                    right: (self.k.len(), 1),
                }
                .into());
            }
            for &a in d.as_slice() {
                check_alpha(a)?;
            }
        }
        Ok(())
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha >= T::zero() && alpha <= T::one() {
        Ok(())
    } else {
        Err(RecurrenceError::Range {
            name: "alpha",
            value: alpha.to_f64().unwrap_or(f64::NAN),
            range: "[0, 1]",
        })
    }
}

fn check_eta<T: Real>(eta: T) -> Result<()> {
    if eta > T::zero() && eta <= T::one() {
        Ok(())
    } else {
        Err(RecurrenceError::Range {
            name: "eta",
            value: eta.to_f64().unwrap_or(f64::NAN),
            range: "(0, 1]",
        })
    }
}

/// Result of a single [`step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T: Real = f64> {
    pub o: Vector<T>,
    pub new_state: StateMatrix<T>,
    /// Coefficient multiplying the rank-one write (`ρ` for Longhorn, `1` for
    /// the additive rules).
    pub beta: T,
    /// `v − S̃ᵀk` before the write; zeros for non-delta rules.
    pub residual_before: Vector<T>,
    /// `v − S'ᵀk` after the write; zeros for non-delta rules.
    pub residual_after: Vector<T>,
}

/// `σ(z)`.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `η = clamp(σ(z), ETA_FLOOR, 1)`.
pub fn eta_from_logit(z: f64) -> f64 {
    sigmoid(z).clamp(ETA_FLOOR, 1.0)
}

/// `S̃ = α S`.
pub fn decay_state<T: Real>(s: &StateMatrix<T>, alpha: T) -> Result<StateMatrix<T>> {
    check_alpha(alpha)?;
    Ok(StateMatrix(s.0.scaled(alpha)))
}

/// `S̃ = Diag(α) S`.
pub fn decay_state_diag<T: Real>(s: &StateMatrix<T>, alpha: &Vector<T>) -> Result<StateMatrix<T>> {
    if alpha.len() != s.d_k() {
        return Err(TensorError::ShapeMismatch {
            op: "decay_state_diag",
            left: s.0.shape(),
            right: (alpha.len(), 1),
        }
        .into());
    }
    let mut out = s.0.clone();
    for (i, &a) in alpha.as_slice().iter().enumerate() {
        check_alpha(a)?;
        for x in out.row_mut(i) {
            *x *= a;
        }
    }
    Ok(StateMatrix(out))
}

/// `e = v − S̃ᵀk`.
pub fn residual<T: Real>(s_tilde: &StateMatrix<T>, k: &Vector<T>, v: &Vector<T>) -> Result<Vector<T>> {
    if v.len() != s_tilde.d_v() {
        return Err(TensorError::ShapeMismatch {
            op: "residual",
            left: s_tilde.0.shape(),
            right: (v.len(), 1),
        }
        .into());
    }
    let pred = s_tilde.0.tmatvec(k)?;
    Ok(v.sub(&pred)?)
}

/// `β = η / (‖k‖² + ε)`.
pub fn kla_coefficient<T: Real>(eta: T, k: &Vector<T>, eps: T) -> Result<T> {
    check_eta(eta)?;
    if eps < T::zero() {
        return Err(RecurrenceError::Range {
            name: "eps",
            value: eps.to_f64().unwrap_or(f64::NAN),
            range: "[0, inf)",
        });
    }
    kaczmarz_step(eta, k.l2_norm_sq(), eps)
}

fn kaczmarz_step<T: Real>(numerator: T, knorm_sq: T, eps: T) -> Result<T> {
    let denom = knorm_sq + eps;
    if denom == T::zero() {
        return Err(RecurrenceError::Singular);
    }
    Ok(numerator / denom)
}

/// Write coefficient of a delta-rule selector, before any Longhorn transform.
///
/// Shared by the tokenwise and chunkwise paths so both read the same `β`.
pub fn delta_coefficient<T: Real>(
    rule: &UpdateRule,
    eta: T,
    knorm_sq: T,
    eps: T,
    position: usize,
) -> Result<T> {
    let base = match rule.normalization {
        Normalization::Kaczmarz => match rule.kind {
            RuleKind::Kla => kaczmarz_step(eta, knorm_sq, eps)?,
            _ => eta,
        },
        Normalization::None => eta,
        Normalization::KeyNormOnly => kaczmarz_step(T::one(), knorm_sq, eps)?,
        Normalization::LearnedScalar(c) => T::lit(c) * eta,
    };
    Ok(match rule.sequence_factor {
        SequenceFactor::Off => base,
        f => base * T::lit(f.at(position)),
    })
}

/// Borrowed view of a token, used by the allocation-free step.
#[derive(Clone, Copy, Debug)]
pub struct TokenView<'a, T: Real> {
    pub k: &'a [T],
    pub v: &'a [T],
    pub q: &'a [T],
    pub alpha: T,
    pub eta: T,
    pub alpha_diag: Option<&'a [T]>,
}

impl<'a, T: Real> From<&'a TokenInput<T>> for TokenView<'a, T> {
    fn from(x: &'a TokenInput<T>) -> Self {
        Self {
            k: x.k.as_slice(),
            v: x.v.as_slice(),
            q: x.q.as_slice(),
            alpha: x.alpha,
            eta: x.eta,
            alpha_diag: x.alpha_diag.as_ref().map(Vector::as_slice),
        }
    }
}

/// Reusable buffers for [`step_in_place`].
#[derive(Clone, Debug)]
pub struct StepScratch<T: Real> {
    residual: Vec<T>,
}

impl<T: Real> StepScratch<T> {
    pub fn new(d_v: usize) -> Self {
        Self {
            residual: vec![T::zero(); d_v],
        }
    }

    /// Residual computed by the most recent delta-rule step.
    pub fn residual(&self) -> &[T] {
        &self.residual
    }
}

/// Advances `state` by one token and writes the readout into `out`.
///
/// Performs no heap allocation. Inputs are not validated; use [`step`] for the
/// checked path. Returns the coefficient multiplying the rank-one write.
pub fn step_in_place<T: Real>(
    rule: &UpdateRule,
    state: &mut Matrix<T>,
    x: TokenView<'_, T>,
    eps: T,
    position: usize,
    scratch: &mut StepScratch<T>,
    out: &mut [T],
) -> Result<T> {
    let alpha = match rule.gating {
        Gating::Dual => x.alpha,
        Gating::Single => x.eta,
    };
    let beta = match rule.kind {
        RuleKind::LinearAttention => {
            state.rank_one_update(T::one(), x.k, x.v);
            T::one()
        }
        RuleKind::RetNetMamba2 => {
            state.scale_in_place(alpha);
            state.rank_one_update(x.eta, x.k, x.v);
            x.eta
        }
        RuleKind::Gla => {
            let d_v = state.cols();
            for i in 0..state.rows() {
                let a = x.alpha_diag.map_or(x.alpha, |d| d[i]);
                for s in &mut state.as_mut_slice()[i * d_v..(i + 1) * d_v] {
                    *s *= a;
                }
            }
            state.rank_one_update(T::one(), x.k, x.v);
            T::one()
        }
        kind => {
            if kind.uses_scalar_decay() {
                state.scale_in_place(alpha);
            }
            let knorm_sq = l2_norm_sq(x.k);
            let mut beta = delta_coefficient(rule, x.eta, knorm_sq, eps, position)?;
            if kind == RuleKind::Longhorn {
                beta = beta / (T::one() + beta * knorm_sq);
            }
            state.tmatvec_into(x.k, &mut scratch.residual);
            for (e, &v) in scratch.residual.iter_mut().zip(x.v) {
                *e = v - *e;
            }
            state.rank_one_update(beta, x.k, &scratch.residual);
            beta
        }
    };
    readout_into(state, x.q, out);
    Ok(beta)
}

/// `o = Sᵀq / ‖q‖`; zero when `q = 0`.
pub fn readout<T: Real>(s: &StateMatrix<T>, q: &Vector<T>) -> Vector<T> {
    let mut out = vec![T::zero(); s.d_v()];
    readout_into(&s.0, q.as_slice(), &mut out);
    Vector::from_vec_unchecked(out)
}

fn readout_into<T: Real>(s: &Matrix<T>, q: &[T], out: &mut [T]) {
    let norm = l2_norm_sq(q).sqrt();
    if norm == T::zero() {
        out.fill(T::zero());
        return;
    }
    s.tmatvec_into(q, out);
    let inv = T::one() / norm;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// One checked step at absolute position 1.
pub fn step<T: Real>(
    rule: &UpdateRule,
    s: &StateMatrix<T>,
    x: &TokenInput<T>,
    eps: T,
) -> Result<StepOutput<T>> {
    step_at(rule, s, x, eps, 1)
}

/// One checked step at 1-based absolute `position`.
pub fn step_at<T: Real>(
    rule: &UpdateRule,
    s: &StateMatrix<T>,
    x: &TokenInput<T>,
    eps: T,
    position: usize,
) -> Result<StepOutput<T>> {
    rule.validate()?;
    x.validate()?;
    if x.k.len() != s.d_k() || x.v.len() != s.d_v() {
        return Err(TensorError::ShapeMismatch {
            op: "step",
            left: s.0.shape(),
            right: (x.k.len(), x.v.len()),
        }
        .into());
    }
    let mut state = s.0.clone();
    let mut scratch = StepScratch::new(s.d_v());
    let mut o = vec![T::zero(); s.d_v()];
    let beta = step_in_place(rule, &mut state, x.into(), eps, position, &mut scratch, &mut o)?;
    let (residual_before, residual_after) = if rule.kind.is_delta() {
        let before = Vector::from_vec_unchecked(scratch.residual.clone());
        let mut pred = vec![T::zero(); s.d_v()];
        state.tmatvec_into(x.k.as_slice(), &mut pred);
        let after = Vector::from_fn(s.d_v(), |j| x.v[j] - pred[j]);
        (before, after)
    } else {
        (Vector::zeros(s.d_v()), Vector::zeros(s.d_v()))
    };
    Ok(StepOutput {
        o: Vector::from_vec_unchecked(o),
        new_state: StateMatrix(state),
        beta,
        residual_before,
        residual_after,
    })
}

/// Outputs of [`run_sequence`].
#[derive(Clone, Debug)]
pub struct SequenceOutput<T: Real = f64> {
    /// `L × d_v` readouts.
    pub outputs: Matrix<T>,
    pub final_state: StateMatrix<T>,
    /// Per-step details when tracing was requested.
    pub trace: Vec<StepOutput<T>>,
}

/// Sequential left fold of [`step`] over `tokens`.
pub fn run_sequence<T: Real>(
    rule: &UpdateRule,
    s0: &StateMatrix<T>,
    tokens: &[TokenInput<T>],
    eps: T,
    trace: bool,
) -> Result<SequenceOutput<T>> {
    rule.validate()?;
    let d_v = s0.d_v();
    let mut outputs = Matrix::zeros(tokens.len(), d_v);
    if trace {
        let mut state = s0.clone();
        let mut steps = Vec::with_capacity(tokens.len());
        for (t, x) in tokens.iter().enumerate() {
            let out = step_at(rule, &state, x, eps, t + 1)?;
            outputs.row_mut(t).copy_from_slice(out.o.as_slice());
            state = out.new_state.clone();
            steps.push(out);
        }
        return Ok(SequenceOutput {
            outputs,
            final_state: state,
            trace: steps,
        });
    }
    let mut state = s0.0.clone();
    let mut scratch = StepScratch::new(d_v);
    for (t, x) in tokens.iter().enumerate() {
        x.validate()?;
        if x.k.len() != s0.d_k() || x.v.len() != d_v {
            return Err(TensorError::ShapeMismatch {
                op: "run_sequence",
                left: s0.0.shape(),
                right: (x.k.len(), x.v.len()),
            }
            .into());
        }
        step_in_place(rule, &mut state, x.into(), eps, t + 1, &mut scratch, outputs.row_mut(t))?;
    }
    Ok(SequenceOutput {
        outputs,
        final_state: StateMatrix(state),
        trace: Vec::new(),
    })
}

/// `L_t(S) = ½‖Sᵀk − v‖²`.
pub fn token_loss<T: Real>(s: &Matrix<T>, k: &[T], v: &[T]) -> T {
    let mut pred = vec![T::zero(); s.cols()];
    s.tmatvec_into(k, &mut pred);
    let half = T::lit(0.5);
    half * pred
        .iter()
        .zip(v)
        .map(|(&p, &vj)| (p - vj) * (p - vj))
        .fold(T::zero(), |a, b| a + b)
}

/// Contraction factor `1 − η‖k‖²/(‖k‖²+ε)` of the relaxed Kaczmarz write.
pub fn contraction_factor(eta: f64, knorm_sq: f64, eps: f64) -> f64 {
    1.0 - eta * knorm_sq / (knorm_sq + eps)
}
