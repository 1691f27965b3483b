//! Numerical checks of the projection theory behind the Kaczmarz update.
//!
//! Every check is an independent computation compared against the production
//! recurrence: feasible points and tangent directions are sampled without the
//! projection formula, the line-search curve is evaluated by applying the
//! step, and the proximal problem is minimized by plain gradient descent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recurrence::{
    contraction_factor, decay_state_diag, residual, step, token_loss, RecurrenceError, RuleKind,
    StateMatrix, TokenInput, UpdateRule,
};
use crate::sampling::{random_matrix, random_nonzero_vector, random_vector};
use crate::tensor::{outer, Matrix, Vector};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("key must be nonzero")]
    ZeroKey,
    #[error("empty line-search grid")]
    EmptyGrid,
    #[error("gradient descent diverged at iteration {iteration}: objective rose from {before} to {after}")]
    StepSize { iteration: usize, before: f64, after: f64 },
    #[error("invalid proximal weight {0}")]
    InvalidMu(f64),
    #[error("invalid suite configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Outcome of one check aggregated over its instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

impl TheoryReport {
    pub fn new(check: impl Into<String>, max_deviation: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            check: check.into(),
            max_deviation,
            tolerance,
            // NaN compares false, so a NaN deviation fails.
            pass: max_deviation <= tolerance,
            samples,
        }
    }

    /// Worst case of two reports of the same check.
    pub fn merge(self, other: &Self) -> Self {
        let dev = if self.max_deviation.is_nan() || other.max_deviation.is_nan() {
            f64::NAN
        } else {
            self.max_deviation.max(other.max_deviation)
        };
        Self::new(self.check, dev, self.tolerance, self.samples + other.samples)
    }
}

pub const CONSTRAINT_TOL: f64 = 1e-12;
pub const TANGENT_TOL: f64 = 1e-10;
pub const MIN_NORM_TOL: f64 = 1e-12;
pub const CONTRACTION_TOL: f64 = 1e-12;
pub const LAGRANGE_TOL: f64 = 1e-12;
pub const PROXIMAL_TOL: f64 = 1e-6;
pub const LINE_SEARCH_TOL: f64 = 1e-12;
pub const PARABOLA_TOL: f64 = 1e-10;

/// Probes drawn per projection instance.
pub const PROJECTION_PROBES: usize = 100;

fn require_key(k: &Vector) -> Result<f64> {
    let kk = k.l2_norm_sq();
    if kk > 0.0 {
        Ok(kk)
    } else {
        Err(TheoryError::ZeroKey)
    }
}

/// Single delta step with `α = 1`, `η = 1`, `ε = 0` under `rule`.
fn exact_step(rule: &UpdateRule, s_tilde: &StateMatrix, k: &Vector, v: &Vector) -> Result<StateMatrix> {
    let x = TokenInput::new(k.clone(), v.clone(), k.clone(), 1.0, 1.0)?;
    Ok(step(rule, s_tilde, &x, 0.0)?.new_state)
}

/// Results of the three projection characterizations for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    /// `‖S_tᵀk − v‖∞`.
    pub constraint: TheoryReport,
    /// `max |⟨S_t − S̃, H⟩_F|` over tangent directions `H` (`Hᵀk = 0`).
    pub tangent: TheoryReport,
    /// `max (‖S_t − S̃‖_F − ‖S' − S̃‖_F)⁺` over feasible `S'`.
    pub min_norm: TheoryReport,
}

impl ProjectionReport {
    pub fn pass(&self) -> bool {
        self.constraint.pass && self.tangent.pass && self.min_norm.pass
    }

    fn merge(self, other: &Self) -> Self {
        Self {
            constraint: self.constraint.merge(&other.constraint),
            tangent: self.tangent.merge(&other.tangent),
            min_norm: self.min_norm.merge(&other.min_norm),
        }
    }

    fn worst(&self) -> f64 {
        self.constraint
            .max_deviation
            .max(self.tangent.max_deviation)
            .max(self.min_norm.max_deviation)
    }
}

/// Checks that the exact Kaczmarz step is the orthogonal projection of `S̃`
/// onto `{S : Sᵀk = v}`, using [`PROJECTION_PROBES`] random probes seeded by
/// `seed`.
pub fn verify_projection(s_tilde: &StateMatrix, k: &Vector, v: &Vector, seed: u64) -> Result<ProjectionReport> {
    verify_projection_with(&UpdateRule::kla(), s_tilde, k, v, seed)
}

/// [`verify_projection`] for an arbitrary delta rule; used by the mutation
/// check.
pub fn verify_projection_with(
    rule: &UpdateRule,
    s_tilde: &StateMatrix,
    k: &Vector,
    v: &Vector,
    seed: u64,
) -> Result<ProjectionReport> {
    let kk = require_key(k)?;
    let s_t = exact_step(rule, s_tilde, k, v)?;
    let st = s_t.matrix();
    let (d_k, d_v) = (s_tilde.d_k(), s_tilde.d_v());

    let constraint = st.tmatvec(k)?.sub(v)?.max_abs();

    let delta = st.sub(s_tilde.matrix())?;
    let delta_norm = delta.frobenius_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tangent: f64 = 0.0;
    let mut excess: f64 = 0.0;
    for _ in 0..PROJECTION_PROBES {
        // H = H₀ − k (kᵀH₀)/‖k‖²
        let h0: Matrix = random_matrix(&mut rng, d_k, d_v);
        let kt_h0 = h0.tmatvec(k)?;
        let mut h = h0;
        h.rank_one_update(-1.0 / kk, k.as_slice(), kt_h0.as_slice());
        tangent = tangent.max(delta.frobenius_inner(&h)?.abs());

        // S' = Z + u (v − Zᵀk)ᵀ / (uᵀk) for a random direction u with uᵀk ≠ 0
        let z: Matrix = random_matrix(&mut rng, d_k, d_v);
        let u = loop {
            let u: Vector = random_vector(&mut rng, d_k);
            if u.dot(k)?.abs() > 1e-3 * u.l2_norm() * kk.sqrt() {
                break u;
            }
        };
        let r = v.sub(&z.tmatvec(k)?)?;
        let mut feasible = z;
        feasible.rank_one_update(1.0 / u.dot(k)?, u.as_slice(), r.as_slice());
        let other = feasible.sub(s_tilde.matrix())?.frobenius_norm();
        excess = excess.max(delta_norm - other);
    }

    Ok(ProjectionReport {
        constraint: TheoryReport::new("projection.constraint", constraint, CONSTRAINT_TOL, 1),
        tangent: TheoryReport::new("projection.tangent", tangent, TANGENT_TOL, 1),
        min_norm: TheoryReport::new("projection.min_norm", excess.max(0.0), MIN_NORM_TOL, 1),
    })
}

/// Projection checks applied to a state produced by diagonal decay
/// `S̃ = Diag(α) S`.
pub fn verify_projection_after_diag_decay(
    s: &StateMatrix,
    alpha: &Vector,
    k: &Vector,
    v: &Vector,
    seed: u64,
) -> Result<ProjectionReport> {
    let s_tilde = decay_state_diag(s, alpha)?;
    verify_projection(&s_tilde, k, v, seed)
}

/// Loss along the ray `S̃ + τ k eᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearchScan {
    pub grid: Vec<f64>,
    /// Loss of the stepped state, evaluated directly.
    pub direct: Vec<f64>,
    /// `½(1 − τ‖k‖²)²‖e‖²`.
    pub closed_form: Vec<f64>,
    pub tau_star_empirical: f64,
    /// `1/‖k‖²`.
    pub tau_star: f64,
    /// Largest `|direct − closed_form|`, relative to `max(1, ½‖e‖²)`.
    pub max_gap: f64,
    /// Whether the empirical argmin lies within one grid step of `τ*`.
    pub brackets: bool,
    /// Largest least-squares quadratic fit residual, relative to `max(1, max loss)`.
    pub parabola_residual: f64,
}

pub fn line_search_scan(s_tilde: &StateMatrix, k: &Vector, v: &Vector, grid: &[f64]) -> Result<LineSearchScan> {
    let kk = require_key(k)?;
    if grid.is_empty() {
        return Err(TheoryError::EmptyGrid);
    }
    let e = residual(s_tilde, k, v)?;
    let ee = e.l2_norm_sq();
    let mut direct = Vec::with_capacity(grid.len());
    let mut closed_form = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut s = s_tilde.matrix().clone();
        s.rank_one_update(tau, k.as_slice(), e.as_slice());
        direct.push(token_loss(&s, k.as_slice(), v.as_slice()));
        closed_form.push(0.5 * (1.0 - tau * kk).powi(2) * ee);
    }
    let scale = (0.5 * ee).max(1.0);
    let max_gap = direct
        .iter()
        .zip(&closed_form)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);
    let argmin = direct
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty");
    let tau_star = 1.0 / kk;
    let tau_star_empirical = grid[argmin];
    let step = if grid.len() > 1 {
        grid.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    } else {
        0.0
    };
    let brackets = (tau_star_empirical - tau_star).abs() <= step * (1.0 + 1e-12);
    let parabola_residual = quadratic_fit_residual(grid, &direct);
    Ok(LineSearchScan {
        grid: grid.to_vec(),
        direct,
        closed_form,
        tau_star_empirical,
        tau_star,
        max_gap,
        brackets,
        parabola_residual,
    })
}

/// Max residual of the least-squares fit `y ≈ c₀ + c₁x + c₂x²`, with `x`
/// rescaled to `[-1, 1]` for conditioning.
fn quadratic_fit_residual(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() <= 3 {
        return 0.0;
    }
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let mid = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
    let mut g = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let t = (x - mid) / half;
        let p = [1.0, t, t * t];
        for i in 0..3 {
            b[i] += p[i] * y;
            for j in 0..3 {
                g[i][j] += p[i] * p[j];
            }
        }
    }
    let c = solve3(g, b);
    let scale = ys.iter().fold(1.0f64, |m, y| m.max(y.abs()));
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let t = (x - mid) / half;
            (c[0] + c[1] * t + c[2] * t * t - y).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Gaussian elimination with partial pivoting on a 3×3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("rows");
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for j in col..3 {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// `min_S ½‖S − S̃‖²_F + (μ/2)‖Sᵀk − v‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximalProblem {
    pub s_tilde: StateMatrix,
    pub k: Vector,
    pub v: Vector,
    pub mu: f64,
}

impl ProximalProblem {
    pub fn new(s_tilde: StateMatrix, k: Vector, v: Vector, mu: f64) -> Result<Self> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(TheoryError::InvalidMu(mu));
        }
        Ok(Self { s_tilde, k, v, mu })
    }

    /// `μ = η / ((1 − η)‖k‖² + ε)`, the weight whose minimizer is the relaxed
    /// update with parameters `η`, `ε`.
    pub fn weight_for(eta: f64, knorm_sq: f64, eps: f64) -> f64 {
        eta / ((1.0 - eta) * knorm_sq + eps)
    }

    pub fn objective(&self, s: &Matrix) -> f64 {
        let d = s.sub(self.s_tilde.matrix()).expect("same shape").frobenius_norm();
        0.5 * d * d + self.mu * token_loss(s, self.k.as_slice(), self.v.as_slice())
    }

    fn gradient(&self, s: &Matrix) -> Matrix {
        let mut g = s.sub(self.s_tilde.matrix()).expect("same shape");
        let r = s.tmatvec(&self.k).expect("shape").sub(&self.v).expect("shape");
        g.rank_one_update(self.mu, self.k.as_slice(), r.as_slice());
        g
    }

    /// Largest step for which gradient descent is guaranteed to converge.
    pub fn max_step(&self) -> f64 {
        1.0 / (1.0 + self.mu * self.k.l2_norm_sq())
    }

    /// `S̃ + [μ/(1+μ‖k‖²)] k eᵀ`.
    pub fn analytic(&self) -> StateMatrix {
        let e = residual(&self.s_tilde, &self.k, &self.v).expect("shape");
        let tau = self.mu / (1.0 + self.mu * self.k.l2_norm_sq());
        let mut s = self.s_tilde.matrix().clone();
        s.rank_one_update(tau, self.k.as_slice(), e.as_slice());
        StateMatrix::from(s)
    }
}

/// Default gradient-descent schedule of the proximal oracle.
pub const PROXIMAL_STEP_FRACTION: f64 = 0.5;
pub const PROXIMAL_MAX_ITERS: usize = 10_000;
pub const PROXIMAL_GRAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct ProximalSolution {
    pub minimizer: StateMatrix,
    pub analytic: StateMatrix,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective after every iteration, starting from `S̃`.
    pub objective_trace: Vec<f64>,
}

/// Fixed-step gradient descent from `S̃`, stopping when the gradient norm
/// falls below [`PROXIMAL_GRAD_TOL`] or after `iters` iterations.
pub fn proximal_oracle(p: &ProximalProblem, step_size: f64, iters: usize) -> Result<ProximalSolution> {
    if !(step_size > 0.0 && step_size <= p.max_step()) {
        return Err(TheoryError::Config(format!(
            "step size {step_size} outside (0, {}]",
            p.max_step()
        )));
    }
    let mut s = p.s_tilde.matrix().clone();
    let mut f = p.objective(&s);
    let mut trace = vec![f];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < iters {
        let g = p.gradient(&s);
        grad_norm = g.frobenius_norm();
        if grad_norm <= PROXIMAL_GRAD_TOL {
            break;
        }
        s.axpy(-step_size, &g)?;
        iterations += 1;
        let next = p.objective(&s);
        if next > f + 1e-14 * f.abs().max(1.0) {
            return Err(TheoryError::StepSize {
                iteration: iterations,
                before: f,
                after: next,
            });
        }
        f = next;
        trace.push(f);
    }
    Ok(ProximalSolution {
        minimizer: StateMatrix::from(s),
        analytic: p.analytic(),
        iterations,
        grad_norm,
        objective_trace: trace,
    })
}

/// Gradient-descent minimizer vs. the relaxed Kaczmarz step with `(η, ε)`;
/// deviation is the Frobenius distance.
pub fn proximal_check(s_tilde: &StateMatrix, k: &Vector, v: &Vector, eta: f64, eps: f64) -> Result<TheoryReport> {
    let kk = require_key(k)?;
    let mu = ProximalProblem::weight_for(eta, kk, eps);
    let p = ProximalProblem::new(s_tilde.clone(), k.clone(), v.clone(), mu)?;
    let sol = proximal_oracle(&p, PROXIMAL_STEP_FRACTION * p.max_step(), PROXIMAL_MAX_ITERS)?;
    let x = TokenInput::new(k.clone(), v.clone(), k.clone(), 1.0, eta)?;
    let kla = step(&UpdateRule::kla(), s_tilde, &x, eps)?.new_state;
    let dev = sol.minimizer.matrix().sub(kla.matrix())?.frobenius_norm();
    Ok(TheoryReport::new("proximal", dev, PROXIMAL_TOL, 1))
}

/// Measured post-write residual vs. `(1 − η‖k‖²/(‖k‖²+ε)) e`, plus
/// monotonicity of the per-token loss.
pub fn contraction_check(s_tilde: &StateMatrix, k: &Vector, v: &Vector, eta: f64, eps: f64) -> Result<TheoryReport> {
    let x = TokenInput::new(k.clone(), v.clone(), k.clone(), 1.0, eta)?;
    if eps < 0.0 {
        return Err(TheoryError::Config("eps must be nonnegative".into()));
    }
    let out = step(&UpdateRule::kla(), s_tilde, &x, eps)?;
    let e = &out.residual_before;
    let predicted = e.scaled(contraction_factor(eta, k.l2_norm_sq(), eps));
    let gap = out.residual_after.sub(&predicted)?.max_abs();
    let before = token_loss(s_tilde.matrix(), k.as_slice(), v.as_slice());
    let after = token_loss(out.new_state.matrix(), k.as_slice(), v.as_slice());
    let rise = (after - before).max(0.0);
    Ok(TheoryReport::new("contraction", gap.max(rise), CONTRACTION_TOL, 1))
}

/// `λ = −e/‖k‖²`; checks `S̃ − kλᵀ` against the Kaczmarz step and that the
/// Lagrangian is stationary there.
pub fn verify_lagrange(s_tilde: &StateMatrix, k: &Vector, v: &Vector) -> Result<TheoryReport> {
    let kk = require_key(k)?;
    let e = residual(s_tilde, k, v)?;
    let lambda = e.scaled(-1.0 / kk);
    let reconstructed = s_tilde.matrix().sub(&outer(k, &lambda))?;
    let kla = exact_step(&UpdateRule::kla(), s_tilde, k, v)?;
    let mismatch = reconstructed.max_abs_diff(kla.matrix())?;
    // ∇_S: S − S̃ + kλᵀ;  ∇_λ: Sᵀk − v
    let grad_s = kla.matrix().sub(s_tilde.matrix())?.add(&outer(k, &lambda))?.max_abs();
    let grad_lambda = kla.matrix().tmatvec(k)?.sub(v)?.max_abs();
    Ok(TheoryReport::new(
        "lagrange",
        mismatch.max(grad_s).max(grad_lambda),
        LAGRANGE_TOL,
        1,
    ))
}

/// Configuration of the randomized suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Instances per check (the proximal check uses a tenth, at least 100).
    pub samples: usize,
    /// Dimensions are drawn uniformly from `1..=max_dim`.
    pub max_dim: usize,
    pub seed: u64,
    /// Replace the Kaczmarz coefficient with `β = η` in the projection
    /// checks. The suite must then fail.
    pub mutate_coefficient: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            max_dim: 32,
            seed: 42,
            mutate_coefficient: false,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(TheoryError::Config("samples must be positive".into()));
        }
        if self.max_dim == 0 {
            return Err(TheoryError::Config("max_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn proximal_samples(&self) -> usize {
        (self.samples / 10).max(100)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub reports: Vec<TheoryReport>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn get(&self, check: &str) -> Option<&TheoryReport> {
        self.reports.iter().find(|r| r.check == check)
    }
}

/// A random instance: `S̃`, a nonzero key of random scale, a value.
pub struct Instance {
    pub s_tilde: StateMatrix,
    pub k: Vector,
    pub v: Vector,
    pub eta: f64,
    pub eps: f64,
    pub alpha: Vector,
    pub probe_seed: u64,
}

impl Instance {
    pub fn sample(seed: u64, max_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_k = rng.random_range(1..=max_dim);
        let d_v = rng.random_range(1..=max_dim);
        let scale = rng.random_range(0.2..3.0) / (d_k as f64).sqrt();
        let k = random_nonzero_vector(&mut rng, d_k).scaled(scale);
        Self {
            s_tilde: StateMatrix::from(random_matrix(&mut rng, d_k, d_v)),
            v: random_vector(&mut rng, d_v),
            eta: rng.random_range(0.01..=1.0),
            eps: if rng.random_bool(0.25) { 0.0 } else { 10f64.powf(rng.random_range(-8.0..0.0)) },
            alpha: Vector::from_fn(d_k, |_| rng.random_range(0.0..=1.0)),
            probe_seed: rng.random(),
            k,
        }
    }
}

fn instance_seed(seed: u64, tag: u64, i: usize) -> u64 {
    seed ^ (tag << 56) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn map_instances<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn fold_reports(name: &str, tol: f64, reports: impl IntoIterator<Item = Result<TheoryReport>>) -> Result<TheoryReport> {
    let mut acc = TheoryReport::new(name, 0.0, tol, 0);
    for r in reports {
        acc = acc.merge(&r?);
    }
    Ok(acc)
}

/// Runs every check over random instances.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    config.validate()?;
    let n = config.samples;
    let rule = if config.mutate_coefficient {
        UpdateRule::gdn()
    } else {
        UpdateRule::kla()
    };
    debug_assert!(matches!(rule.kind, RuleKind::Kla | RuleKind::Gdn));
    let inst = |tag: u64, i: usize| Instance::sample(instance_seed(config.seed, tag, i), config.max_dim);

    let projection = map_instances(n, |i| {
        let x = inst(1, i);
        verify_projection_with(&rule, &x.s_tilde, &x.k, &x.v, x.probe_seed)
    });
    let mut proj: Option<ProjectionReport> = None;
    for r in projection {
        let r = r?;
        proj = Some(match proj {
            None => r,
            Some(acc) => acc.merge(&r),
        });
    }
    let proj = proj.expect("samples > 0");

    let decay = map_instances(n, |i| {
        let x = inst(2, i);
        verify_projection_after_diag_decay(&x.s_tilde, &x.alpha, &x.k, &x.v, x.probe_seed)
            .map(|p| TheoryReport::new("decay_agnostic", p.worst(), TANGENT_TOL, 1))
    });
    let decay = fold_reports("decay_agnostic", TANGENT_TOL, decay)?;

    let line = map_instances(n, |i| {
        let x = inst(3, i);
        let kk = x.k.l2_norm_sq();
        let grid: Vec<f64> = (0..=200).map(|j| j as f64 * 2.5 / (200.0 * kk)).collect();
        line_search_scan(&x.s_tilde, &x.k, &x.v, &grid).map(|s| {
            let dev = if s.brackets { s.max_gap } else { f64::INFINITY };
            (
                TheoryReport::new("line_search", dev, LINE_SEARCH_TOL, 1),
                TheoryReport::new("line_search.parabola", s.parabola_residual, PARABOLA_TOL, 1),
            )
        })
    });
    let mut line_rep = TheoryReport::new("line_search", 0.0, LINE_SEARCH_TOL, 0);
    let mut parabola = TheoryReport::new("line_search.parabola", 0.0, PARABOLA_TOL, 0);
    for r in line {
        let (a, b) = r?;
        line_rep = line_rep.merge(&a);
        parabola = parabola.merge(&b);
    }

    let proximal = map_instances(config.proximal_samples(), |i| {
        let x = inst(4, i);
        // η = 1 with ε = 0 sends μ to infinity; keep η below one there.
        let eta = if x.eps == 0.0 { x.eta.min(0.99) } else { x.eta };
        proximal_check(&x.s_tilde, &x.k, &x.v, eta, x.eps)
    });
    let proximal = fold_reports("proximal", PROXIMAL_TOL, proximal)?;

    let contraction = map_instances(n, |i| {
        let x = inst(5, i);
        contraction_check(&x.s_tilde, &x.k, &x.v, x.eta, x.eps)
    });
    let contraction = fold_reports("contraction", CONTRACTION_TOL, contraction)?;

    let lagrange = map_instances(n, |i| {
        let x = inst(6, i);
        verify_lagrange(&x.s_tilde, &x.k, &x.v)
    });
    let lagrange = fold_reports("lagrange", LAGRANGE_TOL, lagrange)?;

    let reports = vec![
        proj.constraint,
        proj.tangent,
        proj.min_norm,
        decay,
        line_rep,
        parabola,
        proximal,
        contraction,
        lagrange,
    ];
    let pass = reports.iter().all(|r| r.pass);
    Ok(SuiteReport {
        config: config.clone(),
        reports,
        pass,
    })
}
