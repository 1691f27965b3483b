//! Chunkwise-parallel execution of the gated delta recurrence.
//!
//! A chunk of `C` tokens is processed at once. With `B = Diag(β)`, cumulative
//! decays `γ_i = Π_{r≤i} α_r` and the causal decay matrix
//! `A_ij = Π_{r=j+1..i} α_r` (`j ≤ i`), the auxiliary rows `U` solve
//!
//! ```text
//! (I + B (A⁻ ⊙ K Kᵀ)) U = B (V − D_γ K S₀)
//! ```
//!
//! by forward substitution, after which
//!
//! ```text
//! O     = D_γ Q̂ S₀ + (A ⊙ Q̂ Kᵀ) U
//! S_out = γ_C S₀ + Kᵀ Diag(A_C1, …, A_CC) U
//! ```
//!
//! where `Q̂` holds the ℓ2-normalized queries. GDN and KLA share this solver;
//! only the diagonal `B` differs.
//!
//! Decay ratios are never formed as quotients of cumulative products: each
//! `A_ij` is a fresh running product over `(j, i]`, which stays well defined
//! when some `α` are zero or the chunk is long.

use rand::SeedableRng;
use serde::Serialize;

use crate::recurrence::{
    delta_coefficient, run_sequence, Gating, RecurrenceError, Result, RuleKind, StateMatrix,
    TokenInput, UpdateRule,
};
use crate::tensor::{
    dot, forward_substitution_unit, l2_norm_sq, matmul, matmul_nt, outer, Matrix, Real,
    TensorError, Vector,
};

/// Default chunk length.
pub const DEFAULT_CHUNK: usize = 64;

/// Stacked inputs of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkBatch<T: Real = f64> {
    pub k_mat: Matrix<T>,
    pub v_mat: Matrix<T>,
    pub q_mat: Matrix<T>,
    pub alphas: Vector<T>,
    pub etas: Vector<T>,
}

impl<T: Real> ChunkBatch<T> {
    pub fn from_tokens(tokens: &[TokenInput<T>]) -> Result<Self> {
        let first = tokens
            .first()
            .ok_or_else(|| RecurrenceError::Config("empty chunk".into()))?;
        let (d_k, d_v) = (first.k.len(), first.v.len());
        let c = tokens.len();
        let mut k = Vec::with_capacity(c * d_k);
        let mut v = Vec::with_capacity(c * d_v);
        let mut q = Vec::with_capacity(c * d_k);
        for x in tokens {
            x.validate()?;
            if x.k.len() != d_k || x.v.len() != d_v {
                return Err(TensorError::ShapeMismatch {
                    op: "chunk tokens",
                    left: (d_k, d_v),
                    right: (x.k.len(), x.v.len()),
                }
                .into());
            }
            k.extend_from_slice(x.k.as_slice());
            v.extend_from_slice(x.v.as_slice());
            q.extend_from_slice(x.q.as_slice());
        }
        Ok(Self {
            k_mat: Matrix::from_vec_unchecked(c, d_k, k),
            v_mat: Matrix::from_vec_unchecked(c, d_v, v),
            q_mat: Matrix::from_vec_unchecked(c, d_k, q),
            alphas: Vector::from_fn(c, |i| tokens[i].alpha),
            etas: Vector::from_fn(c, |i| tokens[i].eta),
        })
    }

    pub fn len(&self) -> usize {
        self.k_mat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_k(&self) -> usize {
        self.k_mat.cols()
    }

    pub fn d_v(&self) -> usize {
        self.v_mat.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.len();
        if self.v_mat.rows() != c || self.q_mat.rows() != c || self.alphas.len() != c || self.etas.len() != c {
            return Err(RecurrenceError::Config("inconsistent chunk length across fields".into()));
        }
        if self.q_mat.cols() != self.d_k() {
            return Err(TensorError::ShapeMismatch {
                op: "chunk q/k",
                left: self.q_mat.shape(),
                right: self.k_mat.shape(),
            }
            .into());
        }
        for i in 0..c {
            let (a, e) = (self.alphas[i], self.etas[i]);
            if !(a >= T::zero() && a <= T::one()) {
                return Err(RecurrenceError::Range {
                    name: "alpha",
                    value: a.to_f64().unwrap_or(f64::NAN),
                    range: "[0, 1]",
                });
            }
            if !(e > T::zero() && e <= T::one()) {
                return Err(RecurrenceError::Range {
                    name: "eta",
                    value: e.to_f64().unwrap_or(f64::NAN),
                    range: "(0, 1]",
                });
            }
        }
        Ok(())
    }

    /// Effective decay at position `i` under the rule's gating.
    fn decay(&self, rule: &UpdateRule, i: usize) -> T {
        match rule.gating {
            Gating::Dual => self.alphas[i],
            Gating::Single => self.etas[i],
        }
    }
}

/// Decay and coefficient structure of one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkArtifacts<T: Real = f64> {
    /// `γ_i = Π_{r≤i} α_r`.
    pub gammas: Vector<T>,
    /// `β_i`.
    pub b_diag: Vector<T>,
    /// `A_ij = Π_{r=j+1..i} α_r` for `j ≤ i`, zero above the diagonal.
    pub a_full: Matrix<T>,
    /// Strict lower part of `a_full`.
    pub a_strict: Matrix<T>,
    /// Auxiliary rows, present once the system has been solved.
    pub u_mat: Option<Matrix<T>>,
}

fn check_chunk_rule(rule: &UpdateRule) -> Result<()> {
    rule.validate()?;
    match rule.kind {
        RuleKind::Gdn | RuleKind::Kla => Ok(()),
        other => Err(RecurrenceError::Config(format!(
            "chunkwise solver supports gdn and kla, got {other}"
        ))),
    }
}

/// Builds `γ`, `B`, `A` and `A⁻` for the KLA coefficient.
pub fn build_artifacts<T: Real>(chunk: &ChunkBatch<T>, eps: T) -> Result<ChunkArtifacts<T>> {
    build_artifacts_for(&UpdateRule::kla(), chunk, eps, 1)
}

/// Builds the chunk artifacts for `rule`; `start` is the absolute 1-based
/// position of the chunk's first token.
pub fn build_artifacts_for<T: Real>(
    rule: &UpdateRule,
    chunk: &ChunkBatch<T>,
    eps: T,
    start: usize,
) -> Result<ChunkArtifacts<T>> {
    check_chunk_rule(rule)?;
    chunk.validate()?;
    let c = chunk.len();
    let mut gammas = Vector::zeros(c);
    let mut running = T::one();
    for i in 0..c {
        running = running * chunk.decay(rule, i);
        gammas[i] = running;
    }
    let mut b_diag = Vector::zeros(c);
    for i in 0..c {
        let knorm_sq = l2_norm_sq(chunk.k_mat.row(i));
        b_diag[i] = delta_coefficient(rule, chunk.etas[i], knorm_sq, eps, start + i)?;
    }
    let mut a_full = Matrix::zeros(c, c);
    for i in 0..c {
        let mut prod = T::one();
        a_full.set(i, i, prod);
        for j in (0..i).rev() {
            prod = prod * chunk.decay(rule, j + 1);
            a_full.set(i, j, prod);
        }
    }
    let mut a_strict = a_full.clone();
    for i in 0..c {
        a_strict.set(i, i, T::zero());
    }
    Ok(ChunkArtifacts {
        gammas,
        b_diag,
        a_full,
        a_strict,
        u_mat: None,
    })
}

/// `I + B (A⁻ ⊙ K Kᵀ)`.
pub fn system_matrix<T: Real>(chunk: &ChunkBatch<T>, art: &ChunkArtifacts<T>) -> Matrix<T> {
    let c = chunk.len();
    let mut m = Matrix::identity(c);
    for i in 0..c {
        for j in 0..i {
            let g = dot(chunk.k_mat.row(i), chunk.k_mat.row(j));
            m.set(i, j, art.b_diag[i] * art.a_strict.get(i, j) * g);
        }
    }
    m
}

/// Outputs of one chunk solve.
#[derive(Clone, Debug)]
pub struct ChunkSolution<T: Real = f64> {
    pub o_mat: Matrix<T>,
    pub s_out: StateMatrix<T>,
    pub artifacts: ChunkArtifacts<T>,
}

/// KLA chunk solve starting at absolute position 1.
pub fn chunk_solve<T: Real>(s0: &StateMatrix<T>, chunk: &ChunkBatch<T>, eps: T) -> Result<ChunkSolution<T>> {
    chunk_solve_with(&UpdateRule::kla(), s0, chunk, eps, 1)
}

pub fn chunk_solve_with<T: Real>(
    rule: &UpdateRule,
    s0: &StateMatrix<T>,
    chunk: &ChunkBatch<T>,
    eps: T,
    start: usize,
) -> Result<ChunkSolution<T>> {
    if chunk.d_k() != s0.d_k() || chunk.d_v() != s0.d_v() {
        return Err(TensorError::ShapeMismatch {
            op: "chunk_solve",
            left: s0.matrix().shape(),
            right: (chunk.d_k(), chunk.d_v()),
        }
        .into());
    }
    let mut art = build_artifacts_for(rule, chunk, eps, start)?;
    let c = chunk.len();
    let (d_k, d_v) = (s0.d_k(), s0.d_v());
    let s0m = s0.matrix();

    let system = system_matrix(chunk, &art);
    let ks0 = matmul(&chunk.k_mat, s0m)?;
    let mut rhs = Matrix::zeros(c, d_v);
    for i in 0..c {
        let (b, g) = (art.b_diag[i], art.gammas[i]);
        let v_row = chunk.v_mat.row(i);
        let ks_row = ks0.row(i);
        for (j, r) in rhs.row_mut(i).iter_mut().enumerate() {
            *r = b * (v_row[j] - g * ks_row[j]);
        }
    }
    let u = forward_substitution_unit(&system, &rhs);

    let q_hat = normalize_rows(&chunk.q_mat);
    let qs0 = matmul(&q_hat, s0m)?;
    let qk = matmul_nt(&q_hat, &chunk.k_mat)?;
    let mut o_mat = Matrix::zeros(c, d_v);
    for i in 0..c {
        let g = art.gammas[i];
        let row = o_mat.row_mut(i);
        for (o, &x) in row.iter_mut().zip(qs0.row(i)) {
            *o = g * x;
        }
        for j in 0..=i {
            let w = art.a_full.get(i, j) * qk.get(i, j);
            if w == T::zero() {
                continue;
            }
            for (o, &uj) in row.iter_mut().zip(u.row(j)) {
                *o += w * uj;
            }
        }
    }

    let mut s_out = s0m.scaled(art.gammas[c - 1]);
    for j in 0..c {
        let w = art.a_full.get(c - 1, j);
        s_out.rank_one_update(w, chunk.k_mat.row(j), u.row(j));
    }
    debug_assert_eq!(s_out.shape(), (d_k, d_v));
    art.u_mat = Some(u);
    Ok(ChunkSolution {
        o_mat,
        s_out: StateMatrix::from(s_out),
        artifacts: art,
    })
}

fn normalize_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = l2_norm_sq(row).sqrt();
        if n == T::zero() {
            row.fill(T::zero());
        } else {
            let inv = T::one() / n;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
    }
    out
}

/// Outputs of [`run_chunked`].
#[derive(Clone, Debug)]
pub struct ChunkedOutput<T: Real = f64> {
    pub outputs: Matrix<T>,
    pub final_state: StateMatrix<T>,
}

/// Runs a whole sequence chunk by chunk. The last chunk is shortened rather
/// than padded.
pub fn run_chunked<T: Real>(
    rule: &UpdateRule,
    s0: &StateMatrix<T>,
    tokens: &[TokenInput<T>],
    chunk_len: usize,
    eps: T,
) -> Result<ChunkedOutput<T>> {
    check_chunk_rule(rule)?;
    if chunk_len == 0 {
        return Err(RecurrenceError::Config("chunk length must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(RecurrenceError::Config("run_chunked needs a nonempty sequence".into()));
    }
    let mut outputs = Matrix::zeros(tokens.len(), s0.d_v());
    let mut state = s0.clone();
    for (ci, piece) in tokens.chunks(chunk_len).enumerate() {
        let batch = ChunkBatch::from_tokens(piece)?;
        let start = ci * chunk_len;
        let sol = chunk_solve_with(rule, &state, &batch, eps, start + 1)?;
        for i in 0..piece.len() {
            outputs.row_mut(start + i).copy_from_slice(sol.o_mat.row(i));
        }
        state = sol.s_out;
    }
    Ok(ChunkedOutput {
        outputs,
        final_state: state,
    })
}

/// WY factors of one chunk together with their directly evaluated
/// counterparts.
#[derive(Clone, Debug)]
pub struct WyFactors {
    /// `P_i = γ_i I − Σ_{r≤i} A_ir k_r w_rᵀ` (`d_k × d_k`).
    pub p_list: Vec<Matrix>,
    /// `H_i = Σ_{r≤i} A_ir k_r u_rᵀ` (`d_k × d_v`).
    pub h_list: Vec<Matrix>,
    pub w_vecs: Vec<Vector>,
    pub u_vecs: Vec<Vector>,
    /// `P_i = Π_{r=i..1} α_r (I − β_r k_r k_rᵀ)`.
    pub p_direct: Vec<Matrix>,
    /// `H_i = Σ_{j≤i} (Π_{r=i..j+1} α_r (I − β_r k_r k_rᵀ)) β_j k_j v_jᵀ`.
    pub h_direct: Vec<Matrix>,
    pub artifacts: ChunkArtifacts,
}

impl WyFactors {
    /// Largest entrywise gap between WY and direct `P_i`, `H_i`.
    pub fn max_deviation(&self) -> (f64, f64) {
        let gap = |a: &[Matrix], b: &[Matrix]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.max_abs_diff(y).expect("same shape"))
                .fold(0.0, f64::max)
        };
        (gap(&self.p_list, &self.p_direct), gap(&self.h_list, &self.h_direct))
    }
}

/// KLA WY construction.
pub fn wy_build(chunk: &ChunkBatch, eps: f64) -> Result<WyFactors> {
    wy_build_with(&UpdateRule::kla(), chunk, eps)
}

/// Builds `w_r`, `u_r` by their recursions and reconstructs `P_i`, `H_i` from
/// the WY sums; also evaluates `P_i`, `H_i` from their defining products.
pub fn wy_build_with(rule: &UpdateRule, chunk: &ChunkBatch, eps: f64) -> Result<WyFactors> {
    let art = build_artifacts_for(rule, chunk, eps, 1)?;
    let c = chunk.len();
    let (d_k, d_v) = (chunk.d_k(), chunk.d_v());
    let k = |i: usize| chunk.k_mat.row_vector(i);

    let mut w_vecs: Vec<Vector> = Vec::with_capacity(c);
    let mut u_vecs: Vec<Vector> = Vec::with_capacity(c);
    for i in 0..c {
        let ki = k(i);
        let beta = art.b_diag[i];
        let mut w = ki.scaled(art.gammas[i]);
        let mut u = chunk.v_mat.row_vector(i);
        for r in 0..i {
            let coupling = art.a_full.get(i, r) * dot(chunk.k_mat.row(r), ki.as_slice());
            w = w.sub(&w_vecs[r].scaled(coupling))?;
            u = u.sub(&u_vecs[r].scaled(coupling))?;
        }
        w_vecs.push(w.scaled(beta));
        u_vecs.push(u.scaled(beta));
    }

    let mut p_list = Vec::with_capacity(c);
    let mut h_list = Vec::with_capacity(c);
    for i in 0..c {
        let mut p = Matrix::identity(d_k).scaled(art.gammas[i]);
        let mut h = Matrix::zeros(d_k, d_v);
        for r in 0..=i {
            let a = art.a_full.get(i, r);
            p.axpy(-a, &outer(&k(r), &w_vecs[r]))?;
            h.axpy(a, &outer(&k(r), &u_vecs[r]))?;
        }
        p_list.push(p);
        h_list.push(h);
    }

    // Transition of token r: α_r (I − β_r k_r k_rᵀ).
    let transition = |r: usize| -> Matrix {
        let kr = k(r);
        Matrix::identity(d_k)
            .sub(&outer(&kr, &kr).scaled(art.b_diag[r]))
            .expect("square")
            .scaled(chunk.decay(rule, r))
    };
    let mut p_direct = Vec::with_capacity(c);
    let mut h_direct = Vec::with_capacity(c);
    for i in 0..c {
        let mut p = Matrix::identity(d_k);
        for r in 0..=i {
            p = matmul(&transition(r), &p)?;
        }
        p_direct.push(p);
        let mut h = Matrix::zeros(d_k, d_v);
        for j in 0..=i {
            let mut term = outer(&k(j), &chunk.v_mat.row_vector(j)).scaled(art.b_diag[j]);
            for r in j + 1..=i {
                term = matmul(&transition(r), &term)?;
            }
            h = h.add(&term)?;
        }
        h_direct.push(h);
    }

    Ok(WyFactors {
        p_list,
        h_list,
        w_vecs,
        u_vecs,
        p_direct,
        h_direct,
        artifacts: art,
    })
}

/// Per-position agreement of the combined WY state with the tokenwise states.
#[derive(Clone, Debug, Serialize)]
pub struct CombinedWyReport {
    /// `max |S_i(WY) − S_i(tokenwise)|` for each position.
    pub per_position: Vec<f64>,
    pub max_deviation: f64,
    /// `max |û − U|` between the combined auxiliary rows and the
    /// triangular-solve rows.
    pub u_hat_vs_solve: f64,
}

/// Checks `S_i = γ_i S₀ + Σ_{r≤i} A_ir k_r û_rᵀ` with `û_r = u_r − S₀ᵀ w_r`
/// against the tokenwise recursion at every position.
pub fn verify_combined_wy(s0: &StateMatrix, chunk: &ChunkBatch, eps: f64) -> Result<CombinedWyReport> {
    verify_combined_wy_with(&UpdateRule::kla(), s0, chunk, eps)
}

pub fn verify_combined_wy_with(
    rule: &UpdateRule,
    s0: &StateMatrix,
    chunk: &ChunkBatch,
    eps: f64,
) -> Result<CombinedWyReport> {
    let wy = wy_build_with(rule, chunk, eps)?;
    let c = chunk.len();
    let s0m = s0.matrix();
    let u_hat: Vec<Vector> = (0..c)
        .map(|r| wy.u_vecs[r].sub(&s0m.tmatvec(&wy.w_vecs[r])?))
        .collect::<std::result::Result<_, _>>()?;

    let tokens = chunk_tokens(chunk);
    let reference = run_sequence(rule, s0, &tokens, eps, true)?;
    let states = wy_states_from(&wy, s0, chunk, &u_hat);
    let per_position = states
        .iter()
        .zip(&reference.trace)
        .map(|(s, r)| s.max_abs_diff(r.new_state.matrix()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let solved = chunk_solve_with(rule, s0, chunk, eps, 1)?;
    let u = solved.artifacts.u_mat.expect("solved");
    let u_hat_vs_solve = (0..c)
        .map(|r| {
            Vector::from(u.row(r).to_vec())
                .sub(&u_hat[r])
                .map(|d| d.max_abs())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(CombinedWyReport {
        max_deviation: per_position.iter().copied().fold(0.0, f64::max),
        per_position,
        u_hat_vs_solve,
    })
}

fn wy_states_from(wy: &WyFactors, s0: &StateMatrix, chunk: &ChunkBatch, u_hat: &[Vector]) -> Vec<Matrix> {
    let art = &wy.artifacts;
    (0..chunk.len())
        .map(|i| {
            let mut s = s0.matrix().scaled(art.gammas[i]);
            for r in 0..=i {
                s.rank_one_update(art.a_full.get(i, r), chunk.k_mat.row(r), u_hat[r].as_slice());
            }
            s
        })
        .collect()
}

/// States `S_1 … S_C` of one chunk rebuilt from the WY factors.
pub fn wy_states_with(rule: &UpdateRule, s0: &StateMatrix, chunk: &ChunkBatch, eps: f64) -> Result<Vec<Matrix>> {
    let wy = wy_build_with(rule, chunk, eps)?;
    let u_hat: Vec<Vector> = (0..chunk.len())
        .map(|r| wy.u_vecs[r].sub(&s0.matrix().tmatvec(&wy.w_vecs[r])?))
        .collect::<std::result::Result<_, _>>()?;
    Ok(wy_states_from(&wy, s0, chunk, &u_hat))
}

/// Deviations between the three execution paths on one random sequence.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceCase {
    pub rule: RuleKind,
    pub chunk: usize,
    pub length: usize,
    /// Chunk-boundary states, chunkwise vs tokenwise.
    pub state_deviation: f64,
    /// Per-token outputs, chunkwise vs tokenwise.
    pub output_deviation: f64,
    /// Every per-token state, WY reconstruction vs tokenwise.
    pub wy_deviation: f64,
}

impl EquivalenceCase {
    pub fn max_deviation(&self) -> f64 {
        self.state_deviation.max(self.output_deviation).max(self.wy_deviation)
    }
}

/// Runs one random sequence of `length` tokens through all three paths.
pub fn equivalence_case(
    rule: &UpdateRule,
    chunk_len: usize,
    length: usize,
    d_k: usize,
    d_v: usize,
    eps: f64,
    seed: u64,
) -> Result<EquivalenceCase> {
    check_chunk_rule(rule)?;
    if chunk_len == 0 || length == 0 || d_k == 0 || d_v == 0 {
        return Err(RecurrenceError::Config("chunk, length and dimensions must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<TokenInput> = crate::sampling::random_tokens(&mut rng, length, d_k, d_v);
    let s0 = StateMatrix::from(crate::sampling::random_matrix(&mut rng, d_k, d_v));
    let reference = run_sequence(rule, &s0, &tokens, eps, true)?;
    let (mut state_dev, mut out_dev, mut wy_dev) = (0.0f64, 0.0f64, 0.0f64);
    let mut state = s0.clone();
    for (ci, piece) in tokens.chunks(chunk_len).enumerate() {
        let start = ci * chunk_len;
        let batch = ChunkBatch::from_tokens(piece)?;
        // the WY path restarts from the tokenwise state so its error is local
        let wy_s0 = if start == 0 { s0.clone() } else { reference.trace[start - 1].new_state.clone() };
        for (i, s) in wy_states_with(rule, &wy_s0, &batch, eps)?.iter().enumerate() {
            wy_dev = wy_dev.max(s.max_abs_diff(reference.trace[start + i].new_state.matrix())?);
        }
        let sol = chunk_solve_with(rule, &state, &batch, eps, start + 1)?;
        for i in 0..piece.len() {
            for (a, b) in sol.o_mat.row(i).iter().zip(reference.outputs.row(start + i)) {
                out_dev = out_dev.max((a - b).abs());
            }
        }
        state = sol.s_out;
        let last = start + piece.len() - 1;
        state_dev = state_dev.max(state.matrix().max_abs_diff(reference.trace[last].new_state.matrix())?);
    }
    Ok(EquivalenceCase {
        rule: rule.kind,
        chunk: chunk_len,
        length,
        state_deviation: state_dev,
        output_deviation: out_dev,
        wy_deviation: wy_dev,
    })
}

/// Sweeps rules × chunk lengths × sequence lengths.
pub fn equivalence_sweep(
    rules: &[UpdateRule],
    chunks: &[usize],
    lengths: &[usize],
    d_k: usize,
    d_v: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<EquivalenceCase>> {
    let mut cases = Vec::with_capacity(rules.len() * chunks.len() * lengths.len());
    for rule in rules {
        for &c in chunks {
            for &l in lengths {
                let case_seed = seed ^ ((c as u64) << 20) ^ ((l as u64) << 36) ^ rule.kind as u64;
                cases.push(equivalence_case(rule, c, l, d_k, d_v, eps, case_seed)?);
            }
        }
    }
    Ok(cases)
}

/// Unstacks a chunk back into tokens.
pub fn chunk_tokens<T: Real>(chunk: &ChunkBatch<T>) -> Vec<TokenInput<T>> {
    (0..chunk.len())
        .map(|i| TokenInput {
            k: chunk.k_mat.row_vector(i),
            v: chunk.v_mat.row_vector(i),
            q: chunk.q_mat.row_vector(i),
            alpha: chunk.alphas[i],
            eta: chunk.etas[i],
            alpha_diag: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrence::{step, Normalization, SequenceFactor};
    use crate::sampling::{random_matrix, random_tokens};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_chunk(seed: u64, c: usize, d_k: usize, d_v: usize) -> (StateMatrix, ChunkBatch, Vec<TokenInput>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = StateMatrix::from(random_matrix(&mut rng, d_k, d_v));
        let tokens = random_tokens(&mut rng, c, d_k, d_v);
        let batch = ChunkBatch::from_tokens(&tokens).unwrap();
        (s0, batch, tokens)
    }

    #[test]
    fn artifacts_all_ones_decay() {
        let (_, mut batch, _) = random_chunk(1, 5, 3, 2);
        batch.alphas = Vector::from(vec![1.0; 5]);
        let art = build_artifacts(&batch, 1e-6).unwrap();
        assert_eq!(art.gammas, Vector::from(vec![1.0; 5]));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(art.a_full.get(i, j), if j <= i { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn artifacts_single_token() {
        let (_, batch, _) = random_chunk(2, 1, 3, 2);
        let art = build_artifacts(&batch, 1e-6).unwrap();
        assert_eq!(art.a_full, Matrix::identity(1));
        assert_eq!(art.a_strict, Matrix::zeros(1, 1));
    }

    #[test]
    fn artifacts_half_decay() {
        let (_, mut batch, _) = random_chunk(3, 2, 3, 2);
        batch.alphas = Vector::from(vec![0.5, 0.5]);
        let art = build_artifacts(&batch, 1e-6).unwrap();
        assert_eq!(art.gammas, Vector::from(vec![0.5, 0.25]));
        assert_eq!(art.a_full.get(1, 0), 0.5);
        let k0 = batch.k_mat.row_vector(0);
        assert_eq!(art.b_diag[0], batch.etas[0] / (k0.l2_norm_sq() + 1e-6));
    }

    #[test]
    fn zero_decay_does_not_produce_nan() {
        let (s0, mut batch, _) = random_chunk(4, 6, 3, 2);
        batch.alphas[2] = 0.0;
        let sol = chunk_solve(&s0, &batch, 1e-6).unwrap();
        assert!(sol.o_mat.is_finite() && sol.s_out.matrix().is_finite());
        let tokens = chunk_tokens(&batch);
        let reference = run_sequence(&UpdateRule::kla(), &s0, &tokens, 1e-6, false).unwrap();
        assert!(sol.s_out.matrix().max_abs_diff(reference.final_state.matrix()).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_chunk_equals_step() {
        let (s0, batch, tokens) = random_chunk(5, 1, 4, 3);
        let sol = chunk_solve(&s0, &batch, 1e-6).unwrap();
        let out = step(&UpdateRule::kla(), &s0, &tokens[0], 1e-6).unwrap();
        assert!(sol.s_out.matrix().max_abs_diff(out.new_state.matrix()).unwrap() < 1e-14);
        assert!(Vector::from(sol.o_mat.row(0).to_vec()).sub(&out.o).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn vanishing_writes_leave_pure_decay() {
        let (s0, mut batch, _) = random_chunk(6, 7, 4, 3);
        batch.etas = Vector::from(vec![1e-300; 7]);
        let sol = chunk_solve(&s0, &batch, 1e-6).unwrap();
        let art = &sol.artifacts;
        assert!(art.u_mat.as_ref().unwrap().max_abs() < 1e-250);
        let expected_state = s0.matrix().scaled(art.gammas[6]);
        assert!(sol.s_out.matrix().max_abs_diff(&expected_state).unwrap() < 1e-15);
        let q_hat = normalize_rows(&batch.q_mat);
        let expected_o = crate::tensor::diag_from(&art.gammas)
            .matmul(&q_hat.matmul(s0.matrix()).unwrap())
            .unwrap();
        assert!(sol.o_mat.max_abs_diff(&expected_o).unwrap() < 1e-15);
    }

    #[test]
    fn chunk_matches_tokenwise_random_c16() {
        let (s0, batch, tokens) = random_chunk(7, 16, 8, 8);
        let sol = chunk_solve(&s0, &batch, 1e-6).unwrap();
        let reference = run_sequence(&UpdateRule::kla(), &s0, &tokens, 1e-6, false).unwrap();
        assert!(sol.o_mat.max_abs_diff(&reference.outputs).unwrap() <= 1e-9);
        assert!(sol.s_out.matrix().max_abs_diff(reference.final_state.matrix()).unwrap() <= 1e-9);
    }

    #[test]
    fn system_matrix_is_unit_lower_triangular() {
        let (_, batch, _) = random_chunk(8, 12, 5, 3);
        for rule in [UpdateRule::kla(), UpdateRule::gdn()] {
            let art = build_artifacts_for(&rule, &batch, 1e-6, 1).unwrap();
            let m = system_matrix(&batch, &art);
            for i in 0..12 {
                assert_eq!(m.get(i, i), 1.0);
                for j in i + 1..12 {
                    assert_eq!(m.get(i, j), 0.0);
                }
            }
            // the checked solver accepts it
            assert!(crate::tensor::forward_substitution(&m, &Matrix::zeros(12, 1)).is_ok());
        }
    }

    #[test]
    fn run_chunked_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s0 = StateMatrix::from(random_matrix(&mut rng, 4, 3));
        let tokens = random_tokens(&mut rng, 10, 4, 3);
        let rule = UpdateRule::kla();
        let whole = run_chunked(&rule, &s0, &tokens, 32, 1e-6).unwrap();
        let direct = chunk_solve(&s0, &ChunkBatch::from_tokens(&tokens).unwrap(), 1e-6).unwrap();
        assert_eq!(whole.outputs, direct.o_mat);
        let ones = run_chunked(&rule, &s0, &tokens, 1, 1e-6).unwrap();
        let tokenwise = run_sequence(&rule, &s0, &tokens, 1e-6, false).unwrap();
        assert!(ones.outputs.max_abs_diff(&tokenwise.outputs).unwrap() < 1e-14);
        assert!(run_chunked(&rule, &s0, &tokens, 0, 1e-6).is_err());
        assert!(run_chunked(&rule, &s0, &[], 4, 1e-6).is_err());
        let unsupported = UpdateRule::new(RuleKind::DeltaNet);
        assert!(matches!(
            run_chunked(&unsupported, &s0, &tokens, 4, 1e-6),
            Err(RecurrenceError::Config(_))
        ));
    }

    #[test]
    fn coefficient_substitution_covers_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s0 = StateMatrix::from(random_matrix(&mut rng, 5, 4));
        let tokens = random_tokens(&mut rng, 37, 5, 4);
        let rules = [
            UpdateRule::gdn(),
            UpdateRule::kla().with_normalization(Normalization::KeyNormOnly),
            UpdateRule::kla().with_normalization(Normalization::LearnedScalar(0.7)),
            UpdateRule::kla().with_gating(Gating::Single),
            UpdateRule::kla().with_sequence_factor(SequenceFactor::InvSqrtT),
        ];
        for rule in rules {
            let a = run_chunked(&rule, &s0, &tokens, 8, 1e-6).unwrap();
            let b = run_sequence(&rule, &s0, &tokens, 1e-6, false).unwrap();
            assert!(a.outputs.max_abs_diff(&b.outputs).unwrap() <= 1e-9, "{rule:?}");
            assert!(a.final_state.matrix().max_abs_diff(b.final_state.matrix()).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn wy_base_case() {
        let (_, batch, _) = random_chunk(11, 3, 4, 2);
        let wy = wy_build(&batch, 1e-6).unwrap();
        let art = &wy.artifacts;
        let k1 = batch.k_mat.row_vector(0);
        let a1 = batch.alphas[0];
        let b1 = art.b_diag[0];
        let expected_w = k1.scaled(b1 * a1);
        assert!(wy.w_vecs[0].sub(&expected_w).unwrap().max_abs() < 1e-15);
        let expected_p = Matrix::identity(4).sub(&outer(&k1, &k1).scaled(b1)).unwrap().scaled(a1);
        assert!(wy.p_list[0].max_abs_diff(&expected_p).unwrap() < 1e-14);
    }

    #[test]
    fn wy_without_writes() {
        let (_, mut batch, _) = random_chunk(12, 5, 3, 2);
        batch.etas = Vector::from(vec![1e-300; 5]);
        let wy = wy_build(&batch, 1e-6).unwrap();
        for i in 0..5 {
            let gi = wy.artifacts.gammas[i];
            assert!(wy.p_list[i].max_abs_diff(&Matrix::identity(3).scaled(gi)).unwrap() < 1e-250);
            assert!(wy.h_list[i].max_abs() < 1e-250);
            assert!(wy.w_vecs[i].max_abs() < 1e-250 && wy.u_vecs[i].max_abs() < 1e-250);
        }
    }

    #[test]
    fn wy_matches_direct_products_c8() {
        let (_, batch, _) = random_chunk(13, 8, 5, 3);
        let (p, h) = wy_build(&batch, 1e-6).unwrap().max_deviation();
        assert!(p <= 1e-10 && h <= 1e-10, "p {p} h {h}");
    }

    #[test]
    fn combined_wy_cases() {
        let (s0, batch, _) = random_chunk(14, 1, 4, 3);
        let r = verify_combined_wy(&s0, &batch, 1e-6).unwrap();
        assert!(r.max_deviation < 1e-15);
        let (_, batch, _) = random_chunk(15, 6, 4, 3);
        let zero = StateMatrix::zeros(4, 3);
        let r = verify_combined_wy(&zero, &batch, 1e-6).unwrap();
        let wy = wy_build(&batch, 1e-6).unwrap();
        // with S₀ = 0 the combined form is H_i alone
        let reference = run_sequence(&UpdateRule::kla(), &zero, &chunk_tokens(&batch), 1e-6, true).unwrap();
        for i in 0..6 {
            assert!(wy.h_list[i].max_abs_diff(reference.trace[i].new_state.matrix()).unwrap() < 1e-12);
        }
        assert!(r.max_deviation < 1e-12);
        let (s0, batch, _) = random_chunk(16, 32, 6, 4);
        let r = verify_combined_wy(&s0, &batch, 1e-6).unwrap();
        assert!(r.max_deviation <= 1e-9 && r.u_hat_vs_solve <= 1e-9, "{r:?}");
    }

    #[test]
    fn f32_chunk_path_tracks_f64() {
        let (s0, batch, tokens) = random_chunk(17, 16, 8, 8);
        let tokens32: Vec<TokenInput<f32>> = tokens
            .iter()
            .map(|x| TokenInput {
                k: Vector::from(x.k.as_slice().iter().map(|&a| a as f32).collect::<Vec<_>>()),
                v: Vector::from(x.v.as_slice().iter().map(|&a| a as f32).collect::<Vec<_>>()),
                q: Vector::from(x.q.as_slice().iter().map(|&a| a as f32).collect::<Vec<_>>()),
                alpha: x.alpha as f32,
                eta: x.eta as f32,
                alpha_diag: None,
            })
            .collect();
        let s32 = StateMatrix::from(s0.matrix().cast::<f32>());
        let a = run_chunked(&UpdateRule::kla(), &s32, &tokens32, 4, 1e-6f32).unwrap();
        let b = chunk_solve(&s0, &batch, 1e-6).unwrap();
        assert!(a.outputs.cast::<f64>().max_abs_diff(&b.o_mat).unwrap() < 1e-3);
    }

    #[test]
    fn small_equivalence_sweep() {
        let cases = equivalence_sweep(&[UpdateRule::kla(), UpdateRule::gdn()], &[1, 3, 8], &[1, 7, 20], 4, 3, 1e-6, 5).unwrap();
        assert_eq!(cases.len(), 18);
        for c in &cases {
            assert!(c.max_deviation() < 1e-10, "{c:?}");
        }
        assert!(equivalence_case(&UpdateRule::new(RuleKind::DeltaNet), 4, 8, 2, 2, 1e-6, 0).is_err());
        assert!(equivalence_case(&UpdateRule::kla(), 0, 8, 2, 2, 1e-6, 0).is_err());
    }
}
