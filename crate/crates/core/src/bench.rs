//! Prefill and decode timing for the tokenwise and chunkwise paths.
//!
//! Timings use the monotonic clock. Every configuration is warmed up, then
//! repetitions are interleaved across rules and paths so that slow drift in
//! machine load affects all of them alike. Nothing here spawns threads.

use std::fmt;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::{run_chunked, DEFAULT_CHUNK};
use crate::recurrence::{
    run_sequence, step_in_place, RecurrenceError, RuleKind, StateMatrix, StepScratch, TokenInput, TokenView,
    UpdateRule,
};
use crate::sampling::random_tokens;
use crate::tensor::{Matrix, Precision, Real};

pub type Result<T> = std::result::Result<T, RecurrenceError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPath {
    Tokenwise,
    Chunkwise,
}

impl ExecPath {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecPath::Tokenwise => "tokenwise",
            ExecPath::Chunkwise => "chunkwise",
        }
    }
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecPath {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tokenwise" => Ok(ExecPath::Tokenwise),
            "chunkwise" => Ok(ExecPath::Chunkwise),
            other => Err(format!("unknown path {other}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub chunk: usize,
    pub eps: f64,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_k: 64,
            d_v: 64,
            chunk: DEFAULT_CHUNK,
            eps: crate::recurrence::DEFAULT_EPS,
            reps: 5,
            warmup: 2,
            seed: 42,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 5 {
            return Err(RecurrenceError::Config("at least 5 repetitions are required".into()));
        }
        if self.d_k == 0 || self.d_v == 0 || self.chunk == 0 {
            return Err(RecurrenceError::Config("dimensions and chunk length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rule: RuleKind,
    pub path: ExecPath,
    /// Prefill length, or context length for decode results.
    pub length: usize,
    pub precision: Precision,
    pub reps: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
    pub tok_per_s: f64,
    pub tpot_ms: f64,
}

impl BenchResult {
    /// `tokens` is the number of tokens processed per timed run.
    fn from_samples(rule: RuleKind, path: ExecPath, length: usize, precision: Precision, ms: &[f64], tokens: usize) -> Self {
        let (min, median, max) = summarize(ms);
        Self {
            rule,
            path,
            length,
            precision,
            reps: ms.len(),
            min_ms: min,
            median_ms: median,
            max_ms: max,
            tok_per_s: tokens as f64 / (median / 1e3),
            tpot_ms: median / tokens as f64,
        }
    }
}

/// `(min, median, max)`; the median of an even count is the mean of the two
/// middle values.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    assert!(!samples.is_empty(), "no samples");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    (s[0], median, s[n - 1])
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs a full prefill and returns the final state.
pub fn prefill<T: Real>(
    rule: &UpdateRule,
    path: ExecPath,
    tokens: &[TokenInput<T>],
    d_k: usize,
    d_v: usize,
    chunk: usize,
    eps: T,
) -> Result<StateMatrix<T>> {
    let s0 = StateMatrix::zeros(d_k, d_v);
    match path {
        ExecPath::Tokenwise => Ok(run_sequence(rule, &s0, tokens, eps, false)?.final_state),
        ExecPath::Chunkwise => Ok(run_chunked(rule, &s0, tokens, chunk, eps)?.final_state),
    }
}

/// Median-of-reps prefill latency for every rule × path × length. Lengths of
/// zero are skipped. Repetitions cycle through every combination, lengths
/// included, so drift in machine speed lands on all ratios alike.
pub fn bench_prefill<T: Real>(
    rules: &[UpdateRule],
    paths: &[ExecPath],
    lengths: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    let eps = T::lit(cfg.eps);
    let lengths: Vec<usize> = lengths.iter().copied().filter(|&l| l > 0).collect();
    let inputs: Vec<Vec<TokenInput<T>>> = lengths
        .iter()
        .map(|&len| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
            random_tokens(&mut rng, len, cfg.d_k, cfg.d_v)
        })
        .collect();
    let combos: Vec<(usize, UpdateRule, ExecPath)> = (0..lengths.len())
        .flat_map(|li| rules.iter().flat_map(move |&r| paths.iter().map(move |&p| (li, r, p))))
        .collect();
    let run = |(li, rule, path): (usize, UpdateRule, ExecPath)| -> Result<f64> {
        let mut res = Ok(());
        let ms = time_ms(|| {
            res = prefill(&rule, path, black_box(&inputs[li]), cfg.d_k, cfg.d_v, cfg.chunk, eps).map(|s| {
                black_box(s);
            });
        });
        res.map(|_| ms)
    };
    for _ in 0..cfg.warmup {
        for &c in &combos {
            run(c)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.reps); combos.len()];
    for _ in 0..cfg.reps {
        for (i, &c) in combos.iter().enumerate() {
            samples[i].push(run(c)?);
        }
    }
    Ok(combos
        .into_iter()
        .zip(samples)
        .map(|((li, rule, path), ms)| {
            BenchResult::from_samples(rule.kind, path, lengths[li], T::PRECISION, &ms, lengths[li])
        })
        .collect())
}

/// Recurrent decoder holding the state and all per-token buffers, so that
/// [`Decoder::step`] never allocates.
pub struct Decoder<T: Real> {
    rule: UpdateRule,
    state: Matrix<T>,
    scratch: StepScratch<T>,
    out: Vec<T>,
    eps: T,
    position: usize,
}

impl<T: Real> Decoder<T> {
    pub fn new(rule: UpdateRule, state: StateMatrix<T>, eps: T, position: usize) -> Result<Self> {
        rule.validate()?;
        let d_v = state.d_v();
        Ok(Self {
            rule,
            state: state.into_matrix(),
            scratch: StepScratch::new(d_v),
            out: vec![T::zero(); d_v],
            eps,
            position,
        })
    }

    /// Consumes one token and returns its readout.
    pub fn step(&mut self, x: TokenView<'_, T>) -> Result<&[T]> {
        self.position += 1;
        step_in_place(&self.rule, &mut self.state, x, self.eps, self.position, &mut self.scratch, &mut self.out)?;
        Ok(&self.out)
    }

    pub fn state(&self) -> &Matrix<T> {
        &self.state
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Bytes held by the recurrent state.
    pub fn state_bytes(&self) -> usize {
        self.state.as_slice().len() * std::mem::size_of::<T>()
    }
}

/// Bytes of a `d_k × d_v` state; identical for every scalar-gated rule.
pub fn state_bytes<T: Real>(d_k: usize, d_v: usize) -> usize {
    d_k * d_v * std::mem::size_of::<T>()
}

/// Builds the state for `context` tokens by tokenwise prefill, drawing each
/// token on the fly so long contexts need no token buffer.
pub fn decoder_after_context<T: Real>(rule: &UpdateRule, context: usize, cfg: &BenchConfig) -> Result<Decoder<T>> {
    let mut dec = Decoder::new(*rule, StateMatrix::zeros(cfg.d_k, cfg.d_v), T::lit(cfg.eps), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0de ^ context as u64);
    for _ in 0..context {
        let x = crate::sampling::random_token::<T, _>(&mut rng, cfg.d_k, cfg.d_v);
        dec.step(TokenView::from(&x))?;
    }
    Ok(dec)
}

/// Per-token decode cost after a prefill of each context length.
/// Repetitions cycle through every rule × context and restart from the
/// prefilled state.
pub fn bench_decode<T: Real>(
    rules: &[UpdateRule],
    contexts: &[usize],
    gen_tokens: usize,
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    cfg.validate()?;
    if gen_tokens == 0 {
        return Err(RecurrenceError::Config("gen_tokens must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e4);
    let gen: Vec<TokenInput<T>> = random_tokens(&mut rng, gen_tokens, cfg.d_k, cfg.d_v);
    let combos: Vec<(usize, UpdateRule)> = contexts
        .iter()
        .flat_map(|&ctx| rules.iter().map(move |&r| (ctx, r)))
        .collect();
    let prefilled: Vec<Decoder<T>> = combos
        .iter()
        .map(|(ctx, r)| decoder_after_context(r, *ctx, cfg))
        .collect::<Result<_>>()?;
    let mut work: Vec<Decoder<T>> = prefilled
        .iter()
        .map(|d| Decoder::new(d.rule, StateMatrix::from(d.state().clone()), d.eps, d.position()))
        .collect::<Result<_>>()?;
    let mut run = |i: usize| -> Result<f64> {
        work[i].state.as_mut_slice().copy_from_slice(prefilled[i].state.as_slice());
        work[i].position = prefilled[i].position;
        let dec = &mut work[i];
        let t = Instant::now();
        for x in &gen {
            black_box(dec.step(TokenView::from(x))?);
        }
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..cfg.warmup {
        for i in 0..combos.len() {
            run(i)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.reps); combos.len()];
    for _ in 0..cfg.reps {
        for (i, s) in samples.iter_mut().enumerate() {
            s.push(run(i)?);
        }
    }
    Ok(combos
        .into_iter()
        .zip(samples)
        .map(|((ctx, rule), ms)| {
            BenchResult::from_samples(rule.kind, ExecPath::Tokenwise, ctx, T::PRECISION, &ms, gen_tokens)
        })
        .collect())
}

pub const CSV_HEADER: [&str; 10] = [
    "rule", "path", "length", "precision", "reps", "min_ms", "median_ms", "max_ms", "tok_per_s", "tpot_ms",
];

pub fn write_csv(path: &Path, results: &[BenchResult]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.write_record([
            r.rule.name().to_string(),
            r.path.to_string(),
            r.length.to_string(),
            r.precision.as_str().to_string(),
            r.reps.to_string(),
            format!("{:.6}", r.min_ms),
            format!("{:.6}", r.median_ms),
            format!("{:.6}", r.max_ms),
            format!("{:.3}", r.tok_per_s),
            format!("{:.9}", r.tpot_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn find(results: &[BenchResult], rule: RuleKind, path: ExecPath, length: usize) -> Option<&BenchResult> {
    results
        .iter()
        .find(|r| r.rule == rule && r.path == path && r.length == length)
}

/// `median(a) / median(b)` per length where both rules were measured.
pub fn rule_ratios(results: &[BenchResult], a: RuleKind, b: RuleKind, path: ExecPath) -> Vec<(usize, f64)> {
    let mut lengths: Vec<usize> = results.iter().filter(|r| r.rule == a && r.path == path).map(|r| r.length).collect();
    lengths.dedup();
    lengths
        .into_iter()
        .filter_map(|l| Some((l, find(results, a, path, l)?.median_ms / find(results, b, path, l)?.median_ms)))
        .collect()
}

/// `median(2L) / median(L)` for every measured pair of lengths `(L, 2L)`.
pub fn doubling_ratios(results: &[BenchResult], rule: RuleKind, path: ExecPath) -> Vec<(usize, f64)> {
    results
        .iter()
        .filter(|r| r.rule == rule && r.path == path)
        .filter_map(|r| Some((r.length, find(results, rule, path, 2 * r.length)?.median_ms / r.median_ms)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> BenchConfig {
        BenchConfig {
            d_k: 8,
            d_v: 8,
            chunk: 4,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn summarize_odd_and_even() {
        assert_eq!(summarize(&[3.0, 1.0, 2.0]), (1.0, 2.0, 3.0));
        assert_eq!(summarize(&[4.0, 1.0, 2.0, 3.0]), (1.0, 2.5, 4.0));
    }

    #[test]
    fn prefill_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens: Vec<TokenInput> = random_tokens(&mut rng, 37, 6, 5);
        for rule in [UpdateRule::kla(), UpdateRule::gdn()] {
            let a = prefill(&rule, ExecPath::Tokenwise, &tokens, 6, 5, 8, 1e-6).unwrap();
            let b = prefill(&rule, ExecPath::Chunkwise, &tokens, 6, 5, 8, 1e-6).unwrap();
            assert!(a.matrix().max_abs_diff(b.matrix()).unwrap() < 1e-10);
        }
    }

    #[test]
    fn zero_length_is_skipped_and_results_are_ordered() {
        let r = bench_prefill::<f64>(
            &[UpdateRule::kla(), UpdateRule::gdn()],
            &[ExecPath::Tokenwise, ExecPath::Chunkwise],
            &[0, 16],
            &quick(),
        )
        .unwrap();
        assert_eq!(r.len(), 4);
        for x in &r {
            assert_eq!(x.length, 16);
            assert!(x.min_ms <= x.median_ms && x.median_ms <= x.max_ms);
            assert_eq!(x.reps, 5);
        }
        assert_eq!(rule_ratios(&r, RuleKind::Kla, RuleKind::Gdn, ExecPath::Chunkwise).len(), 1);
    }

    #[test]
    fn too_few_reps_rejected() {
        let cfg = BenchConfig { reps: 4, ..quick() };
        assert!(bench_prefill::<f64>(&[UpdateRule::kla()], &[ExecPath::Tokenwise], &[4], &cfg).is_err());
    }

    #[test]
    fn single_generated_token_tpot_is_wall_time() {
        let r = bench_decode::<f32>(&[UpdateRule::kla()], &[8], 1, &quick()).unwrap();
        assert_eq!(r[0].tpot_ms, r[0].median_ms);
        assert_eq!(r[0].precision, Precision::F32);
    }

    #[test]
    fn decode_state_sizes_match_across_rules() {
        let cfg = quick();
        let kla = decoder_after_context::<f64>(&UpdateRule::kla(), 3, &cfg).unwrap();
        let gdn = decoder_after_context::<f64>(&UpdateRule::gdn(), 3, &cfg).unwrap();
        assert_eq!(kla.state_bytes(), gdn.state_bytes());
        assert_eq!(kla.state_bytes(), state_bytes::<f64>(8, 8));
        assert_eq!(kla.position(), 3);
    }

    #[test]
    fn decoder_matches_sequence_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens: Vec<TokenInput> = random_tokens(&mut rng, 12, 4, 3);
        let rule = UpdateRule::kla();
        let reference = run_sequence(&rule, &StateMatrix::zeros(4, 3), &tokens, 1e-6, false).unwrap();
        let mut dec = Decoder::new(rule, StateMatrix::zeros(4, 3), 1e-6, 0).unwrap();
        for (t, x) in tokens.iter().enumerate() {
            let o = dec.step(TokenView::from(x)).unwrap();
            for (j, &y) in o.iter().enumerate() {
                assert!((y - reference.outputs.get(t, j)).abs() < 1e-14);
            }
        }
        assert!(dec.state().max_abs_diff(reference.final_state.matrix()).unwrap() < 1e-14);
    }

    #[test]
    fn doubling_pairs() {
        let mk = |length, median_ms| BenchResult {
            rule: RuleKind::Kla,
            path: ExecPath::Chunkwise,
            length,
            precision: Precision::F64,
            reps: 5,
            min_ms: median_ms,
            median_ms,
            max_ms: median_ms,
            tok_per_s: 0.0,
            tpot_ms: 0.0,
        };
        let r = vec![mk(64, 1.0), mk(128, 2.2), mk(256, 4.0), mk(1000, 1.0)];
        assert_eq!(
            doubling_ratios(&r, RuleKind::Kla, ExecPath::Chunkwise),
            vec![(64, 2.2), (128, 4.0 / 2.2)]
        );
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let r = bench_decode::<f64>(&[UpdateRule::gdn()], &[4], 3, &quick()).unwrap();
        write_csv(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("gdn,tokenwise,4,f64,5,"));
    }
}
