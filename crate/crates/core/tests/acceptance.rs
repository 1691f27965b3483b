//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs without the libtest harness so criteria execute one at a time
//! and the timing-based ones see an otherwise idle process.
//!
//! The reference computations here (direct WY products, the naive recurrence,
//! central differences and the task simulators) are written out from the
//! definitions and share no code with the library paths they check.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kla_core::autodiff::model::{grad, loss, Batch, LayerParams, ModelConfig};
use kla_core::autodiff::tape::SeqShape;
use kla_core::autodiff::train::{evaluate_model, train_from, OptimConfig, Schedule};
use kla_core::bench::{bench_decode, bench_prefill, doubling_ratios, rule_ratios, BenchConfig, ExecPath};
use kla_core::chunk::{equivalence_sweep, wy_build_with, ChunkBatch};
use kla_core::recurrence::{run_sequence, step, RuleKind, StateMatrix, TokenInput, UpdateRule};
use kla_core::sampling::{random_matrix, random_tokens};
use kla_core::tasks::{generate_sample, sample_seed, Dataset, Split, TaskConfig, TaskKind, TaskSample, STACK_POP, STACK_PUSH};
use kla_core::tensor::Matrix;
use kla_core::theory::{
    contraction_check, proximal_check, verify_projection_with, Instance, CONSTRAINT_TOL, MIN_NORM_TOL, TANGENT_TOL,
};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("projection", projection),
        ("proximal", proximal),
        ("contraction", contraction),
        ("path_equivalence", path_equivalence),
        ("wy_recursions", wy_recursions),
        ("gradients", gradients),
        ("toy_mqar", toy_mqar),
        ("task_oracles", task_oracles),
        ("efficiency", efficiency),
        ("mutation", mutation),
    ];
    // comma-separated criterion names; unset runs everything
    let only = std::env::var("KLA_ACCEPT_ONLY").ok();
    let selected: Vec<_> = criteria
        .iter()
        .filter(|(name, _)| only.as_deref().is_none_or(|o| o.split(',').any(|n| n.trim() == *name)))
        .collect();
    let mut failed = Vec::new();
    for &(name, run) in &selected {
        let t = Instant::now();
        let o = run();
        let line = format!(
            "{} {name:<17} {} [{:.1}s]\n",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        // straight to the stream so the line survives output capture
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", selected.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}

fn instances(tag: u64, n: usize) -> Vec<Instance> {
    (0..n).map(|i| Instance::sample(SEED ^ (tag << 40) ^ i as u64, 32)).collect()
}

/// `S + k (v − Sᵀk)ᵀ / ‖k‖²` from the definition.
fn naive_projection(s: &Matrix, k: &[f64], v: &[f64]) -> Matrix {
    let kk: f64 = k.iter().map(|x| x * x).sum();
    let mut out = s.clone();
    for j in 0..s.cols() {
        let pred: f64 = (0..s.rows()).map(|i| s.get(i, j) * k[i]).sum();
        for i in 0..s.rows() {
            out.set(i, j, s.get(i, j) + k[i] * (v[j] - pred) / kk);
        }
    }
    out
}

fn projection() -> Outcome {
    let xs = instances(1, 1000);
    let t = Instant::now();
    let (mut c, mut h, mut m, mut gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for x in &xs {
        let r = verify_projection_with(&UpdateRule::kla(), &x.s_tilde, &x.k, &x.v, x.probe_seed).unwrap();
        c = c.max(r.constraint.max_deviation);
        h = h.max(r.tangent.max_deviation);
        m = m.max(r.min_norm.max_deviation);
        let tok = TokenInput::new(x.k.clone(), x.v.clone(), x.k.clone(), 1.0, 1.0).unwrap();
        let lib = step(&UpdateRule::kla(), &x.s_tilde, &tok, 0.0).unwrap().new_state;
        let naive = naive_projection(x.s_tilde.matrix(), x.k.as_slice(), x.v.as_slice());
        gap = gap.max(lib.matrix().max_abs_diff(&naive).unwrap());
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = c <= CONSTRAINT_TOL && h <= TANGENT_TOL && m <= MIN_NORM_TOL && gap <= CONSTRAINT_TOL && secs < 10.0;
    outcome(
        pass,
        format!(
            "1000 instances: constraint {c:.1e} (≤1e-12), tangent {h:.1e} (≤1e-10), min-norm excess {m:.1e}, \
             vs naive step {gap:.1e}, {secs:.2}s (<10s)"
        ),
    )
}

fn proximal() -> Outcome {
    let xs = instances(2, 150);
    let t = Instant::now();
    let mut worst = 0.0f64;
    for x in &xs {
        let eta = if x.eps == 0.0 { x.eta.min(0.99) } else { x.eta };
        let r = proximal_check(&x.s_tilde, &x.k, &x.v, eta, x.eps).unwrap();
        worst = if r.max_deviation.is_nan() { f64::NAN } else { worst.max(r.max_deviation) };
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 30.0,
        format!("150 (η, ε) configurations: oracle vs closed form {worst:.1e} Frobenius (≤1e-6), {secs:.2}s (<30s)"),
    )
}

fn contraction() -> Outcome {
    let xs = instances(3, 1000);
    let mut worst = 0.0f64;
    for x in &xs {
        let r = contraction_check(&x.s_tilde, &x.k, &x.v, x.eta, x.eps).unwrap();
        worst = if r.max_deviation.is_nan() { f64::NAN } else { worst.max(r.max_deviation) };
    }
    // the factor itself, from one measured step at η = 1, ε = 0.5, ‖k‖² = 4:
    // 1 − 4/4.5 = 1/9
    let k = kla_core::tensor::Vector::from(vec![2.0f64, 0.0]);
    let v = kla_core::tensor::Vector::from(vec![1.0]);
    let s = StateMatrix::zeros(2, 1);
    let tok = TokenInput::new(k.clone(), v, k, 1.0, 1.0).unwrap();
    let o = step(&UpdateRule::kla(), &s, &tok, 0.5).unwrap();
    let ratio: f64 = o.residual_after.as_slice()[0] / o.residual_before.as_slice()[0];
    let fixed = (ratio - 1.0 / 9.0).abs();
    outcome(
        worst <= 1e-12 && fixed <= 1e-12,
        format!("1000 instances: residual vs factor·e and loss rise {worst:.1e} (≤1e-12); worked case {fixed:.1e}"),
    )
}

/// Plain-loop recurrence from the update definitions (scalar-gated delta
/// rules only).
fn naive_outputs(rule: RuleKind, s0: &Matrix, tokens: &[TokenInput], eps: f64) -> (Matrix, Matrix) {
    let (dk, dv) = s0.shape();
    let mut s = s0.clone();
    let mut out = Matrix::zeros(tokens.len(), dv);
    for (t, x) in tokens.iter().enumerate() {
        let k = x.k.as_slice();
        let kk: f64 = k.iter().map(|a| a * a).sum();
        let beta = match rule {
            RuleKind::Kla => x.eta / (kk + eps),
            RuleKind::Gdn => x.eta,
            _ => unreachable!(),
        };
        for j in 0..dv {
            let pred: f64 = (0..dk).map(|i| x.alpha * s.get(i, j) * k[i]).sum();
            let e = x.v.as_slice()[j] - pred;
            for i in 0..dk {
                s.set(i, j, x.alpha * s.get(i, j) + beta * k[i] * e);
            }
        }
        let q = x.q.as_slice();
        let qn = q.iter().map(|a| a * a).sum::<f64>().sqrt();
        for j in 0..dv {
            out.set(t, j, (0..dk).map(|i| s.get(i, j) * q[i]).sum::<f64>() / qn);
        }
    }
    (out, s)
}

fn path_equivalence() -> Outcome {
    let rules = [UpdateRule::gdn(), UpdateRule::kla()];
    let eps = 1e-6;
    let t = Instant::now();
    let cases = equivalence_sweep(&rules, &[1, 2, 4, 16, 64], &[5, 64, 257, 512], 16, 16, eps, SEED).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.max_deviation()).fold(0.0, f64::max);
    let (mut state, mut out, mut wy) = (0.0f64, 0.0f64, 0.0f64);
    for c in &cases {
        state = state.max(c.state_deviation);
        out = out.max(c.output_deviation);
        wy = wy.max(c.wy_deviation);
    }
    // anchor the tokenwise path itself to the naive loop
    let mut anchor = 0.0f64;
    for rule in &rules {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xa4c);
        let tokens: Vec<TokenInput> = random_tokens(&mut rng, 257, 16, 16);
        let s0 = StateMatrix::from(random_matrix(&mut rng, 16, 16));
        let lib = run_sequence(rule, &s0, &tokens, eps, false).unwrap();
        let (o, s) = naive_outputs(rule.kind, s0.matrix(), &tokens, eps);
        anchor = anchor.max(lib.outputs.max_abs_diff(&o).unwrap());
        anchor = anchor.max(lib.final_state.matrix().max_abs_diff(&s).unwrap());
    }
    outcome(
        worst <= 1e-9 && anchor <= 1e-9 && cases.len() == 40 && secs < 60.0,
        format!(
            "{} cases (gdn, kla × C 1,2,4,16,64 × L 5,64,257,512): state {state:.1e}, output {out:.1e}, \
             WY {wy:.1e} (≤1e-9); tokenwise vs naive {anchor:.1e}; {secs:.2}s (<60s)",
            cases.len()
        ),
    )
}

/// `P_i`, `H_i` by repeated left multiplication.
fn direct_wy(rule: RuleKind, tokens: &[TokenInput], eps: f64) -> (Vec<Matrix>, Vec<Matrix>) {
    let dk = tokens[0].k.len();
    let dv = tokens[0].v.len();
    let mut p = Matrix::identity(dk);
    let mut h = Matrix::zeros(dk, dv);
    let (mut ps, mut hs) = (Vec::new(), Vec::new());
    for x in tokens {
        let k = x.k.as_slice();
        let kk: f64 = k.iter().map(|a| a * a).sum();
        let beta = if rule == RuleKind::Kla { x.eta / (kk + eps) } else { x.eta };
        let t = Matrix::from_fn(dk, dk, |i, j| x.alpha * ((i == j) as u8 as f64 - beta * k[i] * k[j]));
        p = t.matmul(&p).unwrap();
        h = t.matmul(&h).unwrap();
        for i in 0..dk {
            for j in 0..dv {
                h.set(i, j, h.get(i, j) + beta * k[i] * x.v.as_slice()[j]);
            }
        }
        ps.push(p.clone());
        hs.push(h.clone());
    }
    (ps, hs)
}

fn wy_recursions() -> Outcome {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for rule in [UpdateRule::gdn(), UpdateRule::kla()] {
        for c in [1, 2, 3, 4, 8, 16, 24, 32] {
            for rep in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (c as u64) << 8 ^ rep);
                let dk = rng.random_range(1..=16);
                let dv = rng.random_range(1..=16);
                let tokens: Vec<TokenInput> = random_tokens(&mut rng, c, dk, dv);
                let batch = ChunkBatch::from_tokens(&tokens).unwrap();
                let wy = wy_build_with(&rule, &batch, eps).unwrap();
                let (ps, hs) = direct_wy(rule.kind, &tokens, eps);
                for i in 0..c {
                    worst = worst.max(wy.p_list[i].max_abs_diff(&ps[i]).unwrap());
                    worst = worst.max(wy.h_list[i].max_abs_diff(&hs[i]).unwrap());
                }
                cases += 1;
            }
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{cases} chunks (gdn, kla, C ≤ 32): recursions vs direct products {worst:.1e} (≤1e-10)"),
    )
}

fn spread(config: &ModelConfig, seed: u64) -> LayerParams {
    let mut p = LayerParams::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let names = p.names().to_vec();
    for (name, m) in names.iter().zip(p.values_mut()) {
        for x in m.as_mut_slice() {
            let j: f64 = rng.random_range(-0.5..0.5);
            *x = if name.contains("norm") || name.contains("conv") || name.ends_with("scale") { *x + j } else { *x * 25.0 + j };
        }
    }
    p
}

fn gradients() -> Outcome {
    let h = 1e-5;
    let floor = 1e-8;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut silent = Vec::new();
    let mut blocks = 0;
    for (ix, kind) in RuleKind::ALL.into_iter().enumerate() {
        let config = ModelConfig {
            rule: UpdateRule::new(kind),
            vocab: 11,
            d_model: 6,
            d_k: 3,
            v_expand: 2,
            n_layers: 2,
            mlp_hidden: 5,
            eps: 1e-6,
            ..ModelConfig::default()
        };
        let params = spread(&config, 500 + ix as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(600 + ix as u64);
        let shape = SeqShape { batch: 2, len: 4 };
        let batch = Batch {
            shape,
            ids: (0..8).map(|_| rng.random_range(0..11)).collect(),
            targets: (0..8).map(|_| rng.random_range(0..11)).collect(),
            mask: (0..8).map(|i| i % 4 != 0).collect(),
        };
        let (_, g) = grad(&config, &params, &batch).unwrap();
        let mut work = params.clone();
        for (t, name) in params.names().iter().enumerate() {
            blocks += 1;
            let mut checked = 0;
            for idx in 0..params.values()[t].as_slice().len() {
                let orig = params.values()[t].as_slice()[idx];
                work.values_mut()[t].as_mut_slice()[idx] = orig + h;
                let up = loss(&config, &work, &batch).unwrap();
                work.values_mut()[t].as_mut_slice()[idx] = orig - h;
                let down = loss(&config, &work, &batch).unwrap();
                work.values_mut()[t].as_mut_slice()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.values()[t].as_slice()[idx];
                if an.abs() > floor {
                    checked += 1;
                    let rel = (an - fd).abs() / an.abs().max(fd.abs());
                    if !(rel <= worst) {
                        worst = rel;
                        worst_at = format!("{kind} {name}");
                    }
                }
            }
            if checked == 0 {
                silent.push(format!("{kind} {name}"));
            }
        }
    }
    outcome(
        worst <= 1e-5 && silent.is_empty(),
        format!(
            "7 rules, {blocks} parameter blocks, L=4, h=1e-5: worst relative error {worst:.1e} at {worst_at} (≤1e-5); \
             blocks without a gradient above {floor:.0e}: {}",
            silent.len()
        ),
    )
}

fn toy_opt(steps: usize) -> OptimConfig {
    OptimConfig {
        lr: 1e-2,
        schedule: Schedule::Constant,
        max_steps: steps,
        eval_samples: Some(500),
        ..OptimConfig::default()
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        alpha_bias_init: 3.0,
        ..ModelConfig::default()
    }
}

fn toy_mqar() -> Outcome {
    let data = Dataset::generate(&TaskConfig::toy_mqar(), SEED).unwrap();
    let model = toy_model();
    assert_eq!((model.vocab, model.n_layers), (64, 2));
    let t = Instant::now();
    let run = train_from(&model, LayerParams::init(&model, SEED), &data, &toy_opt(5000), SEED).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let valid = evaluate_model(&model, &run.params, &data.valid).unwrap();
    let test = evaluate_model(&model, &run.params, &data.test).unwrap();
    // rerun the first evaluation window; a constant schedule makes it a prefix
    let again = train_from(&model, LayerParams::init(&model, SEED), &data, &toy_opt(200), SEED).unwrap();
    let deterministic = again.trace.len() == 200
        && again
            .trace
            .iter()
            .zip(&run.trace)
            .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits() && a.eval_acc.map(f64::to_bits) == b.eval_acc.map(f64::to_bits));
    outcome(
        valid >= 0.95 && test >= 0.95 && run.steps <= 5000 && secs < 900.0 && deterministic,
        format!(
            "2-layer KLA, vocab 64, len 64, 8 pairs: best at step {} of {}, valid {:.2}%, test {:.2}% (≥95%); \
             training {secs:.0}s (<900s); 200-step replay bit-identical: {deterministic}",
            run.best_step,
            run.steps,
            100.0 * valid,
            100.0 * test
        ),
    )
}

fn samples(cfg: &TaskConfig, n: usize) -> Vec<TaskSample> {
    (0..n).map(|i| generate_sample(cfg, sample_seed(SEED, Split::Train, i)).unwrap()).collect()
}

/// Targets the simulator expects, as `(position, value)` pairs.
fn simulate(kind: TaskKind, cfg: &TaskConfig, ids: &[u32]) -> Vec<(usize, u32)> {
    match kind {
        TaskKind::Mqar => {
            // pairs up to the first separator, then look up every query
            let sep = ids.iter().position(|&t| t == 0).unwrap();
            let map: HashMap<u32, u32> = ids[..sep].chunks(2).map(|p| (p[0], p[1])).collect();
            ids.iter()
                .enumerate()
                .skip(sep + 1)
                .filter(|(_, t)| **t != 0)
                .map(|(i, t)| (i, map[t]))
                .collect()
        }
        TaskKind::Sniah => {
            let n = ids.len();
            let key = ids[n - 1];
            let at = ids[..n - 2].iter().position(|&t| t == key).unwrap();
            vec![(n - 1, ids[at + 1])]
        }
        TaskKind::Palindrome => {
            let m = (ids.len() - 1) / 2;
            let mut reversed = ids[..m].to_vec();
            reversed.reverse();
            // echoed token j is answered with reversed token j + 1
            (0..m - 1).map(|j| (m + 1 + j, reversed[j + 1])).collect()
        }
        TaskKind::Stack => {
            let mut stacks: Vec<Vec<u32>> = vec![Vec::new(); cfg.num_stacks];
            let mut out = Vec::new();
            let mut i = 0;
            while i < ids.len() {
                match ids[i] {
                    STACK_PUSH => {
                        stacks[(ids[i + 1] - 3) as usize].push(ids[i + 2]);
                        i += 3;
                    }
                    STACK_POP => {
                        out.push((i + 1, stacks[(ids[i + 1] - 3) as usize].pop().unwrap()));
                        i += 2;
                    }
                    _ => i += 1,
                }
            }
            out
        }
    }
}

fn task_oracles() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in TaskKind::ALL {
        let cfg = TaskConfig::default_for(kind);
        let (mut scored, mut agree) = (0usize, 0usize);
        let mut mask_ok = true;
        for s in samples(&cfg, 10_000) {
            let expected = simulate(kind, &cfg, &s.input_ids);
            let mask: Vec<usize> = (0..s.len()).filter(|&i| s.loss_mask[i]).collect();
            mask_ok &= mask == expected.iter().map(|e| e.0).collect::<Vec<_>>();
            scored += mask.len();
            agree += expected.iter().filter(|(i, v)| s.loss_mask[*i] && s.target_ids[*i] == *v).count();
        }
        pass &= mask_ok && agree == scored && scored > 0;
        lines.push(format!("{kind} {agree}/{scored}{}", if mask_ok { "" } else { " (mask differs)" }));
    }
    // worked MQAR case: pairs A↦x, B↦y, then query B → y (A = 5, B = 6,
    // x = 40, y = 33; id 0 is the separator)
    let worked = simulate(TaskKind::Mqar, &TaskConfig::toy_mqar(), &[5, 40, 6, 33, 0, 6]) == vec![(5, 33)];
    outcome(pass && worked, format!("10000 samples each: {}", lines.join(", ")))
}

fn efficiency() -> Outcome {
    // more repetitions than the CLI default: medians of short runs on a
    // shared core are noisy
    let cfg = BenchConfig {
        reps: 41,
        ..BenchConfig::default()
    };
    let rules = [UpdateRule::kla(), UpdateRule::gdn()];
    let lengths = [512, 1024, 2048, 4096];
    let prefill = bench_prefill::<f64>(&rules, &[ExecPath::Tokenwise, ExecPath::Chunkwise], &lengths, &cfg).unwrap();
    let ratios = rule_ratios(&prefill, RuleKind::Kla, RuleKind::Gdn, ExecPath::Chunkwise);
    let a = ratios.len() == lengths.len() && ratios.iter().all(|(_, r)| (0.8..=1.25).contains(r));
    let mut doubling = Vec::new();
    for rule in [RuleKind::Kla, RuleKind::Gdn] {
        for path in [ExecPath::Tokenwise, ExecPath::Chunkwise] {
            doubling.extend(doubling_ratios(&prefill, rule, path).into_iter().map(|(l, r)| (rule, path, l, r)));
        }
    }
    let (wr, wp, wl, worst_doubling) = doubling
        .iter()
        .copied()
        .fold((RuleKind::Kla, ExecPath::Chunkwise, 0, 0.0), |a, b| if b.3 > a.3 { b } else { a });
    let c = doubling.len() == 12 && worst_doubling <= 2.5;
    let decode = bench_decode::<f64>(&[UpdateRule::kla()], &[1024, 32768], 8192, &cfg).unwrap();
    let tpot = decode[1].tpot_ms / decode[0].tpot_ms;
    let b = tpot <= 1.2;
    let shown: Vec<String> = ratios.iter().map(|(l, r)| format!("{l}:{r:.2}")).collect();
    outcome(
        a && b && c,
        format!(
            "d=64, C=64: (a) KLA/GDN chunkwise prefill {} in [0.8, 1.25]; (b) TPOT 32K/1K {tpot:.3} (≤1.2); \
             (c) worst time(2L)/time(L) {worst_doubling:.2} at {wr} {wp} L={wl} (≤2.5)",
            shown.join(" ")
        ),
    )
}

fn mutation() -> Outcome {
    let xs = instances(4, 1000);
    let mut failing = 0;
    let mut non_unit = 0;
    let mut worst = 0.0f64;
    for x in &xs {
        if (x.k.l2_norm_sq() - 1.0).abs() < 1e-3 {
            continue;
        }
        non_unit += 1;
        let r = verify_projection_with(&UpdateRule::gdn(), &x.s_tilde, &x.k, &x.v, x.probe_seed).unwrap();
        worst = worst.max(r.constraint.max_deviation);
        failing += (!r.constraint.pass) as usize;
    }
    outcome(
        failing == non_unit && non_unit > 0,
        format!("β = η on {non_unit} non-unit-key instances: constraint check fails on {failing} (worst {worst:.2e})"),
    )
}
