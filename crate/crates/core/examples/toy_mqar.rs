//! Trains the toy KLA model on MQAR (vocab 64, length 64, 8 pairs) and
//! prints the evaluation trace.
//!
//! Defaults match the acceptance run. Override with environment variables:
//! `STEPS`, `LR`, `COSINE=1` (warmup + cosine instead of a constant rate),
//! `ALPHA_BIAS`, `RULE` (any rule name), `DMODEL`, `DK`, `SEED`.
//!
//! ```text
//! cargo run --release -p kla-core --example toy_mqar
//! ```

use std::time::Instant;

use kla_core::autodiff::model::LayerParams;
use kla_core::autodiff::train::{evaluate_model, train_from, Schedule};
use kla_core::autodiff::{ModelConfig, OptimConfig};
use kla_core::recurrence::{RuleKind, UpdateRule};
use kla_core::tasks::{Dataset, TaskConfig};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let seed: u64 = env("SEED", 42);
    let data = Dataset::generate(&TaskConfig::toy_mqar(), seed).expect("dataset");
    let model = ModelConfig {
        rule: UpdateRule::new(env("RULE", RuleKind::Kla)),
        d_model: env("DMODEL", 32),
        d_k: env("DK", 16),
        alpha_bias_init: env("ALPHA_BIAS", 3.0),
        ..ModelConfig::default()
    };
    let opt = OptimConfig {
        max_steps: env("STEPS", 5000),
        lr: env("LR", 1e-2),
        schedule: if env("COSINE", 0) == 1 {
            OptimConfig::default().schedule
        } else {
            Schedule::Constant
        },
        eval_samples: Some(500),
        ..OptimConfig::default()
    };
    let start = Instant::now();
    let out = train_from(&model, LayerParams::init(&model, seed), &data, &opt, seed).expect("training");
    for r in &out.trace {
        if let Some(acc) = r.eval_acc {
            println!("step {:5}  loss {:.4}  eval {:.4}", r.step, r.loss, acc);
        }
    }
    let test = evaluate_model(&model, &out.params, &data.test).expect("eval");
    println!(
        "stop {:?} after {} steps ({:.0}s); best eval {:.4} at step {}; test {:.4}",
        out.stop,
        out.steps,
        start.elapsed().as_secs_f64(),
        out.best_eval.unwrap_or(f64::NAN),
        out.best_step,
        test
    );
}
