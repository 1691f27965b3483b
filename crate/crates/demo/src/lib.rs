//! Browser demo: three small experiments on the KLA update, each returning
//! JSON for the page in `www/` to plot.
//!
//! The plain functions are usable from Rust; the `#[wasm_bindgen]` wrappers
//! serialize their results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use kla_core::chunk::run_chunked;
use kla_core::recurrence::{
    contraction_factor, run_sequence, step, RuleKind, StateMatrix, TokenInput, UpdateRule, DEFAULT_EPS,
};
use kla_core::sampling::{random_matrix, random_nonzero_vector, random_tokens, random_vector};
use kla_core::tensor::Vector;
use kla_core::theory::line_search_scan;

#[derive(Debug, Serialize)]
pub struct LineSearchCurve {
    pub tau: Vec<f64>,
    pub loss: Vec<f64>,
    /// `1/‖k‖²`, the exact minimizer.
    pub tau_star: f64,
    /// Best grid point.
    pub tau_empirical: f64,
    pub key_norm_sq: f64,
}

/// Per-token loss after stepping `τ` along the residual direction, for a
/// random instance whose key has norm `key_scale`.
pub fn line_search(seed: u64, dim: usize, key_scale: f64, points: usize) -> Result<LineSearchCurve, String> {
    if dim == 0 || points < 2 || !(key_scale > 0.0) {
        return Err("dim must be positive, points at least 2 and key_scale positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = StateMatrix::from(random_matrix(&mut rng, dim, dim));
    let raw = random_nonzero_vector(&mut rng, dim);
    let k = raw.scaled(key_scale / raw.l2_norm());
    let v: Vector = random_vector(&mut rng, dim);
    let kk = k.l2_norm_sq();
    let top = 2.5 / kk;
    let grid: Vec<f64> = (0..points).map(|i| top * i as f64 / (points - 1) as f64).collect();
    let scan = line_search_scan(&s, &k, &v, &grid).map_err(|e| e.to_string())?;
    Ok(LineSearchCurve {
        tau: scan.grid,
        loss: scan.direct,
        tau_star: scan.tau_star,
        tau_empirical: scan.tau_star_empirical,
        key_norm_sq: kk,
    })
}

#[derive(Debug, Serialize)]
pub struct ContractionCurves {
    pub key_norm_sq: Vec<f64>,
    /// `|1 − η‖k‖²/(‖k‖²+ε)|`.
    pub kla_formula: Vec<f64>,
    /// `|1 − η‖k‖²|`.
    pub gdn_formula: Vec<f64>,
    /// `‖e_after‖/‖e_before‖` from one actual step.
    pub kla_measured: Vec<f64>,
    pub gdn_measured: Vec<f64>,
}

/// Residual shrinkage of one KLA step and one GDN step as the key norm
/// sweeps `[1e-3, 1e2]` on a log grid.
pub fn contraction(seed: u64, dim: usize, eta: f64, eps: f64, points: usize) -> Result<ContractionCurves, String> {
    if dim == 0 || points < 2 || !(eta > 0.0 && eta <= 1.0) || !(eps >= 0.0) {
        return Err("need dim > 0, points ≥ 2, η in (0, 1] and ε ≥ 0".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = StateMatrix::from(random_matrix(&mut rng, dim, dim));
    let dir = random_nonzero_vector(&mut rng, dim);
    let dir = dir.scaled(1.0 / dir.l2_norm());
    let v: Vector = random_vector(&mut rng, dim);
    let mut out = ContractionCurves {
        key_norm_sq: Vec::with_capacity(points),
        kla_formula: Vec::with_capacity(points),
        gdn_formula: Vec::with_capacity(points),
        kla_measured: Vec::with_capacity(points),
        gdn_measured: Vec::with_capacity(points),
    };
    for i in 0..points {
        let kk = 10f64.powf(-3.0 + 5.0 * i as f64 / (points - 1) as f64);
        let k = dir.scaled(kk.sqrt());
        let x = TokenInput::new(k.clone(), v.clone(), k, 1.0, eta).map_err(|e| e.to_string())?;
        let ratio = |rule: UpdateRule| -> Result<f64, String> {
            let o = step(&rule, &s, &x, eps).map_err(|e| e.to_string())?;
            Ok(o.residual_after.l2_norm() / o.residual_before.l2_norm())
        };
        out.key_norm_sq.push(kk);
        out.kla_formula.push(contraction_factor(eta, kk, eps).abs());
        out.gdn_formula.push((1.0 - eta * kk).abs());
        out.kla_measured.push(ratio(UpdateRule::kla())?);
        out.gdn_measured.push(ratio(UpdateRule::gdn())?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct ChunkDeviation {
    pub length: usize,
    pub d_v: usize,
    pub chunk: usize,
    /// Row-major `length × d_v` grid of `|o_chunk − o_token|`.
    pub deviation: Vec<f64>,
    pub max_deviation: f64,
    pub state_deviation: f64,
}

/// Chunkwise vs tokenwise outputs on one random sequence.
pub fn chunk_deviation(
    rule: &str,
    length: usize,
    chunk: usize,
    d_k: usize,
    d_v: usize,
    seed: u64,
) -> Result<ChunkDeviation, String> {
    let kind: RuleKind = rule.parse().map_err(|e: kla_core::recurrence::RecurrenceError| e.to_string())?;
    if !matches!(kind, RuleKind::Kla | RuleKind::Gdn) {
        return Err("the chunkwise solver covers kla and gdn".into());
    }
    if length == 0 || chunk == 0 || d_k == 0 || d_v == 0 {
        return Err("length, chunk and dimensions must be positive".into());
    }
    let rule = UpdateRule::new(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<TokenInput> = random_tokens(&mut rng, length, d_k, d_v);
    let s0 = StateMatrix::from(random_matrix(&mut rng, d_k, d_v).scaled(rng.random_range(0.0..1.0)));
    let tok = run_sequence(&rule, &s0, &tokens, DEFAULT_EPS, false).map_err(|e| e.to_string())?;
    let chk = run_chunked(&rule, &s0, &tokens, chunk, DEFAULT_EPS).map_err(|e| e.to_string())?;
    let deviation: Vec<f64> = tok
        .outputs
        .as_slice()
        .iter()
        .zip(chk.outputs.as_slice())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let state_deviation = tok
        .final_state
        .matrix()
        .max_abs_diff(chk.final_state.matrix())
        .map_err(|e| e.to_string())?;
    Ok(ChunkDeviation {
        length,
        d_v,
        chunk,
        max_deviation: deviation.iter().copied().fold(0.0, f64::max),
        deviation,
        state_deviation,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string())))
}

#[wasm_bindgen(js_name = lineSearch)]
pub fn line_search_js(seed: u32, dim: usize, key_scale: f64, points: usize) -> Result<String, JsError> {
    to_js(line_search(seed.into(), dim, key_scale, points))
}

#[wasm_bindgen(js_name = contraction)]
pub fn contraction_js(seed: u32, dim: usize, eta: f64, eps: f64, points: usize) -> Result<String, JsError> {
    to_js(contraction(seed.into(), dim, eta, eps, points))
}

#[wasm_bindgen(js_name = chunkDeviation)]
pub fn chunk_deviation_js(
    rule: &str,
    length: usize,
    chunk: usize,
    d_k: usize,
    d_v: usize,
    seed: u32,
) -> Result<String, JsError> {
    to_js(chunk_deviation(rule, length, chunk, d_k, d_v, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_search_minimum_near_inverse_key_energy() {
        let c = line_search(1, 6, 0.7, 501).unwrap();
        assert!((c.tau_star - 1.0 / 0.49).abs() < 1e-9);
        let step = c.tau[1] - c.tau[0];
        assert!((c.tau_empirical - c.tau_star).abs() <= step);
        assert!(c.loss.iter().all(|&l| l >= -1e-15));
        assert!(line_search(1, 0, 1.0, 10).is_err());
    }

    #[test]
    fn kla_contracts_where_gdn_amplifies() {
        let c = contraction(2, 5, 1.0, 1e-6, 41).unwrap();
        for i in 0..c.key_norm_sq.len() {
            assert!(c.kla_formula[i] <= 1.0);
            assert!((c.kla_formula[i] - c.kla_measured[i]).abs() < 1e-9);
            assert!((c.gdn_formula[i] - c.gdn_measured[i]).abs() < 1e-9 * c.gdn_formula[i].max(1.0));
        }
        assert!(c.gdn_formula.last().unwrap() > &1.0);
        assert!(contraction(2, 5, 1.5, 0.0, 10).is_err());
    }

    #[test]
    fn chunk_paths_agree() {
        let d = chunk_deviation("kla", 50, 8, 4, 3, 9).unwrap();
        assert_eq!(d.deviation.len(), 150);
        assert!(d.max_deviation < 1e-10 && d.state_deviation < 1e-10);
        assert!(chunk_deviation("gla", 5, 2, 2, 2, 0).is_err());
    }
}
