//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes and returns JSON text. The `*_json` functions hold the
//! logic and are plain Rust so they can be tested natively.

use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use scatterlab::distributions::{sample, true_covariance, DistributionSpec, Seed};
use scatterlab::linalg::SpdMatrix;
use scatterlab::properties::{additivity_check, normal_continuity_experiment, Trial};
use scatterlab::scatter::{calibrate_gaussian, ScatterSpec};

const MAX_POINTS: usize = 1500;
const CALIBRATION_N: usize = 4000;
const CALIBRATION_REPLICATES: usize = 3;

type DemoResult = Result<String, String>;

fn parse<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad request: {e}"))
}

fn matrix_json(m: &SpdMatrix) -> Value {
    let p = m.dim();
    json!((0..p).map(|i| (0..p).map(|j| m.get(i, j)).collect::<Vec<_>>()).collect::<Vec<_>>())
}

/// Fills in a Monte Carlo calibration for families without a closed form.
fn calibrated(spec: ScatterSpec, p: usize, seed: Seed) -> Result<ScatterSpec, String> {
    if spec.calibration.is_some() || spec.analytic_calibration(p).is_some() {
        return Ok(spec);
    }
    let c = calibrate_gaussian(&spec, p, CALIBRATION_N, CALIBRATION_REPLICATES, seed).map_err(|e| e.to_string())?;
    Ok(spec.with_dimension_calibration(p, c.constant))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareRequest {
    distribution: DistributionSpec,
    functionals: Vec<ScatterSpec>,
    n: usize,
    seed: u64,
}

/// Draws one sample and evaluates several functionals on it.
pub fn compare_estimators_json(request: &str) -> DemoResult {
    let req: CompareRequest = parse(request)?;
    let x = sample(&req.distribution, req.n, Seed(req.seed)).map_err(|e| e.to_string())?;
    let p = x.p();
    let truth = true_covariance(&req.distribution).ok().map(|s| matrix_json(&s));
    let estimates: Vec<Value> = req
        .functionals
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let label = spec.label();
            match calibrated(spec, p, Seed(req.seed).child(i as u64)).and_then(|s| s.estimate(&x).map_err(|e| e.to_string())) {
                Ok(e) => json!({"label": label, "matrix": matrix_json(&e.matrix), "iterations": e.iterations, "converged": e.converged}),
                Err(error) => json!({"label": label, "error": error}),
            }
        })
        .collect();
    let stride = x.n().div_ceil(MAX_POINTS).max(1);
    let points: Vec<Vec<f64>> =
        (0..x.n()).step_by(stride).map(|i| x.row(i).iter().copied().collect()).collect();
    Ok(json!({"p": p, "points": points, "truth": truth, "estimates": estimates}).to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinuityRequest {
    functional: ScatterSpec,
    distribution: DistributionSpec,
    n_grid: Vec<usize>,
    m: usize,
    replicates: usize,
    seed: u64,
}

/// Error of `S` on standardized sums of `n` draws, for each `n` on the grid.
pub fn continuity_curve_json(request: &str) -> DemoResult {
    let req: ContinuityRequest = parse(request)?;
    let p = req.distribution.dim().map_err(|e| e.to_string())?;
    let spec = calibrated(req.functional, p, Seed(req.seed).child(u64::MAX))?;
    let curve = normal_continuity_experiment(&spec, &req.distribution, &req.n_grid, req.m, req.replicates, Seed(req.seed))
        .map_err(|e| e.to_string())?;
    let points: Vec<Value> = curve.iter().map(|c| json!({"n": c.n, "error": c.error})).collect();
    Ok(json!({"label": spec.label(), "curve": points}).to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdditivityRequest {
    functional: ScatterSpec,
    left: DistributionSpec,
    right: DistributionSpec,
    n: usize,
    replicates: usize,
    seed: u64,
    threshold: f64,
}

/// Compares `S(x + y)` with `S(x) + S(y)` for independent `x` and `y`.
pub fn additivity_json(request: &str) -> DemoResult {
    let req: AdditivityRequest = parse(request)?;
    let p = req.left.dim().map_err(|e| e.to_string())?;
    let spec = calibrated(req.functional, p, Seed(req.seed).child(u64::MAX))?;
    let report = additivity_check(&spec, &req.left, &req.right, &Trial::new(req.n, req.replicates, Seed(req.seed), req.threshold))
        .map_err(|e| e.to_string())?;
    let mut out = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    out["label"] = json!(spec.label());
    Ok(out.to_string())
}

fn to_js(r: DemoResult) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare_estimators(request: &str) -> Result<String, JsValue> {
    to_js(compare_estimators_json(request))
}

#[wasm_bindgen]
pub fn continuity_curve(request: &str) -> Result<String, JsValue> {
    to_js(continuity_curve_json(request))
}

#[wasm_bindgen]
pub fn additivity(request: &str) -> Result<String, JsValue> {
    to_js(additivity_json(request))
}
