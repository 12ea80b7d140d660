//! wasm-bindgen exports for the browser demo in `www/`.
//!
//! Every export returns a JSON string; the page parses it and draws the
//! spectra on a canvas.

use serde_json::json;
use wasm_bindgen::prelude::*;

use udufact::problem;
use udufact::solver::{self, MeasurementScaling, SolverConfig, SolverKind};
use udufact::spectra;
use udufact::udv::{self, TrainConfig, Variant};

fn js_err(e: udufact::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// UDU and BM on one random completion instance.
pub fn completion(d: usize, r_true: usize, n: usize, iters: usize, eta: f64, init_scale: f64, seed: u64) -> udufact::Result<String> {
    let inst = problem::gen_completion(d, r_true, n, seed)?;
    let mut out = serde_json::Map::new();
    for (name, kind) in [("udu", SolverKind::Udu), ("bm", SolverKind::Bm)] {
        let mut cfg = SolverConfig::new(kind, d, eta, iters, init_scale, seed);
        cfg.scaling = MeasurementScaling::MaxAbs;
        cfg.log_every = iters.max(1);
        let run = solver::run_solver(&inst.op, &inst.b, &cfg)?;
        let x = run.x();
        let sv = spectra::singular_values(&x)?;
        out.insert(
            name.into(),
            json!({
                "svals": sv,
                "rank": spectra::numerical_rank(&sv, 1e-6)?,
                "error": problem::relative_error(&x, &inst.x_true),
                "diverged": run.diverged,
            }),
        );
    }
    Ok(serde_json::Value::Object(out).to_string())
}

/// UDV and UV trained on a rank-2 linear regression task.
pub fn network(n: usize, epochs: usize, lr: f64, seed: u64) -> udufact::Result<String> {
    let (d, c) = (40, 5);
    let ds = udv::gen_regression(n, d, c, 2, 0.01, 1.0, seed)?;
    let mut out = serde_json::Map::new();
    for v in [Variant::Udv, Variant::Uv] {
        let cfg = TrainConfig::new(v, 20, lr, 0.9, 100, epochs, seed);
        let run = udv::train(&ds, &cfg)?;
        let sv = spectra::singular_values(&run.params.scaled_input_layer())?;
        let last = run.trace.last().expect("trace is never empty");
        out.insert(v.name().into(), json!({ "svals": sv, "test_loss": last.test_loss, "diverged": run.diverged }));
    }
    Ok(serde_json::Value::Object(out).to_string())
}

/// Lifted phase retrieval with `m = 2d` rank-one measurements, step `1/L`.
pub fn phase(d: usize, iters: usize, seed: u64) -> udufact::Result<String> {
    let inst = problem::gen_phase_retrieval(d, 2.0, seed, None)?;
    let eta = 1.0 / problem::estimate_smoothness(&inst.op, 200, seed)?;
    let mut out = serde_json::Map::new();
    for (name, kind) in [("udu", SolverKind::Udu), ("bm", SolverKind::Bm)] {
        let mut cfg = SolverConfig::new(kind, d, eta, iters, 1.0, seed);
        cfg.log_every = iters.max(1);
        let run = solver::run_solver(&inst.op, &inst.b, &cfg)?;
        let x = run.x();
        let corr = problem::correlation(&problem::extract_signal(&x)?, &inst.x_signal).abs();
        out.insert(name.into(), json!({ "svals": spectra::singular_values(&x)?, "correlation": corr }));
    }
    Ok(serde_json::Value::Object(out).to_string())
}

#[wasm_bindgen]
pub fn completion_spectra(d: usize, r_true: usize, n: usize, iters: usize, eta: f64, init_scale: f64, seed: u32) -> Result<String, JsValue> {
    completion(d, r_true, n, iters, eta, init_scale, seed as u64).map_err(js_err)
}

#[wasm_bindgen]
pub fn network_spectra(n: usize, epochs: usize, lr: f64, seed: u32) -> Result<String, JsValue> {
    network(n, epochs, lr, seed as u64).map_err(js_err)
}

#[wasm_bindgen]
pub fn phase_retrieval(d: usize, iters: usize, seed: u32) -> Result<String, JsValue> {
    phase(d, iters, seed as u64).map_err(js_err)
}
