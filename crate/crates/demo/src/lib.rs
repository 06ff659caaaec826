//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; errors come back as JS exceptions.

use delaylab::coupling::{identity_k, offset_segment, run_coupling, CouplingConfig, Offset};
use delaylab::rng::StreamId;
use delaylab::solver::solve_path;
use delaylab::zvonkin::{solve_u, ZvonkinGrid};
use delaylab::{DelayMeasure, MeasureKind, ModelSpec, SamplePath, Segment, SolverConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn model(name: &str) -> Result<ModelSpec, JsValue> {
    match name {
        "zero" => Ok(ModelSpec::zero(1.0)),
        "ou" => Ok(ModelSpec::ou(1.0, 1.0)),
        "reference" => Ok(ModelSpec::reference()),
        "linear-delay" => Ok(ModelSpec::linear_delay(1.0, 0.5, 1.0)),
        other => Err(js_err(format!("unknown model `{other}`"))),
    }
}

fn measure(h: f64) -> Result<DelayMeasure, JsValue> {
    DelayMeasure::new(MeasureKind::Exponential { lambda: 1.0 }, 1.0, h).map_err(js_err)
}

/// First coordinate of a path from `t = 0`, thinned to at most `max_points`.
fn trace(p: &SamplePath, n_hist: usize, max_points: usize) -> (Vec<f64>, Vec<f64>) {
    let total = p.len() - n_hist;
    let every = total.div_ceil(max_points).max(1);
    (n_hist..p.len())
        .step_by(every)
        .map(|k| (p.time(k), p.states[k * p.d]))
        .unzip()
}

/// Simulates `n_paths` sample paths of a catalog model from `ξ ≡ x0`.
#[wasm_bindgen]
pub fn simulate_paths(name: &str, x0: f64, h: f64, t_end: f64, n_paths: u32, seed: u64) -> Result<String, JsValue> {
    let m = model(name)?;
    let nu = measure(h)?;
    let xi = Segment::constant(&nu, &[x0]);
    let cfg = SolverConfig::new(h, t_end);
    let mut t = Vec::new();
    let mut paths = Vec::new();
    for i in 0..n_paths.min(64) {
        let p = solve_path(&m, &nu, &xi, &cfg, StreamId { base_seed: seed, path: i as u64 }).map_err(js_err)?;
        let (ti, xs) = trace(&p, nu.cells(), 400);
        t = ti;
        paths.push(xs);
    }
    Ok(json!({ "t": t, "paths": paths }).to_string())
}

/// One coupled pair on the linear delay model: `η = ξ + dist` everywhere.
#[wasm_bindgen]
pub fn coupling_demo(x0: f64, dist: f64, horizon: f64, h: f64, seed: u64) -> Result<String, JsValue> {
    let m = model("linear-delay")?;
    let nu = measure(h)?;
    let xi = Segment::constant(&nu, &[x0]);
    let eta = offset_segment(&nu, &xi, dist, Offset::Constant);
    let cfg = CouplingConfig::new(horizon, identity_k(&m, &nu));
    let solver = SolverConfig::new(h, horizon + nu.r0());
    let r = run_coupling(&m, &nu, &xi, &eta, &cfg, &solver, StreamId { base_seed: seed, path: 0 }, true).map_err(js_err)?;
    if let Some(f) = &r.failure {
        return Err(js_err(f));
    }
    let (px, py) = r.paths.as_ref().ok_or_else(|| js_err("paths were not kept"))?;
    let (t, x) = trace(px, nu.cells(), 600);
    let (_, y) = trace(py, nu.cells(), 600);
    Ok(json!({
        "t": t,
        "x": x,
        "y": y,
        "tau": r.tau,
        "log_r": r.log_r,
        "coupled_at_end": r.coupled_at_end,
        "k": cfg.k,
    })
    .to_string())
}

/// `u(0, ·)` and `∂ₓu(0, ·)` of the regularizing transform for the
/// reference drift at a given `λ`, on a coarse grid.
#[wasm_bindgen]
pub fn zvonkin_profile(lambda: f64, window: f64) -> Result<String, JsValue> {
    let grid = ZvonkinGrid { nx: 129, s_step: 1.0 / 32.0, ..ZvonkinGrid::default() };
    let rd = solve_u(&ModelSpec::reference(), lambda, window, &grid).map_err(js_err)?;
    let x: Vec<f64> = (0..rd.nx).map(|j| rd.lo + j as f64 * rd.dx).collect();
    let norms = rd.norms();
    Ok(json!({
        "x": x,
        "u": &rd.u[0][..rd.nx],
        "du": &rd.du[0][..rd.nx],
        "norms": norms,
        "iterations": rd.diffs.len(),
        "accepted": rd.accepted(),
    })
    .to_string())
}
