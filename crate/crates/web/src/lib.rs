//! wasm-bindgen bindings behind `www/index.html`. Every export returns a JSON
//! string so the page can stay plain JavaScript.

use cfn_core::experiment::{likelihood_slice, SteelFixture};
use cfn_core::landscape::{extreme_eigenvalues, population_hessian, PopulationMode};
use cfn_core::model::{sample_spins, BoxConstants, EdgeVector};
use cfn_core::optimizer::{fit, OptConfig};
use cfn_core::tree::parse_newick;
use cfn_core::Result;
use serde_json::json;
use wasm_bindgen::prelude::*;

pub const WITNESS: &str = include_str!("../../core/fixtures/steel_witness.json");
pub const QUARTET: &str = "((A,B),(C,D));";

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Log-likelihood of the frozen 2-sample witness over the two edges where
/// its maxima differ most, the others held at the first maximum.
pub fn witness_slice_json(points: usize) -> Result<String> {
    let fx = SteelFixture::from_json(WITNESS)?;
    let tree = parse_newick(&fx.tree)?;
    let samples = fx.samples()?;
    let a = &fx.maxima[0].theta;
    let b = &fx.maxima[1].theta;
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| (b[j] - a[j]).abs().total_cmp(&(b[i] - a[i]).abs()).then(i.cmp(&j)));
    let edges = (order[0].min(order[1]), order[0].max(order[1]));
    let base = EdgeVector::new(a.clone())?;
    let grid = likelihood_slice(&tree, &samples, &base, edges, fx.search_interval, points)?;
    let z: Vec<Option<f64>> = grid.iter().map(|g| g.2.is_finite().then_some(g.2)).collect();
    Ok(json!({
        "patterns": fx.patterns,
        "edges": [fx.edges[edges.0], fx.edges[edges.1]],
        "points": points,
        "lo": fx.search_interval.lo,
        "hi": fx.search_interval.hi,
        "z": z,
        "maxima": fx.maxima.iter().map(|m| [m.theta[edges.0], m.theta[edges.1]]).collect::<Vec<_>>(),
        "objective": fx.maxima[0].objective,
    })
    .to_string())
}

/// Coordinate maximization on the quartet from a uniform start, with samples
/// drawn at the truth-box center.
pub fn fit_trace_json(delta: f64, m: u32, seed: u32, start: f64) -> Result<String> {
    let tree = parse_newick(QUARTET)?;
    let truth = BoxConstants::default().truth_box(delta)?;
    let star = truth.center(tree.n_edges());
    let s = sample_spins(&tree, &star, seed as u64, m as u64)?;
    let theta0 = EdgeVector::uniform(tree.n_edges(), start)?;
    let tr = fit(&tree, &theta0, s.weighted(), &OptConfig::default())?;
    Ok(json!({
        "theta_star": star.as_slice(),
        "objective": tr.objective,
        "iterates": tr.iterates.iter().map(|t| t.as_slice().to_vec()).collect::<Vec<_>>(),
        "converged": tr.converged(),
        "distinct_patterns": s.n_distinct(),
    })
    .to_string())
}

/// Extreme eigenvalues of the exact population Hessian along the diagonal of
/// the estimation box, truth at the truth-box center.
pub fn eigen_scan_json(delta: f64, points: usize) -> Result<String> {
    let tree = parse_newick(QUARTET)?;
    let c = BoxConstants::default();
    let truth = c.truth_box(delta)?;
    let est = c.estimation_box(delta)?;
    let star = truth.center(tree.n_edges());
    let (lo, hi) = est.interval();
    let mut rows = Vec::new();
    for k in 0..points.max(2) {
        let t = lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64;
        let th = EdgeVector::uniform(tree.n_edges(), t)?;
        let h = population_hessian(&tree, &star, &th, PopulationMode::Exact)?;
        let (lmin, lmax) = extreme_eigenvalues(&h, 1e-12)?;
        rows.push(json!({"theta": t, "lambda_min": lmin, "lambda_max": lmax}));
    }
    Ok(json!({"delta": delta, "truth": truth.interval(), "estimation": [lo, hi], "rows": rows}).to_string())
}

#[wasm_bindgen]
pub fn witness_slice(points: usize) -> std::result::Result<String, JsValue> {
    js(witness_slice_json(points))
}

#[wasm_bindgen]
pub fn fit_trace(delta: f64, m: u32, seed: u32, start: f64) -> std::result::Result<String, JsValue> {
    js(fit_trace_json(delta, m, seed, start))
}

#[wasm_bindgen]
pub fn eigen_scan(delta: f64, points: usize) -> std::result::Result<String, JsValue> {
    js(eigen_scan_json(delta, points))
}
