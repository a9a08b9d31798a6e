//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns JSON so the page needs no generated type glue beyond
//! the functions themselves. The plain Rust functions behind the exports are
//! usable (and tested) natively.

use loramoe::balancing::{balanced_group_share, coefficient_matrix, lbc_loss};
use loramoe::mixture::{grid, sample_mixture, sweep_m, MixtureSpec};
use loramoe::{Graph, Group, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub m: f64,
    pub loglik: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub converged: bool,
}

#[derive(Debug, Serialize)]
pub struct SweepResult {
    pub best_m: f64,
    pub points: Vec<SweepPoint>,
}

pub fn run_sweep(spec: &MixtureSpec, grid_step: f64) -> Result<SweepResult, String> {
    let data = sample_mixture(spec).map_err(|e| e.to_string())?;
    let sweep = sweep_m(&data.values, &grid(grid_step).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(SweepResult {
        best_m: sweep.best_m,
        points: sweep
            .fits
            .iter()
            .map(|f| SweepPoint {
                m: f.m,
                loglik: f.loglik,
                mu1: f.mu1,
                mu2: f.mu2,
                converged: f.converged,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct LandscapeCurve {
    pub delta: f64,
    pub loss: Vec<f64>,
    /// Grid share with the smallest loss.
    pub argmin: f64,
    /// Share at which the weighted importance is flat.
    pub balanced: f64,
}

#[derive(Debug, Serialize)]
pub struct Landscape {
    pub shares: Vec<f64>,
    pub curves: Vec<LandscapeCurve>,
}

const GROUPS: [Group; 6] = [
    Group::Knowledge,
    Group::Knowledge,
    Group::Knowledge,
    Group::Task,
    Group::Task,
    Group::Task,
];

/// Balancing loss for a batch of one knowledge and one task sample over
/// three knowledge and three task experts, where each sample puts `share`
/// of its router mass on its own group, spread evenly.
pub fn lbc_at(share: f64, delta: f64) -> Result<f64, String> {
    let own = share / 3.0;
    let other = (1.0 - share) / 3.0;
    let q: Vec<f64> = GROUPS
        .iter()
        .flat_map(|&g| {
            [Group::Knowledge, Group::Task]
                .into_iter()
                .map(move |s| if g == s { own } else { other })
        })
        .collect();
    let q = Tensor::new(vec![6, 2], q).map_err(|e| e.to_string())?;
    let coeff = coefficient_matrix::<f64>(&GROUPS, &[Group::Knowledge, Group::Task], delta).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let qv = g.constant(q);
    let l = lbc_loss(&mut g, qv, &coeff).map_err(|e| e.to_string())?;
    Ok(g.value(l).item())
}

pub fn landscape(deltas: &[f64], points: usize) -> Result<Landscape, String> {
    if points < 2 {
        return Err("need at least two share points".into());
    }
    let shares: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let mut curves = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let loss = shares.iter().map(|&s| lbc_at(s, delta)).collect::<Result<Vec<_>, _>>()?;
        let best = loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| shares[i])
            .unwrap_or(0.5);
        curves.push(LandscapeCurve {
            delta,
            loss,
            argmin: best,
            balanced: balanced_group_share(delta),
        });
    }
    Ok(Landscape { shares, curves })
}

pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>, String> {
    let x = Tensor::new(vec![1, logits.len()], logits.to_vec()).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let v = g.constant(x);
    let s = g.softmax_rows(v, tau).map_err(|e| e.to_string())?;
    Ok(g.value(s).data().to_vec())
}

fn json<T: Serialize>(value: &Result<T, String>) -> Result<String, JsError> {
    match value {
        Ok(v) => serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string())),
        Err(e) => Err(JsError::new(e)),
    }
}

/// Log-likelihood of the fixed-weight fit at every grid weight.
#[wasm_bindgen(js_name = mixtureSweep)]
#[allow(clippy::too_many_arguments)]
pub fn mixture_sweep(
    p1: f64,
    mu1: f64,
    mu2: f64,
    var1: f64,
    var2: f64,
    n: usize,
    grid_step: f64,
    seed: u64,
) -> Result<String, JsError> {
    let spec = MixtureSpec {
        p1,
        mu1,
        mu2,
        var1,
        var2,
        n,
        seed,
    };
    json(&run_sweep(&spec, grid_step))
}

/// Balancing loss against the matched-group share for each δ.
#[wasm_bindgen(js_name = lbcLandscape)]
pub fn lbc_landscape(deltas: Vec<f64>, points: usize) -> Result<String, JsError> {
    json(&landscape(&deltas, points))
}

/// Router probabilities for one token's logits at temperature `tau`.
#[wasm_bindgen(js_name = routerSoftmax)]
pub fn router_softmax(logits: Vec<f64>, tau: f64) -> Result<Vec<f64>, JsError> {
    softmax(&logits, tau).map_err(|e| JsError::new(&e))
}
