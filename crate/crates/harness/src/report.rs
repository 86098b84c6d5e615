//! JSON documents for identification results and model-set checks.

use diffnet_core::netmodel::ContinuousNetwork;
use diffnet_core::pipeline::{IdentResult, IdentifiabilityReport, InformativityReport};
use diffnet_core::polymat::StabilityReport;
use diffnet_core::PolyMatrix;
use nalgebra::DMatrix;
use serde_json::{json, Value};

pub fn matrix(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|v| json!(v)).collect()))
            .collect(),
    )
}

/// Coefficient matrices ordered by lag.
pub fn poly(p: &PolyMatrix) -> Value {
    Value::Array(p.coeffs().iter().map(matrix).collect())
}

fn stability(s: &StabilityReport) -> Value {
    json!({ "stable": s.stable, "max_modulus": s.max_modulus })
}

/// One-based node pairs.
pub fn edges(pairs: &[(usize, usize)]) -> Value {
    Value::Array(pairs.iter().map(|(j, k)| json!([j + 1, k + 1])).collect())
}

pub fn continuous(net: &ContinuousNetwork) -> Value {
    let couplings: Vec<Value> = net
        .couplings()
        .iter()
        .map(|((j, k), c)| json!({ "nodes": [j + 1, k + 1], "coeffs": c }))
        .collect();
    json!({
        "x": net.x(),
        "y": couplings,
        "B": poly(net.b()),
        "sign_violations": net.sign_violations(),
    })
}

pub fn identifiability(r: &IdentifiabilityReport) -> Value {
    let conditions: Vec<Value> = r
        .conditions()
        .iter()
        .map(|(k, s)| json!({ "condition": k, "status": s.label(), "detail": s.detail() }))
        .collect();
    json!({ "pass": r.pass(), "conditions": conditions })
}

pub fn informativity(r: &InformativityReport) -> Value {
    json!({
        "pass": r.pass,
        "depth": r.depth,
        "min_eigenvalue": r.min_eigenvalue,
        "max_eigenvalue": r.max_eigenvalue,
    })
}

pub fn identify(res: &IdentResult) -> Value {
    let s = &res.structured;
    let d = &res.diagnostics;
    json!({
        "arx": {
            "order": res.arx.n,
            "samples_used": res.arx.n_eff,
            "zeta": res.arx.zeta.as_slice(),
            "residual_covariance": matrix(&res.arx.lambda_bar),
        },
        "structured": {
            "theta": s.theta.as_slice(),
            "multipliers": s.multipliers.as_slice(),
            "step2_theta": res.step2.theta.as_slice(),
            "cost_trace": s.cost_trace,
            "selected_iterate": s.selected,
            "iterations": s.iterations,
            "converged": s.converged,
            "diverged": s.diverged,
            "noiseless": s.noiseless,
            "weighted": s.weighted,
            "A": poly(&res.a),
            "B": poly(&res.b),
        },
        "noise": {
            "C": poly(&res.c),
            "Lambda": matrix(&res.lambda),
            "residual_covariance": matrix(&s.lambda_bar),
        },
        "components_discrete": {
            "Xbar": poly(&res.xbar),
            "Ybar": poly(&res.ybar),
        },
        "components_continuous": {
            "Ts": res.ts,
            "network": continuous(&res.continuous),
        },
        "topology": edges(&res.topology),
        "diagnostics": {
            "feasibility": d.feasibility,
            "a0_rank": {
                "full_rank": d.a0_rank.full_rank,
                "sigma_min": d.a0_rank.sigma_min,
                "sigma_max": d.a0_rank.sigma_max,
            },
            "a_stability": stability(&d.a_stability),
            "c_stability": d.c_stability.as_ref().map(stability),
            "whiteness_max": d.whiteness_max,
            "whiteness_bound": d.whiteness_bound,
            "sign_violations": d.sign_violations,
            "identifiability": identifiability(&d.identifiability),
            "informativity": informativity(&d.informativity),
            "warnings": d.warnings,
        },
    })
}
