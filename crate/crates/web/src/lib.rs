//! Browser bindings: the worked example, tuning a builtin kernel, and the
//! cost breakdown of a single draft.

use serde_json::json;
use wasm_bindgen::prelude::*;

use pimdcc::backend::{attacc_like, hbm_pim_like};
use pimdcc::driver::{tune, Mode, TuneConfig};
use pimdcc::ir::builtin;
use pimdcc::plan::{build_schedule_plan, PlanOptions};
use pimdcc::schedule::Space;
use pimdcc::sim::estimate_cost;
use pimdcc::tile::Strategy;
use pimdcc::BackendDescriptor;

fn backend(name: &str) -> Result<BackendDescriptor, String> {
    match name {
        "hbm-pim-like" => Ok(hbm_pim_like()),
        "attacc-like" => Ok(attacc_like()),
        _ => Err(format!("unknown backend `{name}`")),
    }
}

fn extents(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad extent `{x}`")))
        .collect()
}

pub fn demo_text(seed: u64) -> Result<String, String> {
    pimdcc::demo::fig4_walkthrough(seed)
        .map(|(text, _)| text)
        .map_err(|e| e.to_string())
}

/// JSON with the best draft, its cost and the search summary.
pub fn tune_json(
    kernel: &str,
    ext: &str,
    backend_name: &str,
    mode: &str,
) -> Result<String, String> {
    let k = builtin(kernel, &extents(ext)?).map_err(|e| e.to_string())?;
    let b = backend(backend_name)?;
    let mode: Mode = mode.parse().map_err(|e: pimdcc::Error| e.to_string())?;
    if mode == Mode::Predictor {
        return Err("the predictor mode is not available in the browser".into());
    }
    let space = Space::new(k.clone());
    let r = tune(&TuneConfig::new(k, b, mode)).map_err(|e| e.to_string())?;
    Ok(r.summary_json(&space).to_string())
}

/// JSON cost breakdown of one draft under one strategy.
pub fn breakdown_json(
    kernel: &str,
    ext: &str,
    backend_name: &str,
    draft: &str,
    strategy: &str,
) -> Result<String, String> {
    let k = builtin(kernel, &extents(ext)?).map_err(|e| e.to_string())?;
    let b = backend(backend_name)?;
    let space = Space::new(k);
    let d = space
        .parse_draft(draft)
        .ok_or_else(|| format!("`{draft}` is not a draft of this kernel"))?;
    if d.total_groups() > b.groups || d.cores_per_group() > b.cores_per_group {
        return Err("draft does not fit the backend".into());
    }
    let s = match strategy {
        "sparse" => Strategy::Sparse,
        _ => Strategy::Expand,
    };
    let plan =
        build_schedule_plan(&space, &d, &b, PlanOptions::new(s)).map_err(|e| e.to_string())?;
    let cost = estimate_cost(&plan, &b);
    let (gc, bc) = plan.command_counts();
    Ok(json!({
        "draft": plan.draft_text,
        "strategy": plan.strategy.name(),
        "strategy_matters": plan.strategy_matters,
        "active_cores": plan.cores.len(),
        "group_commands": gc,
        "bank_commands": bc,
        "cost": cost,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn fig4_demo(seed: u32) -> Result<String, JsError> {
    demo_text(seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tune_kernel(
    kernel: &str,
    extents: &str,
    backend: &str,
    mode: &str,
) -> Result<String, JsError> {
    tune_json(kernel, extents, backend, mode).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cost_breakdown(
    kernel: &str,
    extents: &str,
    backend: &str,
    draft: &str,
    strategy: &str,
) -> Result<String, JsError> {
    breakdown_json(kernel, extents, backend, draft, strategy).map_err(|e| JsError::new(&e))
}
