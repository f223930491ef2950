//! Walkthrough of the worked GEMV-like example, stage by stage.

use std::fmt::Write;

use serde_json::{json, Value};

use crate::backend::{hbm_pim_like, BackendDescriptor};
use crate::error::Result;
use crate::ir::{fig4_kernel, reference_execute, FIG4_SOURCE};
use crate::plan::{build_schedule_plan, PlanOptions};
use crate::prune::{prune, PruneOptions};
use crate::schedule::{all_drafts, Space};
use crate::sim::{estimate_cost, functional_execute};
use crate::tensor::{max_rel_error, random_inputs};
use crate::tile::{
    derive_compute_tiles, lower_data_tiles, materialize_layouts, IndexSet, Strategy,
};

/// The draft the walkthrough lowers.
pub const DEMO_DRAFT: &str = "[[2,2,A0^b],[1,1,A1^i],[1,1,B1^k]]";

/// Two groups of four cores, otherwise hbm-pim-like.
pub fn demo_backend() -> BackendDescriptor {
    let mut b = hbm_pim_like();
    b.name = "fig4-demo".into();
    b.num_channels = 2;
    b.groups = 2;
    b.cores_per_group = 4;
    b
}

pub fn render_set(s: &IndexSet) -> String {
    match s {
        IndexSet::Range { lo, hi } => format!("[{lo},{hi})"),
        _ => {
            let items: Vec<String> = s.iter().map(|x| x.to_string()).collect();
            format!("{{{}}}", items.join(","))
        }
    }
}

/// Human text and a machine-readable record of every stage.
pub fn fig4_walkthrough(seed: u64) -> Result<(String, Value)> {
    let b = demo_backend();
    let k = fig4_kernel();
    let space = Space::new(k.clone());
    let mut out = String::new();
    let w = &mut out;

    let _ = writeln!(w, "== kernel\n{}", FIG4_SOURCE.trim_end());
    let sets: Vec<String> = space.sets.iter().map(|s| s.render(&k)).collect();
    let _ = writeln!(w, "\n== dimension sets");
    for (i, s) in sets.iter().enumerate() {
        let _ = writeln!(w, "set {i}: {s}");
    }

    let drafts = all_drafts(&space, b.groups, b.cores_per_group);
    let _ = writeln!(
        w,
        "\n== drafts on {} groups x {} cores: {}",
        b.groups,
        b.cores_per_group,
        drafts.len()
    );
    for d in drafts.iter().take(3) {
        let _ = writeln!(w, "  {}", d.render(&space));
    }

    let (kept, report) = prune(&space, &b, drafts, PruneOptions::default());
    let _ = writeln!(
        w,
        "\n== pruning: kept {} of {} (rule 1 -{}, rule 2 -{}, rule 3 -{})",
        report.kept, report.input, report.removed[0], report.removed[1], report.removed[2]
    );
    for rule in 1..=3u8 {
        if let Some(r) = report.removals.iter().find(|r| r.rule == rule) {
            let witness = r
                .witness
                .as_ref()
                .map(|d| format!(" (same as {})", d.render(&space)))
                .unwrap_or_default();
            let _ = writeln!(
                w,
                "  rule {rule} removes {}{witness}",
                r.removed.render(&space)
            );
        }
    }

    let draft = space.parse_draft(DEMO_DRAFT).expect("demo draft exists");
    let parts = lower_data_tiles(&space, &draft);
    let tiles = derive_compute_tiles(&space, &draft, &parts);
    let _ = writeln!(w, "\n== draft {DEMO_DRAFT}");
    let mut part_json = Vec::new();
    for (s, p) in parts.iter().enumerate() {
        let (lo, hi) = p.tile(0);
        let _ = writeln!(
            w,
            "set {s}: extent {} tile length {} first tile [{lo},{hi})",
            p.extent, p.t
        );
        part_json.push(json!({ "extent": p.extent, "tile": p.t, "first": [lo, hi] }));
    }
    let mut tile_json = Vec::new();
    for t in &tiles {
        let ranges: Vec<String> = t
            .ranges
            .iter()
            .enumerate()
            .map(|(v, (lo, hi))| {
                format!(
                    "{}={}",
                    k.vars[v].name,
                    render_set(&IndexSet::Range { lo: *lo, hi: *hi })
                )
            })
            .collect();
        let _ = writeln!(w, "  G{}C{} loops {}", t.group, t.core, ranges.join(" "));
        tile_json.push(json!({ "group": t.group, "core": t.core, "ranges": t.ranges }));
    }

    let mut strat_json = Vec::new();
    let inputs = random_inputs(&k, seed);
    let want = reference_execute(&k, &inputs)?;
    for s in [Strategy::Expand, Strategy::Sparse] {
        let layouts = materialize_layouts(&k, &parts, &tiles, s, b.element_bytes as u64);
        let a = k.tensor_id("A").expect("fixture has A");
        let first = layouts.iter().find(|l| l.tensor == a).expect("A is placed");
        let dims: Vec<String> = first.dims.iter().map(render_set).collect();
        let plan = build_schedule_plan(&space, &draft, &b, PlanOptions::new(s))?;
        let cost = estimate_cost(&plan, &b);
        let err = max_rel_error(&functional_execute(&plan, &inputs)?, &want)?;
        let (gc, bc) = plan.command_counts();
        let _ = writeln!(
            w,
            "\n== {}: A on G0C0 = {}\n  commands group {gc} bank {bc}\n  t_in {:.1} t_compute {:.1} t_out {:.1} t_total {:.1}\n  max rel err vs reference {err:.1e}",
            s.name(),
            dims.join(" x "),
            cost.t_input_rearrange,
            cost.t_compute,
            cost.t_output_rearrange,
            cost.t_total
        );
        strat_json.push(json!({
            "strategy": s.name(),
            "a_on_g0c0": dims,
            "group_commands": gc,
            "bank_commands": bc,
            "cost": cost,
            "max_rel_err": err,
        }));
    }

    let record = json!({
        "backend": b.name,
        "dimension_sets": sets,
        "prune": report.to_json(&space, false),
        "kept": kept.len(),
        "draft": DEMO_DRAFT,
        "parts": part_json,
        "compute_tiles": tile_json,
        "strategies": strat_json,
    });
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walkthrough_is_deterministic() {
        let (a, ja) = fig4_walkthrough(3).unwrap();
        let (b, jb) = fig4_walkthrough(3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ja, jb);
        assert!(a.contains("set 0: (A0={b,b+1}, C0={b})"), "{a}");
        assert!(a.contains("tile length 3 first tile [0,3)"));
    }
}
