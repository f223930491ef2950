//! Draft pruning: duplicate representatives, SIMD alignment, worst-core
//! equivalence.

use std::collections::HashMap;

use serde::Serialize;

use crate::backend::BackendDescriptor;
use crate::ir::{AssignOp, Expr, IndexExpr};
use crate::schedule::{Space, TilingDraft};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneOptions {
    pub rule1: bool,
    pub rule2: bool,
    pub rule3: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            rule1: true,
            rule2: true,
            rule3: true,
        }
    }
}

impl PruneOptions {
    pub fn none() -> Self {
        PruneOptions {
            rule1: false,
            rule2: false,
            rule3: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Removal {
    pub rule: u8,
    pub removed: TilingDraft,
    /// Kept equivalent draft; `None` for alignment removals.
    pub witness: Option<TilingDraft>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PruneReport {
    pub input: usize,
    pub kept: usize,
    pub removed: [usize; 3],
    /// Set when every draft failed alignment and the rule was skipped.
    pub rule2_skipped: bool,
    pub removals: Vec<Removal>,
}

#[derive(Serialize)]
struct RemovalJson {
    rule: u8,
    removed: String,
    witness: Option<String>,
}

#[derive(Serialize)]
struct ReportJson {
    input: usize,
    kept: usize,
    rule1_removed: usize,
    rule2_removed: usize,
    rule3_removed: usize,
    rule2_skipped: bool,
    removals: Vec<RemovalJson>,
}

impl PruneReport {
    pub fn to_json(&self, space: &Space, with_removals: bool) -> serde_json::Value {
        let removals = if with_removals {
            self.removals
                .iter()
                .map(|r| RemovalJson {
                    rule: r.rule,
                    removed: r.removed.render(space),
                    witness: r.witness.as_ref().map(|w| w.render(space)),
                })
                .collect()
        } else {
            Vec::new()
        };
        serde_json::to_value(ReportJson {
            input: self.input,
            kept: self.kept,
            rule1_removed: self.removed[0],
            rule2_removed: self.removed[1],
            rule3_removed: self.removed[2],
            rule2_skipped: self.rule2_skipped,
            removals,
        })
        .expect("report serializes")
    }
}

/// Collapse drafts into equivalence classes under `key`, keeping the
/// canonically smallest member. Output is in canonical order.
fn collapse<K: std::hash::Hash + Eq>(
    drafts: Vec<TilingDraft>,
    rule: u8,
    key: impl Fn(&TilingDraft) -> K,
) -> (Vec<TilingDraft>, Vec<Removal>) {
    let mut sorted = drafts;
    sorted.sort();
    sorted.dedup();
    let mut first: HashMap<K, usize> = HashMap::new();
    let mut kept = Vec::new();
    let mut removals = Vec::new();
    for d in sorted {
        let k = key(&d);
        match first.get(&k) {
            Some(&i) => removals.push(Removal {
                rule,
                witness: Some(kept_clone(&kept, i)),
                removed: d,
            }),
            None => {
                first.insert(k, kept.len());
                kept.push(d);
            }
        }
    }
    (kept, removals)
}

fn kept_clone(kept: &[TilingDraft], i: usize) -> TilingDraft {
    kept[i].clone()
}

type FnKey = (usize, i64, i64);

fn fn_key(f: &IndexExpr) -> FnKey {
    (f.var, f.scale, f.offset)
}

/// Rule 1: same groups, cores, mapping function and tile length in every part.
pub fn rule1_dedupe(space: &Space, drafts: Vec<TilingDraft>) -> (Vec<TilingDraft>, Vec<Removal>) {
    collapse(drafts, 1, |d| {
        d.parts
            .iter()
            .enumerate()
            .map(|(s, p)| {
                (
                    p.groups,
                    p.cores,
                    fn_key(&space.rep(s, p.choice).func),
                    space.tile_len(s, p),
                )
            })
            .collect::<Vec<_>>()
    })
}

/// Sets carrying the lane (innermost) loop variable of an arithmetic statement.
pub fn simd_sets(space: &Space) -> Vec<usize> {
    let mut out = Vec::new();
    for st in &space.kernel.stmts {
        let arith = st.op == AssignOp::Accumulate
            || st.rhs.is_binary_arith()
            || matches!(st.rhs, Expr::Exp(_));
        if !arith {
            continue;
        }
        let s = space.set_of_var(st.inner_var());
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out.sort();
    out
}

/// Every core's lane length is the same multiple of d. A split that leaves
/// a ragged last tile is not aligned even if its ceiling length is.
fn aligned(space: &Space, sets: &[usize], d: usize, draft: &TilingDraft) -> bool {
    sets.iter().all(|&s| {
        let p = &draft.parts[s];
        let n = p.groups * p.cores;
        let e = space.extent(s, p.choice);
        e.is_multiple_of(n) && (e / n).is_multiple_of(d)
    })
}

/// Rule 2: drop drafts whose per-core lane length is not a multiple of d.
/// Skipped when d = 0 or when it would remove everything.
pub fn rule2_simd_alignment(
    space: &Space,
    backend: &BackendDescriptor,
    drafts: Vec<TilingDraft>,
) -> (Vec<TilingDraft>, Vec<Removal>, bool) {
    let d = backend.simd_width_d;
    if d == 0 || drafts.is_empty() {
        return (drafts, Vec::new(), false);
    }
    let sets = simd_sets(space);
    let (keep, drop): (Vec<_>, Vec<_>) = drafts
        .into_iter()
        .partition(|x| aligned(space, &sets, d, x));
    if keep.is_empty() {
        return (drop, Vec::new(), true);
    }
    let removals = drop
        .into_iter()
        .map(|removed| Removal {
            rule: 2,
            removed,
            witness: None,
        })
        .collect();
    (keep, removals, false)
}

/// Largest data-tile length per group for one part.
pub fn worst_per_group(extent: usize, groups: usize, cores: usize) -> Vec<usize> {
    let t = extent.div_ceil(groups * cores);
    (0..groups)
        .map(|i| t.min(extent.saturating_sub(i * cores * t)))
        .collect()
}

/// Rule 3: same group count, mapping function and per-group worst tile
/// lengths in every part.
pub fn rule3_worst_core_dedupe(
    space: &Space,
    drafts: Vec<TilingDraft>,
) -> (Vec<TilingDraft>, Vec<Removal>) {
    collapse(drafts, 3, |d| {
        d.parts
            .iter()
            .enumerate()
            .map(|(s, p)| {
                (
                    p.groups,
                    fn_key(&space.rep(s, p.choice).func),
                    worst_per_group(space.extent(s, p.choice), p.groups, p.cores),
                )
            })
            .collect::<Vec<_>>()
    })
}

/// Rules 1, 2, 3 in order.
pub fn prune(
    space: &Space,
    backend: &BackendDescriptor,
    drafts: Vec<TilingDraft>,
    opts: PruneOptions,
) -> (Vec<TilingDraft>, PruneReport) {
    let mut report = PruneReport {
        input: drafts.len(),
        ..Default::default()
    };
    let mut cur = drafts;
    if opts.rule1 {
        let (k, r) = rule1_dedupe(space, cur);
        report.removed[0] = r.len();
        report.removals.extend(r);
        cur = k;
    }
    if opts.rule2 {
        let (k, r, skipped) = rule2_simd_alignment(space, backend, cur);
        report.removed[1] = r.len();
        report.rule2_skipped = skipped;
        report.removals.extend(r);
        cur = k;
    }
    if opts.rule3 {
        let (k, r) = rule3_worst_core_dedupe(space, cur);
        report.removed[2] = r.len();
        report.removals.extend(r);
        cur = k;
    }
    // A Rule-1 witness may itself fall to Rule 3; point at the final survivor.
    let next: HashMap<TilingDraft, TilingDraft> = report
        .removals
        .iter()
        .filter_map(|r| r.witness.clone().map(|w| (r.removed.clone(), w)))
        .collect();
    for r in &mut report.removals {
        while let Some(w) = r.witness.as_ref().and_then(|w| next.get(w)) {
            r.witness = Some(w.clone());
        }
    }
    cur.sort();
    report.kept = cur.len();
    (cur, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::hbm_pim_like;
    use crate::ir::{builtin, fig4_kernel};
    use crate::schedule::all_drafts;
    use proptest::prelude::*;

    fn d(space: &Space, s: &str) -> TilingDraft {
        space
            .parse_draft(s)
            .unwrap_or_else(|| panic!("bad draft {s}"))
    }

    #[test]
    fn worst_lengths() {
        assert_eq!(worst_per_group(12, 2, 3), vec![2, 2]);
        assert_eq!(worst_per_group(12, 2, 4), vec![2, 2]);
        assert_eq!(worst_per_group(12, 2, 2), vec![3, 3]);
        assert_eq!(worst_per_group(10, 4, 1), vec![3, 3, 3, 1]);
        assert_eq!(worst_per_group(3, 4, 1), vec![1, 1, 1, 0]);
    }

    #[test]
    fn rule1_keeps_distinct_core_counts() {
        let space = Space::new(fig4_kernel());
        let a = d(&space, "[[1,1,A0^b],[1,1,A1^i],[1,1,B1^k]]");
        let b = d(&space, "[[1,2,A0^b],[1,1,A1^i],[1,1,B1^k]]");
        let (kept, rem) = rule1_dedupe(&space, vec![a.clone(), b.clone()]);
        assert_eq!(kept, vec![a.clone(), b]);
        assert!(rem.is_empty());
        let (kept, _) = rule1_dedupe(&space, vec![a.clone()]);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn rule2_examples() {
        let space = Space::new(fig4_kernel());
        let hbm = hbm_pim_like();
        let four = d(&space, "[[1,1,A0^b],[1,1,A1^i],[1,4,B1^k]]");
        let one = d(&space, "[[1,1,A0^b],[1,1,A1^i],[1,1,B1^k]]");
        let (kept, rem, skipped) =
            rule2_simd_alignment(&space, &hbm, vec![four.clone(), one.clone()]);
        assert_eq!(kept, vec![one]);
        assert_eq!(rem.len(), 1);
        assert!(!skipped);
        let mut no_simd = hbm.clone();
        no_simd.simd_width_d = 0;
        let (kept, _, _) = rule2_simd_alignment(&space, &no_simd, vec![four.clone()]);
        assert_eq!(kept, vec![four.clone()]);
        // Never empties the set.
        let (kept, _, skipped) = rule2_simd_alignment(&space, &hbm, vec![four.clone()]);
        assert_eq!(kept, vec![four]);
        assert!(skipped);
    }

    #[test]
    fn rule3_empty_and_distinct() {
        let space = Space::new(fig4_kernel());
        assert!(rule3_worst_core_dedupe(&space, vec![]).0.is_empty());
        let a = d(&space, "[[1,4,A0^b],[1,1,A1^i],[1,1,B1^k]]"); // worst 3
        let b = d(&space, "[[1,6,A0^b],[1,1,A1^i],[1,1,B1^k]]"); // worst 2
        assert_eq!(rule3_worst_core_dedupe(&space, vec![a, b]).0.len(), 2);
    }

    #[test]
    fn simd_lane_set_for_gemv_is_output_dim() {
        let space = Space::new(builtin("gemv", &[1, 8, 16]).unwrap());
        assert_eq!(simd_sets(&space), vec![2]);
        let space = Space::new(fig4_kernel());
        assert_eq!(simd_sets(&space), vec![2]);
    }

    proptest! {
        #[test]
        fn prune_is_idempotent_and_accounts(g in 1usize..=4, c in 1usize..=4, e in 1usize..=20) {
            let space = Space::new(builtin("gemv", &[2, e, 16]).unwrap());
            let hbm = hbm_pim_like();
            let drafts = all_drafts(&space, g, c);
            let n = drafts.len();
            let (once, rep) = prune(&space, &hbm, drafts, PruneOptions::default());
            prop_assert_eq!(rep.input, n);
            prop_assert_eq!(rep.input, rep.kept + rep.removed.iter().sum::<usize>());
            prop_assert!(!once.is_empty());
            for r in &rep.removals {
                prop_assert!(r.rule == 2 || r.witness.is_some());
            }
            let (twice, _) = prune(&space, &hbm, once.clone(), PruneOptions::default());
            prop_assert_eq!(twice, once);
        }
    }
}
