//! Dimension sets, resource-allocation enumeration and tiling drafts.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ir::{IndexExpr, Kernel, TensorId, VarId};

/// All mapping functions attached to one tensor dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceSet {
    pub tensor: TensorId,
    pub dim: usize,
    pub funcs: Vec<IndexExpr>,
}

/// Tensor dimensions connected through shared loop variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimensionSet {
    pub members: Vec<ReferenceSet>,
    pub vars: Vec<VarId>,
}

/// One (tensor dimension, mapping function) pair of a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Representative {
    pub tensor: TensorId,
    pub dim: usize,
    pub func: IndexExpr,
}

impl DimensionSet {
    /// Every representative choice, members in order then functions in order.
    pub fn choices(&self) -> Vec<Representative> {
        self.members
            .iter()
            .flat_map(|m| {
                m.funcs.iter().map(move |&func| Representative {
                    tensor: m.tensor,
                    dim: m.dim,
                    func,
                })
            })
            .collect()
    }

    pub fn choice_count(&self) -> usize {
        self.members.iter().map(|m| m.funcs.len()).sum()
    }

    pub fn contains_var(&self, v: VarId) -> bool {
        self.vars.contains(&v)
    }

    /// `(A0={b,b+1}, C0={b})`
    pub fn render(&self, k: &Kernel) -> String {
        let parts: Vec<String> = self
            .members
            .iter()
            .map(|m| {
                let fs: Vec<String> = m.funcs.iter().map(|f| f.render(k)).collect();
                format!("{}={{{}}}", k.dim_name(m.tensor, m.dim), fs.join(","))
            })
            .collect();
        format!("({})", parts.join(", "))
    }
}

/// Group the kernel's tensor dimensions into connected components of the
/// tensor-dimension / loop-variable graph.
pub fn build_dimension_sets(k: &Kernel) -> Vec<DimensionSet> {
    // Nodes: tensor dims first, then loop vars.
    let mut dim_ids: Vec<(TensorId, usize)> = Vec::new();
    for (t, decl) in k.tensors.iter().enumerate() {
        for d in 0..decl.rank() {
            dim_ids.push((t, d));
        }
    }
    let node_of = |t: TensorId, d: usize| dim_ids.iter().position(|&x| x == (t, d)).unwrap();
    let n = dim_ids.len() + k.vars.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut funcs: Vec<Vec<IndexExpr>> = vec![Vec::new(); dim_ids.len()];
    for (_, r, _) in k.all_refs() {
        for (d, e) in r.index.iter().enumerate() {
            let a = node_of(r.tensor, d);
            if !funcs[a].contains(e) {
                funcs[a].push(*e);
            }
            let b = dim_ids.len() + e.var;
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    // Roots are the smallest node of each component, and dims come first, so
    // iterating dims in declaration order yields the canonical set order.
    let mut by_root: Vec<(usize, DimensionSet)> = Vec::new();
    for (node, &(t, d)) in dim_ids.iter().enumerate() {
        let root = find(&mut parent, node);
        let mut fs = funcs[node].clone();
        fs.sort();
        let member = ReferenceSet {
            tensor: t,
            dim: d,
            funcs: fs,
        };
        match by_root.iter_mut().find(|(r, _)| *r == root) {
            Some((_, set)) => set.members.push(member),
            None => by_root.push((
                root,
                DimensionSet {
                    members: vec![member],
                    vars: Vec::new(),
                },
            )),
        }
    }
    for v in 0..k.vars.len() {
        let root = find(&mut parent, dim_ids.len() + v);
        if let Some((_, set)) = by_root.iter_mut().find(|(r, _)| *r == root) {
            set.vars.push(v);
        }
    }
    by_root.into_iter().map(|(_, s)| s).collect()
}

pub type Allocation = Vec<(usize, usize)>;

/// All allocation vectors for `n` sets, with availability divided (floor)
/// by each allocation along the way. Memoized on (set, groups, cores).
pub fn enumerate_allocations(n: usize, groups: usize, cores: usize) -> Vec<Allocation> {
    let mut memo: HashMap<(usize, usize, usize), Arc<Vec<Allocation>>> = HashMap::new();
    let out = alloc_rec(0, n, groups, cores, &mut memo);
    Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone())
}

fn alloc_rec(
    i: usize,
    n: usize,
    ag: usize,
    ac: usize,
    memo: &mut HashMap<(usize, usize, usize), Arc<Vec<Allocation>>>,
) -> Arc<Vec<Allocation>> {
    if i == n {
        return Arc::new(vec![Vec::new()]);
    }
    if let Some(hit) = memo.get(&(i, ag, ac)) {
        return hit.clone();
    }
    let mut out = Vec::new();
    for g in 1..=ag {
        for c in 1..=ac {
            let rest = alloc_rec(i + 1, n, ag / g, ac / c, memo);
            for suffix in rest.iter() {
                let mut v = Vec::with_capacity(n - i);
                v.push((g, c));
                v.extend_from_slice(suffix);
                out.push(v);
            }
        }
    }
    let out = Arc::new(out);
    memo.insert((i, ag, ac), out.clone());
    out
}

/// Un-memoized reference enumeration, kept for checking the memoized one.
pub fn enumerate_allocations_naive(n: usize, groups: usize, cores: usize) -> Vec<Allocation> {
    fn rec(
        i: usize,
        n: usize,
        ag: usize,
        ac: usize,
        prefix: &mut Allocation,
        out: &mut Vec<Allocation>,
    ) {
        if i == n {
            out.push(prefix.clone());
            return;
        }
        for g in 1..=ag {
            for c in 1..=ac {
                prefix.push((g, c));
                rec(i + 1, n, ag / g, ac / c, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n, groups, cores, &mut Vec::new(), &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Part {
    pub groups: usize,
    pub cores: usize,
    /// Index into the set's [`DimensionSet::choices`].
    pub choice: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TilingDraft {
    pub parts: Vec<Part>,
}

impl TilingDraft {
    /// Position in enumeration order: allocations first, then choices.
    pub fn canonical_key(&self) -> (Vec<usize>, Vec<usize>) {
        let alloc = self
            .parts
            .iter()
            .flat_map(|p| [p.groups, p.cores])
            .collect();
        let choices = self.parts.iter().map(|p| p.choice).collect();
        (alloc, choices)
    }

    pub fn total_groups(&self) -> usize {
        self.parts.iter().map(|p| p.groups).product()
    }

    pub fn cores_per_group(&self) -> usize {
        self.parts.iter().map(|p| p.cores).product()
    }

    /// `[[2,2,A0^b],[1,1,A1^{i*2}],[1,1,B1^k]]`
    pub fn render(&self, space: &Space) -> String {
        let parts: Vec<String> = self
            .parts
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let r = space.rep(s, p.choice);
                let f = r.func.render(&space.kernel);
                let f = if f.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    f
                } else {
                    format!("{{{f}}}")
                };
                format!(
                    "[{},{},{}^{}]",
                    p.groups,
                    p.cores,
                    space.kernel.dim_name(r.tensor, r.dim),
                    f
                )
            })
            .collect();
        format!("[{}]", parts.join(","))
    }
}

impl PartialOrd for TilingDraft {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TilingDraft {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical_key().cmp(&other.canonical_key())
    }
}

/// A kernel with its dimension sets and cached representative choices.
#[derive(Debug, Clone)]
pub struct Space {
    pub kernel: Kernel,
    pub sets: Vec<DimensionSet>,
    choices: Vec<Vec<Representative>>,
}

impl Space {
    pub fn new(kernel: Kernel) -> Self {
        let sets = build_dimension_sets(&kernel);
        let choices = sets.iter().map(|s| s.choices()).collect();
        Space {
            kernel,
            sets,
            choices,
        }
    }

    pub fn rep(&self, set: usize, choice: usize) -> Representative {
        self.choices[set][choice]
    }

    pub fn choices(&self, set: usize) -> &[Representative] {
        &self.choices[set]
    }

    /// Extent of the representative's tensor dimension.
    pub fn extent(&self, set: usize, choice: usize) -> usize {
        let r = self.rep(set, choice);
        self.kernel.tensors[r.tensor].dims[r.dim]
    }

    /// Ceiling tile length of one part.
    pub fn tile_len(&self, set: usize, part: &Part) -> usize {
        self.extent(set, part.choice)
            .div_ceil(part.groups * part.cores)
    }

    /// Set index holding loop variable `v`.
    pub fn set_of_var(&self, v: VarId) -> usize {
        self.sets
            .iter()
            .position(|s| s.contains_var(v))
            .expect("every loop variable indexes some tensor")
    }

    /// Find a draft by its rendered form.
    pub fn parse_draft(&self, text: &str) -> Option<TilingDraft> {
        let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
        let mut parts = Vec::new();
        for (s, chunk) in inner.split("],[").enumerate() {
            let chunk = chunk.trim_matches(|c| c == '[' || c == ']');
            let mut it = chunk.splitn(3, ',');
            let groups = it.next()?.trim().parse().ok()?;
            let cores = it.next()?.trim().parse().ok()?;
            let rep = it.next()?.trim();
            if s >= self.sets.len() {
                return None;
            }
            let choice = (0..self.choices[s].len()).find(|&c| {
                let d = TilingDraft {
                    parts: vec![Part {
                        groups,
                        cores,
                        choice: c,
                    }],
                };
                let one = Space {
                    kernel: self.kernel.clone(),
                    sets: vec![self.sets[s].clone()],
                    choices: vec![self.choices[s].clone()],
                };
                d.render(&one) == format!("[[{groups},{cores},{rep}]]")
            })?;
            parts.push(Part {
                groups,
                cores,
                choice,
            });
        }
        (parts.len() == self.sets.len()).then_some(TilingDraft { parts })
    }
}

/// Cross product of allocations and representative choices, in canonical
/// order (last set's choice varies fastest).
pub fn generate_drafts(space: &Space, allocations: &[Allocation]) -> Vec<TilingDraft> {
    let counts: Vec<usize> = space.sets.iter().map(|s| s.choice_count()).collect();
    let combos: usize = counts.iter().product();
    let mut out = Vec::with_capacity(allocations.len() * combos);
    for alloc in allocations {
        for mut idx in 0..combos {
            let mut choice = vec![0; counts.len()];
            for s in (0..counts.len()).rev() {
                choice[s] = idx % counts[s];
                idx /= counts[s];
            }
            out.push(TilingDraft {
                parts: alloc
                    .iter()
                    .zip(&choice)
                    .map(|(&(groups, cores), &choice)| Part {
                        groups,
                        cores,
                        choice,
                    })
                    .collect(),
            });
        }
    }
    out
}

/// Every draft of a kernel on a backend of `groups` x `cores`.
pub fn all_drafts(space: &Space, groups: usize, cores: usize) -> Vec<TilingDraft> {
    let allocs = enumerate_allocations(space.sets.len(), groups, cores);
    generate_drafts(space, &allocs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{builtin, fig4_kernel, parse_kernel};
    use proptest::prelude::*;

    #[test]
    fn fig4_dimension_sets() {
        let k = fig4_kernel();
        let sets = build_dimension_sets(&k);
        let shown: Vec<String> = sets.iter().map(|s| s.render(&k)).collect();
        assert_eq!(
            shown,
            vec![
                "(A0={b,b+1}, C0={b})",
                "(A1={i,i*2}, B0={i})",
                "(B1={k}, C1={k})"
            ]
        );
    }

    #[test]
    fn va_is_one_set() {
        let k = builtin("va", &[8]).unwrap();
        assert_eq!(build_dimension_sets(&k).len(), 1);
    }

    #[test]
    fn disjoint_vars_give_singletons() {
        let k = parse_kernel(
            "kernel t\ntensor A [4] : input\ntensor B [3] : input\ntensor C [4][3] : output\n\
             for i in 0..4 { for j in 0..3 { C[i][j] = A[i] * B[j] } }",
        )
        .unwrap();
        // A0,C0 share i; B0,C1 share j.
        assert_eq!(build_dimension_sets(&k).len(), 2);
        let k = parse_kernel(
            "kernel t\ntensor A [4] : input\ntensor C [4] : output\ntensor D [3] : output\ntensor B [3] : input\n\
             for i in 0..4 { C[i] = A[i] }\nfor j in 0..3 { D[j] = B[j] }",
        )
        .unwrap();
        let sets = build_dimension_sets(&k);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].members.len(), 2);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(
            enumerate_allocations(1, 2, 2),
            vec![vec![(1, 1)], vec![(1, 2)], vec![(2, 1)], vec![(2, 2)]]
        );
        assert_eq!(
            enumerate_allocations(2, 2, 1),
            vec![
                vec![(1, 1), (1, 1)],
                vec![(1, 1), (2, 1)],
                vec![(2, 1), (1, 1)]
            ]
        );
        assert_eq!(enumerate_allocations(1, 1, 1), vec![vec![(1, 1)]]);
    }

    #[test]
    fn fig4_first_draft_and_choices() {
        let space = Space::new(fig4_kernel());
        let reps: Vec<String> = (0..3)
            .map(|c| {
                TilingDraft {
                    parts: vec![Part {
                        groups: 1,
                        cores: 1,
                        choice: c,
                    }],
                }
                .render(&Space {
                    kernel: space.kernel.clone(),
                    sets: vec![space.sets[0].clone()],
                    choices: vec![space.choices[0].clone()],
                })
            })
            .collect();
        assert_eq!(
            reps,
            vec!["[[1,1,A0^b]]", "[[1,1,A0^{b+1}]]", "[[1,1,C0^b]]"]
        );
        let drafts = all_drafts(&space, 1, 1);
        let shown: Vec<String> = drafts.iter().map(|d| d.render(&space)).collect();
        assert!(shown.contains(&"[[1,1,A0^{b+1}],[1,1,A1^{i*2}],[1,1,B1^k]]".to_string()));
        assert_eq!(space.choices(2).len(), 2);
    }

    #[test]
    fn draft_render_parses_back() {
        let space = Space::new(fig4_kernel());
        for d in all_drafts(&space, 2, 2).iter().take(50) {
            assert_eq!(space.parse_draft(&d.render(&space)).as_ref(), Some(d));
        }
    }

    proptest! {
        #[test]
        fn memoization_is_transparent(n in 1usize..=4, g in 1usize..=8, c in 1usize..=8) {
            prop_assert_eq!(enumerate_allocations(n, g, c), enumerate_allocations_naive(n, g, c));
        }

        #[test]
        fn draft_count_matches_product(g in 1usize..=4, c in 1usize..=4) {
            let space = Space::new(fig4_kernel());
            let allocs = enumerate_allocations(3, g, c);
            let drafts = generate_drafts(&space, &allocs);
            prop_assert_eq!(drafts.len(), allocs.len() * 3 * 3 * 2);
            let mut sorted = drafts.clone();
            sorted.sort();
            prop_assert_eq!(sorted, drafts);
        }

        #[test]
        fn allocations_respect_budget(n in 1usize..=3, g in 1usize..=16, c in 1usize..=16) {
            for a in enumerate_allocations(n, g, c) {
                prop_assert!(a.iter().map(|x| x.0).product::<usize>() <= g);
                prop_assert!(a.iter().map(|x| x.1).product::<usize>() <= c);
            }
        }
    }
}
