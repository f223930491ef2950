//! Lowering drafts to per-core data tiles, compute tiles and index sets.

use serde::{Deserialize, Serialize};

use crate::ir::{IndexExpr, Kernel, Statement, TensorId};
use crate::schedule::{Representative, Space, TilingDraft};

/// A set of tensor indices along one dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexSet {
    Range { lo: i64, hi: i64 },
    Strided { start: i64, step: i64, count: i64 },
    List { items: Vec<i64> },
}

impl IndexSet {
    pub fn empty() -> Self {
        IndexSet::Range { lo: 0, hi: 0 }
    }

    pub fn len(&self) -> usize {
        match self {
            IndexSet::Range { lo, hi } => (hi - lo).max(0) as usize,
            IndexSet::Strided { count, .. } => *count as usize,
            IndexSet::List { items } => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_contiguous(&self) -> bool {
        match self {
            IndexSet::Range { .. } => true,
            IndexSet::Strided { step, count, .. } => *step == 1 || *count <= 1,
            IndexSet::List { items } => items.windows(2).all(|w| w[1] == w[0] + 1),
        }
    }

    pub fn get(&self, i: usize) -> i64 {
        match self {
            IndexSet::Range { lo, .. } => lo + i as i64,
            IndexSet::Strided { start, step, .. } => start + step * i as i64,
            IndexSet::List { items } => items[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Smallest and one-past-largest member.
    pub fn hull(&self) -> (i64, i64) {
        if self.is_empty() {
            return (0, 0);
        }
        (self.get(0), self.get(self.len() - 1) + 1)
    }

    /// Local position of index `x`.
    pub fn position(&self, x: i64) -> Option<usize> {
        match self {
            IndexSet::Range { lo, hi } => (x >= *lo && x < *hi).then(|| (x - lo) as usize),
            IndexSet::Strided { start, step, count } => {
                let d = x - start;
                (d >= 0 && d % step == 0 && d / step < *count).then(|| (d / step) as usize)
            }
            IndexSet::List { items } => items.binary_search(&x).ok(),
        }
    }

    /// Positions of `a*v+c` for v in [lo, lo+len) as (first, step) when
    /// they are affine in v.
    pub fn affine_positions(&self, e: &IndexExpr, lo: i64) -> Option<(i64, i64)> {
        let first = e.eval(lo);
        match self {
            IndexSet::Range { lo: s, .. } => Some((first - s, e.scale)),
            IndexSet::Strided { start, step, .. } => ((first - start) % step == 0
                && e.scale % step == 0)
                .then(|| ((first - start) / step, e.scale / step)),
            IndexSet::List { .. } => None,
        }
    }

    /// Most compact form of a sorted, deduplicated index list.
    pub fn from_sorted(items: Vec<i64>) -> Self {
        match items.len() {
            0 => IndexSet::empty(),
            1 => IndexSet::Range {
                lo: items[0],
                hi: items[0] + 1,
            },
            n => {
                let step = items[1] - items[0];
                if items.windows(2).all(|w| w[1] - w[0] == step) {
                    if step == 1 {
                        IndexSet::Range {
                            lo: items[0],
                            hi: items[n - 1] + 1,
                        }
                    } else {
                        IndexSet::Strided {
                            start: items[0],
                            step,
                            count: n as i64,
                        }
                    }
                } else {
                    IndexSet::List { items }
                }
            }
        }
    }

    /// Image of v in [lo, hi) under `e`.
    pub fn image(e: &IndexExpr, lo: i64, hi: i64) -> Self {
        if hi <= lo {
            return IndexSet::empty();
        }
        if e.scale == 1 || hi - lo == 1 {
            IndexSet::Range {
                lo: e.eval(lo),
                hi: e.eval(lo) + if e.scale == 1 { hi - lo } else { 1 },
            }
        } else {
            IndexSet::Strided {
                start: e.eval(lo),
                step: e.scale,
                count: hi - lo,
            }
        }
    }

    pub fn is_subset_of(&self, other: &IndexSet) -> bool {
        match (self, other) {
            (IndexSet::Range { lo, hi }, IndexSet::Range { lo: a, hi: b }) => {
                lo >= hi || (lo >= a && hi <= b)
            }
            _ => self.iter().all(|x| other.position(x).is_some()),
        }
    }
}

/// Union of several index sets along one dimension.
pub fn union(sets: &[IndexSet]) -> IndexSet {
    let live: Vec<&IndexSet> = sets.iter().filter(|s| !s.is_empty()).collect();
    match live.len() {
        0 => return IndexSet::empty(),
        1 => return live[0].clone(),
        _ => {}
    }
    if live.iter().all(|s| matches!(s, IndexSet::Range { .. })) {
        let mut iv: Vec<(i64, i64)> = live.iter().map(|s| s.hull()).collect();
        iv.sort();
        let mut merged: Vec<(i64, i64)> = Vec::new();
        for (lo, hi) in iv {
            match merged.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => merged.push((lo, hi)),
            }
        }
        if merged.len() == 1 {
            return IndexSet::Range {
                lo: merged[0].0,
                hi: merged[0].1,
            };
        }
    }
    if live.windows(2).all(|w| w[0] == w[1]) {
        return live[0].clone();
    }
    let mut items: Vec<i64> = live.iter().flat_map(|s| s.iter()).collect();
    items.sort_unstable();
    items.dedup();
    IndexSet::from_sorted(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Expand,
    Sparse,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Expand => "expand",
            Strategy::Sparse => "sparse",
        }
    }
}

/// Tiling of one dimension set's representative dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartTiles {
    pub rep: Representative,
    pub extent: usize,
    pub groups: usize,
    pub cores: usize,
    /// Ceiling tile length.
    pub t: usize,
}

impl PartTiles {
    /// Data tile of tile index `tau = group * cores + core`.
    pub fn tile(&self, tau: usize) -> (usize, usize) {
        let lo = (tau * self.t).min(self.extent);
        let hi = ((tau + 1) * self.t).min(self.extent);
        (lo, hi)
    }
}

pub fn lower_data_tiles(space: &Space, draft: &TilingDraft) -> Vec<PartTiles> {
    draft
        .parts
        .iter()
        .enumerate()
        .map(|(s, p)| PartTiles {
            rep: space.rep(s, p.choice),
            extent: space.extent(s, p.choice),
            groups: p.groups,
            cores: p.cores,
            t: space.tile_len(s, p),
        })
        .collect()
}

/// Loop values v in [0, bound) with a*v+c in [lo, hi).
pub fn preimage(e: &IndexExpr, lo: i64, hi: i64, bound: i64) -> (i64, i64) {
    let a = e.scale;
    let first = (lo - e.offset + a - 1).div_euclid(a);
    let last = (hi - 1 - e.offset).div_euclid(a);
    let first = first.max(0);
    let end = (last + 1).min(bound);
    if end <= first {
        (0, 0)
    } else {
        (first, end)
    }
}

/// Per-core loop ranges for one physical core.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeTile {
    pub group: usize,
    pub core: usize,
    /// Tile index per dimension set.
    pub taus: Vec<usize>,
    /// [lo, hi) per loop variable.
    pub ranges: Vec<(i64, i64)>,
}

impl ComputeTile {
    /// Box of a statement in loop order, or None when empty.
    pub fn stmt_box(&self, st: &Statement) -> Option<Vec<(i64, i64)>> {
        let b: Vec<(i64, i64)> = st.loops.iter().map(|&v| self.ranges[v]).collect();
        b.iter().all(|(lo, hi)| hi > lo).then_some(b)
    }
}

/// Physical cores of a draft, ordered by (group, core). Group and core
/// indices are mixed-radix over the sets, set 0 most significant.
pub fn derive_compute_tiles(
    space: &Space,
    draft: &TilingDraft,
    parts: &[PartTiles],
) -> Vec<ComputeTile> {
    let k = &space.kernel;
    let n_groups = draft.total_groups();
    let n_cores = draft.cores_per_group();
    let mut out = Vec::with_capacity(n_groups * n_cores);
    for g in 0..n_groups {
        for c in 0..n_cores {
            let (mut gr, mut cr) = (g, c);
            let mut taus = vec![0; parts.len()];
            for s in (0..parts.len()).rev() {
                let gi = gr % parts[s].groups;
                gr /= parts[s].groups;
                let ci = cr % parts[s].cores;
                cr /= parts[s].cores;
                taus[s] = gi * parts[s].cores + ci;
            }
            let mut ranges: Vec<(i64, i64)> = k.vars.iter().map(|v| (0, v.extent as i64)).collect();
            for (s, p) in parts.iter().enumerate() {
                let (lo, hi) = p.tile(taus[s]);
                let f = p.rep.func;
                ranges[f.var] = preimage(&f, lo as i64, hi as i64, k.vars[f.var].extent as i64);
            }
            out.push(ComputeTile {
                group: g,
                core: c,
                taus,
                ranges,
            });
        }
    }
    out
}

/// Whether statement `s` runs on this core: its box is non-empty and it is
/// executed only once across sets whose representative variable it does not
/// use (on tile 0 of those sets).
pub fn stmt_active(k: &Kernel, parts: &[PartTiles], tile: &ComputeTile, s: usize) -> bool {
    let st = &k.stmts[s];
    for (i, p) in parts.iter().enumerate() {
        if !st.loops.contains(&p.rep.func.var) && tile.taus[i] != 0 {
            return false;
        }
    }
    st.loops
        .iter()
        .all(|&v| tile.ranges[v].1 > tile.ranges[v].0)
}

/// Needed indices of one tensor on one core, per dimension, before any
/// strategy is applied: one image per (reference, dimension).
pub fn needed_images(
    k: &Kernel,
    tile: &ComputeTile,
    active: &[bool],
    t: TensorId,
) -> Vec<Vec<IndexSet>> {
    let rank = k.tensors[t].rank();
    let mut per_dim: Vec<Vec<IndexSet>> = vec![Vec::new(); rank];
    for (s, st) in k.stmts.iter().enumerate() {
        if !active[s] {
            continue;
        }
        let refs = std::iter::once(&st.dst).chain(st.rhs.refs());
        for r in refs {
            if r.tensor != t {
                continue;
            }
            for (d, e) in r.index.iter().enumerate() {
                let (lo, hi) = tile.ranges[e.var];
                let img = IndexSet::image(e, lo, hi);
                if !per_dim[d].contains(&img) {
                    per_dim[d].push(img);
                }
            }
        }
    }
    per_dim
}

/// Contiguous cover of one image: [a*lo+c, a*hi+c) clipped to the extent.
fn expand_cover(img: &IndexSet, extent: i64) -> (i64, i64) {
    match img {
        IndexSet::Strided { start, step, count } => (*start, (start + step * count).min(extent)),
        _ => img.hull(),
    }
}

/// Resolve one dimension's need under a strategy.
pub fn resolve_dim(images: &[IndexSet], extent: usize, strategy: Strategy) -> IndexSet {
    resolve_dim_checked(images, extent, strategy).0
}

/// Like [`resolve_dim`], also reporting whether the exact need has gaps.
pub fn resolve_dim_checked(
    images: &[IndexSet],
    extent: usize,
    strategy: Strategy,
) -> (IndexSet, bool) {
    let exact = union(images);
    if exact.is_contiguous() {
        return (exact, false);
    }
    let set = match strategy {
        Strategy::Sparse => exact,
        Strategy::Expand => {
            let (mut lo, mut hi) = (i64::MAX, i64::MIN);
            for img in images.iter().filter(|i| !i.is_empty()) {
                let (a, b) = expand_cover(img, extent as i64);
                lo = lo.min(a);
                hi = hi.max(b);
            }
            IndexSet::Range { lo, hi }
        }
    };
    (set, true)
}

/// Per-core, per-tensor index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreTensorLayout {
    pub group: usize,
    pub core: usize,
    pub tensor: TensorId,
    pub dims: Vec<IndexSet>,
    /// Unpadded size in bytes.
    pub bytes: u64,
}

/// Index sets of every tensor each active core touches.
pub fn materialize_layouts(
    k: &Kernel,
    parts: &[PartTiles],
    tiles: &[ComputeTile],
    strategy: Strategy,
    element_bytes: u64,
) -> Vec<CoreTensorLayout> {
    let mut out = Vec::new();
    for tile in tiles {
        let active: Vec<bool> = (0..k.stmts.len())
            .map(|s| stmt_active(k, parts, tile, s))
            .collect();
        if !active.iter().any(|&a| a) {
            continue;
        }
        for t in 0..k.tensors.len() {
            let imgs = needed_images(k, tile, &active, t);
            if imgs.iter().any(|d| d.is_empty()) {
                continue;
            }
            let dims: Vec<IndexSet> = imgs
                .iter()
                .enumerate()
                .map(|(d, im)| resolve_dim(im, k.tensors[t].dims[d], strategy))
                .collect();
            let elems: u64 = dims.iter().map(|d| d.len() as u64).product();
            out.push(CoreTensorLayout {
                group: tile.group,
                core: tile.core,
                tensor: t,
                dims,
                bytes: elems * element_bytes,
            });
        }
    }
    out
}

/// Whether EXPAND and SPARSE differ for this draft.
pub fn has_noncontiguous_need(k: &Kernel, parts: &[PartTiles], tiles: &[ComputeTile]) -> bool {
    tiles.iter().any(|tile| {
        let active: Vec<bool> = (0..k.stmts.len())
            .map(|s| stmt_active(k, parts, tile, s))
            .collect();
        (0..k.tensors.len()).any(|t| {
            needed_images(k, tile, &active, t)
                .iter()
                .any(|im| !union(im).is_contiguous())
        })
    })
}
