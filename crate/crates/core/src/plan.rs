//! Schedule plans: per-core bank layouts, the command stream and the data
//! rearrangement between host memory and PIM channels.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, GroupUnit};
use crate::error::{Error, Result};
use crate::ir::{
    parse_kernel, print_kernel, AssignOp, Expr, Kernel, Role, Statement, TensorId, TensorRef, VarId,
};
use crate::schedule::{Space, TilingDraft};
use crate::tile::{
    derive_compute_tiles, lower_data_tiles, needed_images, resolve_dim_checked, stmt_active,
    ComputeTile, IndexSet, Strategy,
};

/// One tensor's allocation in a core's banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub tensor: TensorId,
    /// First element, in elements from the start of the core's banks.
    pub base: u64,
    /// Indices held per dimension; empty when the slot is padding only.
    pub dims: Vec<IndexSet>,
    /// Allocated length per dimension (at least `dims[d].len()`).
    pub alloc: Vec<usize>,
}

impl Slot {
    pub fn elems(&self) -> u64 {
        self.alloc.iter().map(|&a| a as u64).product()
    }

    pub fn holds_data(&self) -> bool {
        !self.dims.is_empty()
    }

    /// Local element address of a global index, if held.
    pub fn local(&self, idx: &[i64]) -> Option<u64> {
        if !self.holds_data() {
            return None;
        }
        let mut off = 0u64;
        for (d, &x) in idx.iter().enumerate() {
            let p = self.dims[d].position(x)? as u64;
            off = off * self.alloc[d] as u64 + p;
        }
        Some(self.base + off)
    }

    /// Global indices held, in local order.
    pub fn real_elems(&self) -> u64 {
        self.dims.iter().map(|d| d.len() as u64).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorePlan {
    pub tile: ComputeTile,
    /// Per statement: runs on this core.
    pub active: Vec<bool>,
    pub slots: Vec<Slot>,
}

impl CorePlan {
    pub fn group(&self) -> usize {
        self.tile.group
    }

    pub fn core(&self) -> usize {
        self.tile.core
    }

    pub fn slot(&self, t: TensorId) -> Option<&Slot> {
        self.slots.iter().find(|s| s.tensor == t)
    }

    pub fn used_elems(&self) -> u64 {
        self.slots
            .iter()
            .map(|s| s.base + s.elems())
            .max()
            .unwrap_or(0)
    }

    fn range(&self, v: VarId) -> (i64, i64) {
        self.tile.ranges[v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Group,
    Bank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opcode {
    Read,
    Write,
    Mac,
    Add,
    Mul,
    Max,
    Exp,
    SoftmaxUnit,
    AccumUnit,
    GemvUnit,
}

impl Opcode {
    /// Executed by a group unit rather than the cores.
    pub fn is_unit(self) -> bool {
        matches!(self, Opcode::SoftmaxUnit | Opcode::AccumUnit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOp {
    pub op: Opcode,
    /// Local element offset of the first row's operand.
    pub offset: u64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockKind {
    Zero { tensor: TensorId },
    Compute { stmt: usize },
    Softmax { stmt: usize },
    Accumulate { tensor: TensorId },
}

/// A run of commands: `body` repeated for each of `rows` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandBlock {
    pub level: Level,
    pub group: usize,
    /// Target cores, as indices into [`SchedulePlan::cores`].
    pub cores: Vec<usize>,
    pub kind: BlockKind,
    pub rows: usize,
    pub body: Vec<MicroOp>,
}

impl CommandBlock {
    pub fn command_count(&self) -> u64 {
        (self.rows * self.body.len()) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HostToPim,
    PimToHost,
}

/// Bytes one core contributes to a transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub core: usize,
    pub tensor: TensorId,
    /// Byte offset in the core's banks (0 for group-buffer merges).
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransfer {
    pub channel: usize,
    /// Bytes crossing the PIM channel, padding included.
    pub pim_bytes: u64,
    /// Bytes of host memory touched, in whole cache lines.
    pub host_bytes: u64,
    pub pieces: Vec<Piece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RearrangementPlan {
    pub direction: Direction,
    /// Staged through the on-chip buffer; otherwise each channel is copied
    /// directly, one after another.
    pub staged: bool,
    pub block_bytes: u64,
    pub channels: Vec<ChannelTransfer>,
}

/// One staged phase: blocks read serially from the host, then written to
/// their channels in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    /// (channel, pim bytes, host bytes)
    pub blocks: Vec<(usize, u64, f64)>,
}

impl RearrangementPlan {
    pub fn total_pim_bytes(&self) -> u64 {
        self.channels.iter().map(|c| c.pim_bytes).sum()
    }

    pub fn total_host_bytes(&self) -> u64 {
        self.channels.iter().map(|c| c.host_bytes).sum()
    }

    pub fn max_channel_bytes(&self) -> u64 {
        self.channels.iter().map(|c| c.pim_bytes).max().unwrap_or(0)
    }

    pub fn phase_count(&self) -> u64 {
        if !self.staged || self.block_bytes == 0 {
            return 0;
        }
        self.max_channel_bytes().div_ceil(self.block_bytes)
    }

    /// Staged phases, generated on demand.
    pub fn phases(&self) -> impl Iterator<Item = Phase> + '_ {
        (0..self.phase_count()).map(move |p| {
            let blocks = self
                .channels
                .iter()
                .filter_map(|c| {
                    let done = p * self.block_bytes;
                    if done >= c.pim_bytes {
                        return None;
                    }
                    let b = self.block_bytes.min(c.pim_bytes - done);
                    let host = c.host_bytes as f64 * b as f64 / c.pim_bytes as f64;
                    Some((c.channel, b, host))
                })
                .collect();
            Phase { blocks }
        })
    }
}

/// Build a rearrangement over the given channel transfers. Uses the staged
/// scheme when the backend has an on-chip buffer.
pub fn plan_rearrangement(
    channels: Vec<ChannelTransfer>,
    backend: &BackendDescriptor,
    direction: Direction,
) -> RearrangementPlan {
    let channels: Vec<ChannelTransfer> = channels.into_iter().filter(|c| c.pim_bytes > 0).collect();
    let n = channels.len() as u64;
    let staged = backend.onchip_buffer_bytes > 0 && n > 0;
    let block_bytes = if staged {
        backend.onchip_buffer_bytes / n
    } else {
        0
    };
    RearrangementPlan {
        direction,
        staged: staged && block_bytes > 0,
        block_bytes,
        channels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    /// Every element has exactly one producing core.
    Single,
    /// Partial sums added on the host while reading back.
    HostSum,
    /// Partial sums added by each group's accumulator unit.
    Accumulator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub tensor: TensorId,
    pub kind: MergeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    /// Round every slot base to the backend's layout alignment.
    Align,
    /// Fold uniform per-core command blocks into group-level broadcasts.
    Broadcast,
    /// Route rearrangement through the on-chip buffer.
    StagedRearrangement,
}

/// Ordered optimization passes, with per-backend extensions.
#[derive(Debug, Clone, Default)]
pub struct PassRegistry {
    extra: BTreeMap<String, Vec<PassKind>>,
}

impl PassRegistry {
    pub fn standard() -> Self {
        PassRegistry::default()
    }

    /// Append passes for one backend name.
    pub fn register(&mut self, backend: &str, passes: &[PassKind]) {
        self.extra
            .entry(backend.to_string())
            .or_default()
            .extend_from_slice(passes);
    }

    pub fn pipeline(&self, backend: &BackendDescriptor) -> Vec<PassKind> {
        let mut out = Vec::new();
        if backend.layout_alignment.is_some_and(|a| a > 1) {
            out.push(PassKind::Align);
        }
        out.push(PassKind::Broadcast);
        out.push(PassKind::StagedRearrangement);
        if let Some(extra) = self.extra.get(&backend.name) {
            out.extend(extra.iter().copied());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub strategy: Strategy,
    /// Run the broadcast pass (group-level commands where legal).
    pub broadcast: bool,
    /// Run the staged rearrangement pass.
    pub staged: bool,
}

impl PlanOptions {
    pub fn new(strategy: Strategy) -> Self {
        PlanOptions {
            strategy,
            broadcast: true,
            staged: true,
        }
    }
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions::new(Strategy::Expand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    #[serde(with = "kernel_text")]
    pub kernel: Kernel,
    pub backend: BackendDescriptor,
    pub draft: TilingDraft,
    /// Human-readable draft, e.g. `[[2,2,A0^b],...]`.
    pub draft_text: String,
    pub strategy: Strategy,
    /// Whether EXPAND and SPARSE differ for this draft.
    pub strategy_matters: bool,
    /// Per-group padded allocations (otherwise each core is sized alone).
    pub padded: bool,
    pub passes: Vec<PassKind>,
    pub cores: Vec<CorePlan>,
    pub blocks: Vec<CommandBlock>,
    pub input: RearrangementPlan,
    pub output: RearrangementPlan,
    pub merges: Vec<Merge>,
}

mod kernel_text {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &Kernel, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&print_kernel(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Kernel, D::Error> {
        let src = String::deserialize(d)?;
        parse_kernel(&src).map_err(serde::de::Error::custom)
    }
}

impl SchedulePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SchedulePlan =
            serde_json::from_str(text).map_err(|e| Error::Artifact(format!("plan: {e}")))?;
        plan.check_shape()?;
        Ok(plan)
    }

    /// Structural checks on a loaded plan, so the simulator can trust indices.
    fn check_shape(&self) -> Result<()> {
        let k = &self.kernel;
        let bad = |m: String| Err(Error::Artifact(m));
        for (i, c) in self.cores.iter().enumerate() {
            if c.active.len() != k.stmts.len() || c.tile.ranges.len() != k.vars.len() {
                return bad(format!("core entry {i} does not match the kernel"));
            }
            for (v, &(lo, hi)) in c.tile.ranges.iter().enumerate() {
                if lo < 0 || hi > k.vars[v].extent as i64 {
                    return bad(format!(
                        "core entry {i} has a loop range outside its bounds"
                    ));
                }
            }
            for s in &c.slots {
                if s.tensor >= k.tensors.len()
                    || s.alloc.len() != k.tensors[s.tensor].rank()
                    || (s.holds_data() && s.dims.len() != s.alloc.len())
                    || s.dims.iter().zip(&s.alloc).any(|(d, &a)| d.len() > a)
                {
                    return bad(format!("core entry {i} has a malformed slot"));
                }
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.cores.iter().any(|&c| c >= self.cores.len()) {
                return bad(format!("command block {i} targets an unknown core"));
            }
            let ok = match b.kind {
                BlockKind::Compute { stmt } | BlockKind::Softmax { stmt } => stmt < k.stmts.len(),
                BlockKind::Zero { tensor } | BlockKind::Accumulate { tensor } => {
                    tensor < k.tensors.len()
                }
            };
            if !ok {
                return bad(format!(
                    "command block {i} names an unknown statement or tensor"
                ));
            }
        }
        Ok(())
    }

    pub fn command_counts(&self) -> (u64, u64) {
        let mut g = 0;
        let mut b = 0;
        for blk in &self.blocks {
            match blk.level {
                Level::Group => g += blk.command_count(),
                Level::Bank => b += blk.command_count(),
            }
        }
        (g, b)
    }

    pub fn merge_kind(&self, t: TensorId) -> MergeKind {
        self.merges
            .iter()
            .find(|m| m.tensor == t)
            .map(|m| m.kind)
            .unwrap_or(MergeKind::Single)
    }

    /// Per-core, per-tensor layout dump.
    pub fn layout_json(&self) -> serde_json::Value {
        let cores: Vec<serde_json::Value> = self
            .cores
            .iter()
            .map(|c| {
                let tensors: Vec<serde_json::Value> = c
                    .slots
                    .iter()
                    .map(|s| {
                        serde_json::json!({
                            "tensor": self.kernel.tensors[s.tensor].name,
                            "base": s.base,
                            "dims": s.dims,
                            "alloc": s.alloc,
                            "bytes": s.real_elems() * self.backend.element_bytes as u64,
                        })
                    })
                    .collect();
                serde_json::json!({ "group": c.group(), "core": c.core(), "tensors": tensors })
            })
            .collect();
        serde_json::json!({
            "draft": self.draft_text,
            "strategy": self.strategy,
            "padded": self.padded,
            "cores": cores,
        })
    }
}

/// Odometer over the given (distinct) variables' ranges, writing values
/// into `env`. Calls `f` once per point in row-major order.
pub(crate) fn for_each_point(
    vars: &[VarId],
    ranges: &[(i64, i64)],
    env: &mut [i64],
    mut f: impl FnMut(&[i64]),
) {
    if vars.iter().any(|&v| ranges[v].1 <= ranges[v].0) {
        return;
    }
    for &v in vars {
        env[v] = ranges[v].0;
    }
    loop {
        f(env);
        let mut i = vars.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            let v = vars[i];
            env[v] += 1;
            if env[v] < ranges[v].1 {
                break;
            }
            env[v] = ranges[v].0;
        }
    }
}

/// Distinct variables of a reference, in first-use order.
pub(crate) fn ref_vars(r: &TensorRef) -> Vec<VarId> {
    let mut out = Vec::new();
    for e in &r.index {
        if !out.contains(&e.var) {
            out.push(e.var);
        }
    }
    out
}

pub(crate) fn flat_index(dims: &[usize], r: &TensorRef, env: &[i64]) -> usize {
    let mut off = 0usize;
    for (d, e) in r.index.iter().enumerate() {
        off = off * dims[d] + e.eval(env[e.var]) as usize;
    }
    off
}

/// Sorted flat indices of `t` written by this core's active statements.
pub fn written_elements(k: &Kernel, core: &CorePlan, t: TensorId) -> Vec<usize> {
    let mut out = Vec::new();
    let mut env = vec![0i64; k.vars.len()];
    for (s, st) in k.stmts.iter().enumerate() {
        if !core.active[s] || st.dst.tensor != t {
            continue;
        }
        let dims = &k.tensors[t].dims;
        for_each_point(&ref_vars(&st.dst), &core.tile.ranges, &mut env, |env| {
            out.push(flat_index(dims, &st.dst, env));
        });
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Elements of one tensor written by one core.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) enum WSet {
    /// Product of per-dimension index sets, when one destination reference
    /// covers every write.
    Product(Vec<IndexSet>),
    /// Sorted flat indices.
    List(Vec<usize>),
}

impl WSet {
    pub(crate) fn len(&self) -> usize {
        match self {
            WSet::Product(d) => d.iter().map(|s| s.len()).product(),
            WSet::List(v) => v.len(),
        }
    }

    /// Flat indices in ascending order.
    pub(crate) fn for_each_flat(&self, dims: &[usize], mut f: impl FnMut(usize)) {
        let sets = match self {
            WSet::List(v) => return v.iter().for_each(|&x| f(x)),
            WSet::Product(s) => s,
        };
        if self.len() == 0 {
            return;
        }
        let r = sets.len();
        let mut pos = vec![0usize; r];
        loop {
            let mut row = 0usize;
            for d in 0..r - 1 {
                row = row * dims[d] + sets[d].get(pos[d]) as usize;
            }
            let base = row * dims[r - 1];
            match &sets[r - 1] {
                IndexSet::Range { lo, hi } => {
                    (base + *lo as usize..base + *hi as usize).for_each(&mut f)
                }
                inner => inner.iter().for_each(|x| f(base + x as usize)),
            }
            let mut d = r - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                pos[d] += 1;
                if pos[d] < sets[d].len() {
                    break;
                }
                pos[d] = 0;
            }
        }
    }

    pub(crate) fn host_lines(&self, dims: &[usize], eb: u64, line: u64) -> u64 {
        match self {
            WSet::Product(s) => host_lines(dims, s, eb, line),
            WSet::List(v) => lines_of_sorted(v, eb, line),
        }
    }
}

/// Per-core written sets of one produced tensor.
#[derive(Debug, Clone)]
pub(crate) struct Written {
    pub(crate) per_core: Vec<WSet>,
    /// Some element has more than one producing core.
    pub(crate) shared: bool,
}

pub(crate) fn written_set(k: &Kernel, core: &CorePlan, t: TensorId) -> WSet {
    let writers: Vec<&Statement> = k
        .stmts
        .iter()
        .enumerate()
        .filter(|(s, st)| core.active[*s] && st.dst.tensor == t)
        .map(|(_, st)| st)
        .collect();
    if writers.is_empty() {
        return WSet::List(Vec::new());
    }
    if writers.iter().all(|w| w.dst == writers[0].dst) {
        let dims: Vec<IndexSet> = writers[0]
            .dst
            .index
            .iter()
            .map(|e| {
                let (lo, hi) = core.range(e.var);
                IndexSet::image(e, lo, hi)
            })
            .collect();
        return WSet::Product(dims);
    }
    WSet::List(written_elements(k, core, t))
}

/// Number of distinct host cache lines covering a sorted list of flat
/// indices.
fn lines_of_sorted(flat: &[usize], eb: u64, line: u64) -> u64 {
    let mut n = 0;
    let mut last = u64::MAX;
    for &f in flat {
        let l = f as u64 * eb / line;
        if l != last {
            n += 1;
            last = l;
        }
    }
    n
}

/// Host cache lines covering the product of per-dimension index sets in a
/// row-major tensor.
pub(crate) fn host_lines(dims: &[usize], sets: &[IndexSet], eb: u64, line: u64) -> u64 {
    if sets.iter().any(|s| s.is_empty()) {
        return 0;
    }
    let r = sets.len();
    if r == 0 {
        return 1;
    }
    let mut count = 0u64;
    let mut last = u64::MAX;
    let mut pos = vec![0usize; r - 1];
    let inner = &sets[r - 1];
    let inner_extent = dims[r - 1] as u64;
    loop {
        let mut row = 0u64;
        for d in 0..r - 1 {
            row = row * dims[d] as u64 + sets[d].get(pos[d]) as u64;
        }
        let row_base = row * inner_extent;
        match inner {
            IndexSet::Range { lo, hi } => {
                let first = (row_base + *lo as u64) * eb / line;
                let end = ((row_base + *hi as u64) * eb - 1) / line;
                count += end - first + 1;
                if first == last {
                    count -= 1;
                }
                last = end;
            }
            _ => {
                for x in inner.iter() {
                    let l = (row_base + x as u64) * eb / line;
                    if l != last {
                        count += 1;
                        last = l;
                    }
                }
            }
        }
        let mut d = r - 1;
        loop {
            if d == 0 {
                return count;
            }
            d -= 1;
            pos[d] += 1;
            if pos[d] < sets[d].len() {
                break;
            }
            pos[d] = 0;
        }
    }
}

const NONE: u32 = u32::MAX;
const MULTI: u32 = u32::MAX - 1;

/// Lower a draft to a schedule plan under one index strategy.
pub fn build_schedule_plan(
    space: &Space,
    draft: &TilingDraft,
    backend: &BackendDescriptor,
    opts: PlanOptions,
) -> Result<SchedulePlan> {
    build_with_registry(space, draft, backend, opts, &PassRegistry::standard())
}

/// Every plan variant of a draft: one per strategy when the draft has a
/// non-contiguous need, otherwise a single plan.
pub fn build_schedule_plans(
    space: &Space,
    draft: &TilingDraft,
    backend: &BackendDescriptor,
) -> Result<Vec<SchedulePlan>> {
    let first = build_schedule_plan(space, draft, backend, PlanOptions::new(Strategy::Expand))?;
    if !first.strategy_matters {
        return Ok(vec![first]);
    }
    let second = build_schedule_plan(space, draft, backend, PlanOptions::new(Strategy::Sparse))?;
    Ok(vec![first, second])
}

pub fn build_with_registry(
    space: &Space,
    draft: &TilingDraft,
    backend: &BackendDescriptor,
    opts: PlanOptions,
    registry: &PassRegistry,
) -> Result<SchedulePlan> {
    let k = &space.kernel;
    check_capabilities(k, backend)?;
    if draft.total_groups() > backend.groups || draft.cores_per_group() > backend.cores_per_group {
        return Err(Error::Precondition(format!(
            "draft {} needs {}x{} cores, backend `{}` has {}x{}",
            draft.render(space),
            draft.total_groups(),
            draft.cores_per_group(),
            backend.name,
            backend.groups,
            backend.cores_per_group
        )));
    }
    let parts = lower_data_tiles(space, draft);
    let tiles = derive_compute_tiles(space, draft, &parts);
    let mut strategy_matters = false;

    let mut cores: Vec<CorePlan> = Vec::new();
    let mut needs: Vec<Vec<(TensorId, Vec<IndexSet>)>> = Vec::new();
    for tile in tiles {
        let active: Vec<bool> = (0..k.stmts.len())
            .map(|s| stmt_active(k, &parts, &tile, s))
            .collect();
        if !active.iter().any(|&a| a) {
            continue;
        }
        let mut need = Vec::new();
        for t in 0..k.tensors.len() {
            let imgs = needed_images(k, &tile, &active, t);
            if imgs.iter().any(|d| d.is_empty()) {
                continue;
            }
            let dims = imgs
                .iter()
                .enumerate()
                .map(|(d, im)| {
                    let (set, gap) = resolve_dim_checked(im, k.tensors[t].dims[d], opts.strategy);
                    strategy_matters |= gap;
                    set
                })
                .collect();
            need.push((t, dims));
        }
        needs.push(need);
        cores.push(CorePlan {
            tile,
            active,
            slots: Vec::new(),
        });
    }

    check_softmax_axes(k, &cores)?;
    let written = check_ownership(k, &cores)?;

    let eb = backend.element_bytes as u64;
    let cap = backend.core_capacity_bytes();
    let padded = assign_slots(k, &mut cores, &needs, true);
    let padded = match first_overflow(&cores, eb, cap) {
        None => padded,
        Some(_) => {
            assign_slots(k, &mut cores, &needs, false);
            if let Some(i) = first_overflow(&cores, eb, cap) {
                let c = &cores[i];
                let needed = c.used_elems() * eb;
                return Err(Error::Capacity {
                    group: c.group(),
                    core: c.core(),
                    needed,
                    deficit: needed - cap,
                });
            }
            false
        }
    };

    let mut plan = SchedulePlan {
        kernel: k.clone(),
        backend: backend.clone(),
        draft: draft.clone(),
        draft_text: draft.render(space),
        strategy: opts.strategy,
        strategy_matters,
        padded,
        passes: Vec::new(),
        cores,
        blocks: Vec::new(),
        input: plan_rearrangement(Vec::new(), backend, Direction::HostToPim),
        output: plan_rearrangement(Vec::new(), backend, Direction::PimToHost),
        merges: Vec::new(),
    };
    plan.merges = merges_for(k, backend, &written);
    plan.blocks = generate_commands(&plan);
    plan.input = RearrangementPlan {
        direction: Direction::HostToPim,
        staged: false,
        block_bytes: 0,
        channels: input_transfers(&plan),
    };
    plan.output = RearrangementPlan {
        direction: Direction::PimToHost,
        staged: false,
        block_bytes: 0,
        channels: output_transfers(&plan, &written),
    };

    for pass in registry.pipeline(backend) {
        match pass {
            PassKind::Align => align_pass(&mut plan)?,
            PassKind::Broadcast if opts.broadcast => broadcast_pass(&mut plan),
            PassKind::StagedRearrangement if opts.staged => staged_pass(&mut plan),
            _ => continue,
        }
        plan.passes.push(pass);
    }
    Ok(plan)
}

/// Fails when a statement needs a unit the backend lacks.
pub fn check_capabilities(k: &Kernel, backend: &BackendDescriptor) -> Result<()> {
    for st in &k.stmts {
        if (st.is_softmax() || st.rhs.uses_exp()) && !backend.has_unit(GroupUnit::Softmax) {
            return Err(Error::Capability {
                backend: backend.name.clone(),
                what: format!("`{}` (needs a softmax unit)", k.render_ref(&st.dst)),
            });
        }
    }
    Ok(())
}

fn check_softmax_axes(k: &Kernel, cores: &[CorePlan]) -> Result<()> {
    for c in cores {
        for (s, st) in k.stmts.iter().enumerate() {
            if let (true, Expr::Softmax { axis, .. }) = (c.active[s], &st.rhs) {
                if c.range(*axis) != (0, k.vars[*axis].extent as i64) {
                    return Err(Error::Lowering(format!(
                        "softmax axis `{}` of `{}` is split across cores",
                        k.vars[*axis].name, k.tensors[st.dst.tensor].name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Written-element lists per (non-input tensor, core), after checking that
/// multiply-written elements are partial sums and that every read of a
/// produced tensor sees only values made on the same core.
fn check_ownership(k: &Kernel, cores: &[CorePlan]) -> Result<BTreeMap<TensorId, Written>> {
    let mut out = BTreeMap::new();
    let mut env = vec![0i64; k.vars.len()];
    for (t, decl) in k.tensors.iter().enumerate() {
        if decl.role == Role::Input {
            continue;
        }
        let per_core: Vec<WSet> = cores.iter().map(|c| written_set(k, c, t)).collect();
        let total: usize = per_core.iter().map(|w| w.len()).sum();
        let read = k
            .stmts
            .iter()
            .any(|st| st.rhs.refs().iter().any(|r| r.tensor == t));
        let mut owner = vec![NONE; if read { decl.elements() } else { 0 }];
        let shared = if read {
            let mut distinct = 0usize;
            for (ci, w) in per_core.iter().enumerate() {
                w.for_each_flat(&decl.dims, |f| {
                    if owner[f] == NONE {
                        owner[f] = ci as u32;
                        distinct += 1;
                    } else {
                        owner[f] = MULTI;
                    }
                });
            }
            distinct < total
        } else {
            // Identical sets on several cores are common; mark each once.
            let mut uniq: HashSet<&WSet> = HashSet::new();
            let mut dup = false;
            for w in per_core.iter().filter(|w| w.len() > 0) {
                dup |= !uniq.insert(w);
            }
            dup || {
                let mut seen = vec![false; decl.elements()];
                let mut distinct = 0usize;
                let mut sum = 0usize;
                for w in uniq {
                    sum += w.len();
                    w.for_each_flat(&decl.dims, |f| {
                        distinct += usize::from(!seen[f]);
                        seen[f] = true;
                    });
                }
                distinct < sum
            }
        };
        if shared
            && k.writers(t)
                .iter()
                .any(|&s| k.stmts[s].op != AssignOp::Accumulate)
        {
            return Err(Error::Lowering(format!(
                "elements of `{}` would be assigned on several cores",
                decl.name
            )));
        }
        if read {
            for (ci, c) in cores.iter().enumerate() {
                for (s, st) in k.stmts.iter().enumerate() {
                    if !c.active[s] {
                        continue;
                    }
                    for r in st.rhs.refs().into_iter().filter(|r| r.tensor == t) {
                        let mut bad = false;
                        for_each_point(&ref_vars(r), &c.tile.ranges, &mut env, |env| {
                            let o = owner[flat_index(&decl.dims, r, env)];
                            bad |= o != NONE && o != ci as u32;
                        });
                        if bad {
                            return Err(Error::Lowering(format!(
                                "`{}` is read on group {} core {} but produced on another core",
                                decl.name,
                                c.group(),
                                c.core()
                            )));
                        }
                    }
                }
            }
        }
        out.insert(t, Written { per_core, shared });
    }
    Ok(out)
}

/// Lay out slots. With padding, every core of a group holds the same
/// tensors at the same bases with per-dimension lengths raised to the group
/// maximum. Returns whether padding was applied.
fn assign_slots(
    k: &Kernel,
    cores: &mut [CorePlan],
    needs: &[Vec<(TensorId, Vec<IndexSet>)>],
    pad: bool,
) -> bool {
    let mut group_alloc: BTreeMap<(usize, TensorId), Vec<usize>> = BTreeMap::new();
    if pad {
        for (c, need) in cores.iter().zip(needs) {
            for (t, dims) in need {
                let e = group_alloc
                    .entry((c.group(), *t))
                    .or_insert_with(|| vec![0; k.tensors[*t].rank()]);
                for (a, d) in e.iter_mut().zip(dims) {
                    *a = (*a).max(d.len());
                }
            }
        }
    }
    for (c, need) in cores.iter_mut().zip(needs) {
        let mut slots = Vec::new();
        let mut base = 0u64;
        let held: Vec<(TensorId, Vec<usize>)> = if pad {
            group_alloc
                .range((c.group(), 0)..(c.group() + 1, 0))
                .map(|(&(_, t), a)| (t, a.clone()))
                .collect()
        } else {
            need.iter()
                .map(|(t, d)| (*t, d.iter().map(|x| x.len()).collect()))
                .collect()
        };
        for (t, alloc) in held {
            let dims = need
                .iter()
                .find(|(nt, _)| *nt == t)
                .map(|(_, d)| d.clone())
                .unwrap_or_default();
            let s = Slot {
                tensor: t,
                base,
                dims,
                alloc,
            };
            base += s.elems();
            slots.push(s);
        }
        c.slots = slots;
    }
    pad
}

fn first_overflow(cores: &[CorePlan], eb: u64, cap: u64) -> Option<usize> {
    cores.iter().position(|c| c.used_elems() * eb > cap)
}

fn merges_for(
    k: &Kernel,
    backend: &BackendDescriptor,
    written: &BTreeMap<TensorId, Written>,
) -> Vec<Merge> {
    let mut out = Vec::new();
    for (t, decl) in k.tensors.iter().enumerate() {
        if decl.role != Role::Output {
            continue;
        }
        let kind = if !written[&t].shared {
            MergeKind::Single
        } else if backend.has_unit(GroupUnit::Accumulator) {
            MergeKind::Accumulator
        } else {
            MergeKind::HostSum
        };
        out.push(Merge { tensor: t, kind });
    }
    out
}

/// Local element offset of a reference at the first point of a box.
fn first_offset(core: &CorePlan, r: &TensorRef) -> u64 {
    let slot = match core.slot(r.tensor) {
        Some(s) => s,
        None => return 0,
    };
    let idx: Vec<i64> = r
        .index
        .iter()
        .map(|e| e.eval(core.range(e.var).0))
        .collect();
    slot.local(&idx).unwrap_or(slot.base)
}

fn row_shape(st: &Statement, core: &CorePlan) -> (usize, usize) {
    let inner = st.inner_var();
    let mut rows = 1usize;
    for &v in &st.loops {
        if v != inner {
            let (lo, hi) = core.range(v);
            rows *= (hi - lo) as usize;
        }
    }
    let (lo, hi) = core.range(inner);
    (rows, (hi - lo) as usize)
}

fn compute_body(
    backend: &BackendDescriptor,
    st: &Statement,
    core: &CorePlan,
    lanes: usize,
) -> Vec<MicroOp> {
    let inner = st.inner_var();
    let count_of = |r: &TensorRef| if r.uses_var(inner) { lanes } else { 1 };
    let mut body = Vec::new();
    if let Expr::Softmax { arg, .. } = &st.rhs {
        body.push(MicroOp {
            op: Opcode::Read,
            offset: first_offset(core, arg),
            count: lanes,
        });
        body.push(MicroOp {
            op: Opcode::SoftmaxUnit,
            offset: first_offset(core, arg),
            count: lanes,
        });
        body.push(MicroOp {
            op: Opcode::Write,
            offset: first_offset(core, &st.dst),
            count: lanes,
        });
        return body;
    }
    let acc = st.op == AssignOp::Accumulate;
    let dst_off = first_offset(core, &st.dst);
    if acc {
        body.push(MicroOp {
            op: Opcode::Read,
            offset: dst_off,
            count: count_of(&st.dst),
        });
    }
    fn walk(
        e: &Expr,
        core: &CorePlan,
        lanes: usize,
        inner: VarId,
        top_mac: bool,
        out: &mut Vec<MicroOp>,
        fused: Opcode,
    ) {
        let op = |o: Opcode| MicroOp {
            op: o,
            offset: 0,
            count: lanes,
        };
        match e {
            Expr::Ref(r) => out.push(MicroOp {
                op: Opcode::Read,
                offset: first_offset(core, r),
                count: if r.uses_var(inner) { lanes } else { 1 },
            }),
            Expr::Const(_) | Expr::Softmax { .. } => {}
            Expr::Add(a, b) | Expr::Mul(a, b) | Expr::Max(a, b) => {
                walk(a, core, lanes, inner, false, out, fused);
                walk(b, core, lanes, inner, false, out, fused);
                out.push(op(match e {
                    Expr::Add(..) => Opcode::Add,
                    Expr::Mul(..) if top_mac => fused,
                    Expr::Mul(..) => Opcode::Mul,
                    _ => Opcode::Max,
                }));
            }
            Expr::Exp(a) => {
                walk(a, core, lanes, inner, false, out, fused);
                out.push(op(Opcode::Exp));
            }
        }
    }
    let fused = if backend.has_unit(GroupUnit::Gemv) {
        Opcode::GemvUnit
    } else {
        Opcode::Mac
    };
    let top_mac = acc && matches!(st.rhs, Expr::Mul(..));
    walk(&st.rhs, core, lanes, inner, top_mac, &mut body, fused);
    if acc && !top_mac {
        body.push(MicroOp {
            op: Opcode::Add,
            offset: 0,
            count: lanes,
        });
    }
    body.push(MicroOp {
        op: Opcode::Write,
        offset: dst_off,
        count: count_of(&st.dst),
    });
    body
}

/// Bank-level command stream: zero-init of produced tensors, then each
/// statement in order, then accumulator merges.
pub fn generate_commands(plan: &SchedulePlan) -> Vec<CommandBlock> {
    let k = &plan.kernel;
    let mut blocks = Vec::new();
    for (ci, c) in plan.cores.iter().enumerate() {
        for s in &c.slots {
            if k.tensors[s.tensor].role != Role::Input {
                blocks.push(CommandBlock {
                    level: Level::Bank,
                    group: c.group(),
                    cores: vec![ci],
                    kind: BlockKind::Zero { tensor: s.tensor },
                    rows: 1,
                    body: vec![MicroOp {
                        op: Opcode::Write,
                        offset: s.base,
                        count: s.elems() as usize,
                    }],
                });
            }
        }
    }
    for (si, st) in k.stmts.iter().enumerate() {
        for (ci, c) in plan.cores.iter().enumerate() {
            if !c.active[si] {
                continue;
            }
            let (rows, lanes) = row_shape(st, c);
            let body = compute_body(&plan.backend, st, c, lanes);
            let (level, kind) = if st.is_softmax() {
                (Level::Group, BlockKind::Softmax { stmt: si })
            } else {
                (Level::Bank, BlockKind::Compute { stmt: si })
            };
            blocks.push(CommandBlock {
                level,
                group: c.group(),
                cores: vec![ci],
                kind,
                rows,
                body,
            });
        }
    }
    for m in plan
        .merges
        .iter()
        .filter(|m| m.kind == MergeKind::Accumulator)
    {
        let mut by_group: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
        for (ci, c) in plan.cores.iter().enumerate() {
            let n = written_set(k, c, m.tensor).len();
            if n > 0 {
                let e = by_group.entry(c.group()).or_default();
                e.0.push(ci);
                e.1 += n;
            }
        }
        for (g, (members, n)) in by_group {
            blocks.push(CommandBlock {
                level: Level::Group,
                group: g,
                cores: members,
                kind: BlockKind::Accumulate { tensor: m.tensor },
                rows: 1,
                body: vec![MicroOp {
                    op: Opcode::AccumUnit,
                    offset: 0,
                    count: n,
                }],
            });
        }
    }
    blocks
}

fn input_transfers(plan: &SchedulePlan) -> Vec<ChannelTransfer> {
    let k = &plan.kernel;
    let b = &plan.backend;
    let eb = b.element_bytes as u64;
    let mut by_channel: BTreeMap<usize, ChannelTransfer> = BTreeMap::new();
    for (ci, c) in plan.cores.iter().enumerate() {
        let ch = c.group() % b.num_channels;
        for s in &c.slots {
            let decl = &k.tensors[s.tensor];
            if decl.role != Role::Input {
                continue;
            }
            let e = by_channel.entry(ch).or_insert_with(|| ChannelTransfer {
                channel: ch,
                pim_bytes: 0,
                host_bytes: 0,
                pieces: Vec::new(),
            });
            let bytes = s.elems() * eb;
            e.pim_bytes += bytes;
            if s.holds_data() {
                e.host_bytes +=
                    host_lines(&decl.dims, &s.dims, eb, b.cache_line_bytes) * b.cache_line_bytes;
            }
            e.pieces.push(Piece {
                core: ci,
                tensor: s.tensor,
                offset: s.base * eb,
                bytes,
            });
        }
    }
    by_channel.into_values().collect()
}

fn output_transfers(
    plan: &SchedulePlan,
    written: &BTreeMap<TensorId, Written>,
) -> Vec<ChannelTransfer> {
    let b = &plan.backend;
    let eb = b.element_bytes as u64;
    let line = b.cache_line_bytes;
    let mut by_channel: BTreeMap<usize, ChannelTransfer> = BTreeMap::new();
    for m in &plan.merges {
        let dims = &plan.kernel.tensors[m.tensor].dims;
        let per_core = &written[&m.tensor].per_core;
        if m.kind == MergeKind::Accumulator {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (ci, w) in per_core.iter().enumerate() {
                if w.len() > 0 {
                    groups.entry(plan.cores[ci].group()).or_default().push(ci);
                }
            }
            for (g, members) in groups {
                let (n, lines) =
                    union_size_and_lines(members.iter().map(|&ci| &per_core[ci]), dims, eb, line);
                let ch = g % b.num_channels;
                let e = by_channel.entry(ch).or_insert_with(|| empty_transfer(ch));
                e.pim_bytes += n * eb;
                e.host_bytes += lines * line;
                e.pieces.push(Piece {
                    core: members[0],
                    tensor: m.tensor,
                    offset: 0,
                    bytes: n * eb,
                });
            }
        } else {
            for (ci, w) in per_core.iter().enumerate() {
                let n = w.len() as u64;
                if n == 0 {
                    continue;
                }
                let c = &plan.cores[ci];
                let ch = c.group() % b.num_channels;
                let e = by_channel.entry(ch).or_insert_with(|| empty_transfer(ch));
                e.pim_bytes += n * eb;
                e.host_bytes += w.host_lines(dims, eb, line) * line;
                e.pieces.push(Piece {
                    core: ci,
                    tensor: m.tensor,
                    offset: c.slot(m.tensor).map(|s| s.base * eb).unwrap_or(0),
                    bytes: n * eb,
                });
            }
        }
    }
    by_channel.into_values().collect()
}

/// Size and host cache lines of the union of several written sets.
fn union_size_and_lines<'a>(
    sets: impl Iterator<Item = &'a WSet>,
    dims: &[usize],
    eb: u64,
    line: u64,
) -> (u64, u64) {
    let sets: Vec<&WSet> = sets.collect();
    if sets.windows(2).all(|w| w[0] == w[1]) {
        return (sets[0].len() as u64, sets[0].host_lines(dims, eb, line));
    }
    let mut seen = vec![false; dims.iter().product()];
    for w in &sets {
        w.for_each_flat(dims, |f| seen[f] = true);
    }
    let flat: Vec<usize> = (0..seen.len()).filter(|&f| seen[f]).collect();
    (flat.len() as u64, lines_of_sorted(&flat, eb, line))
}

fn empty_transfer(ch: usize) -> ChannelTransfer {
    ChannelTransfer {
        channel: ch,
        pim_bytes: 0,
        host_bytes: 0,
        pieces: Vec::new(),
    }
}

fn align_pass(plan: &mut SchedulePlan) -> Result<()> {
    let Some(a) = plan.backend.layout_alignment.filter(|&a| a > 1) else {
        return Ok(());
    };
    let eb = plan.backend.element_bytes as u64;
    let cap = plan.backend.core_capacity_bytes();
    for c in plan.cores.iter_mut() {
        let mut base = 0u64;
        for s in c.slots.iter_mut() {
            base = base.div_ceil(a) * a;
            s.base = base;
            base += s.elems();
        }
        let needed = c.used_elems() * eb;
        if needed > cap {
            return Err(Error::Capacity {
                group: c.group(),
                core: c.core(),
                needed,
                deficit: needed - cap,
            });
        }
    }
    let k = plan.kernel.clone();
    let b = plan.backend.clone();
    let cores = plan.cores.clone();
    for blk in plan.blocks.iter_mut() {
        let c = &cores[blk.cores[0]];
        match blk.kind {
            BlockKind::Zero { tensor } => {
                blk.body[0].offset = c.slot(tensor).map(|s| s.base).unwrap_or(0)
            }
            BlockKind::Compute { stmt } | BlockKind::Softmax { stmt } => {
                let counts: Vec<usize> = blk.body.iter().map(|m| m.count).collect();
                let (_, lanes) = row_shape(&k.stmts[stmt], c);
                blk.body = compute_body(&b, &k.stmts[stmt], c, lanes);
                for (m, n) in blk.body.iter_mut().zip(counts) {
                    m.count = n;
                }
            }
            BlockKind::Accumulate { .. } => {}
        }
    }
    for ch in plan.input.channels.iter_mut() {
        for p in ch.pieces.iter_mut() {
            p.offset = cores[p.core]
                .slot(p.tensor)
                .map(|s| s.base * eb)
                .unwrap_or(0);
        }
    }
    Ok(())
}

/// Whether all cores of a group touch identical local positions (over
/// their common prefix) for every reference of a statement.
fn uniform_refs(st: &Statement, members: &[&CorePlan]) -> bool {
    let refs: Vec<&TensorRef> = std::iter::once(&st.dst).chain(st.rhs.refs()).collect();
    let first = members[0];
    for r in refs {
        let s0 = match first.slot(r.tensor) {
            Some(s) => s,
            None => return false,
        };
        for m in &members[1..] {
            let s1 = match m.slot(r.tensor) {
                Some(s) => s,
                None => return false,
            };
            if s0.base != s1.base || s0.alloc != s1.alloc {
                return false;
            }
            for (d, e) in r.index.iter().enumerate() {
                let (lo0, hi0) = first.range(e.var);
                let (lo1, hi1) = m.range(e.var);
                let a0 = s0.dims[d].affine_positions(e, lo0);
                let a1 = s1.dims[d].affine_positions(e, lo1);
                let same = match (a0, a1) {
                    (Some(x), Some(y)) => x == y,
                    _ => {
                        let n = (hi0 - lo0).min(hi1 - lo1);
                        (0..n).all(|i| {
                            s0.dims[d].position(e.eval(lo0 + i))
                                == s1.dims[d].position(e.eval(lo1 + i))
                        })
                    }
                };
                if !same {
                    return false;
                }
            }
        }
    }
    true
}

/// Fold each group's per-core blocks of one kind into one group-level
/// block when the group's layouts are uniform.
fn broadcast_pass(plan: &mut SchedulePlan) {
    if !plan.backend.supports_group_broadcast || !plan.padded {
        return;
    }
    let k = &plan.kernel;
    let old = std::mem::take(&mut plan.blocks);
    let mut out: Vec<CommandBlock> = Vec::with_capacity(old.len());
    let mut i = 0;
    while i < old.len() {
        let head = &old[i];
        let mut j = i + 1;
        if head.level == Level::Bank {
            while j < old.len()
                && old[j].level == Level::Bank
                && old[j].group == head.group
                && old[j].kind == head.kind
            {
                j += 1;
            }
        }
        let run = &old[i..j];
        let members: Vec<&CorePlan> = run.iter().map(|b| &plan.cores[b.cores[0]]).collect();
        let uniform = head.level == Level::Bank
            && match head.kind {
                BlockKind::Compute { stmt } => uniform_refs(&k.stmts[stmt], &members),
                BlockKind::Zero { .. } => true,
                _ => false,
            };
        if uniform {
            let mut merged = head.clone();
            merged.level = Level::Group;
            merged.cores = run.iter().flat_map(|b| b.cores.iter().copied()).collect();
            for b in &run[1..] {
                merged.rows = merged.rows.max(b.rows);
                for (m, o) in merged.body.iter_mut().zip(&b.body) {
                    m.count = m.count.max(o.count);
                }
            }
            out.push(merged);
        } else {
            out.extend(run.iter().cloned());
        }
        i = j;
    }
    plan.blocks = out;
}

fn staged_pass(plan: &mut SchedulePlan) {
    let b = plan.backend.clone();
    for r in [&mut plan.input, &mut plan.output] {
        let channels = std::mem::take(&mut r.channels);
        *r = plan_rearrangement(channels, &b, r.direction);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::hbm_pim_like;
    use crate::ir::{builtin, fig4_kernel};

    fn small_backend(groups: usize, cores: usize) -> BackendDescriptor {
        let mut b = hbm_pim_like();
        b.num_channels = groups;
        b.groups = groups;
        b.cores_per_group = cores;
        b
    }

    #[test]
    fn block_size_and_phase_count() {
        let mut b = small_backend(4, 4);
        b.onchip_buffer_bytes = 64 * 1024;
        let ch = (0..4)
            .map(|c| ChannelTransfer {
                channel: c,
                pim_bytes: 32 * 1024,
                host_bytes: 32 * 1024,
                pieces: Vec::new(),
            })
            .collect();
        let r = plan_rearrangement(ch, &b, Direction::HostToPim);
        assert_eq!(r.block_bytes, 16 * 1024);
        assert_eq!(r.phase_count(), 2);
        let phases: Vec<Phase> = r.phases().collect();
        assert!(phases.iter().all(|p| p.blocks.len() == 4));
        b.onchip_buffer_bytes = 0;
        let r = plan_rearrangement(r.channels, &b, Direction::HostToPim);
        assert!(!r.staged);
        assert_eq!(r.phase_count(), 0);
    }

    #[test]
    fn host_lines_counts_shared_lines_once() {
        // 2-byte elements, 64-byte lines: 32 elements per line.
        let dims = [4, 16];
        let all = [
            IndexSet::Range { lo: 0, hi: 4 },
            IndexSet::Range { lo: 0, hi: 16 },
        ];
        assert_eq!(host_lines(&dims, &all, 2, 64), 2);
        let col = [
            IndexSet::Range { lo: 0, hi: 4 },
            IndexSet::Range { lo: 3, hi: 4 },
        ];
        assert_eq!(host_lines(&dims, &col, 2, 64), 2);
        let wide = [
            IndexSet::Range { lo: 0, hi: 2 },
            IndexSet::Range { lo: 0, hi: 100 },
        ];
        assert_eq!(host_lines(&[2, 100], &wide, 2, 64), 7);
    }

    #[test]
    fn fig4_draft3_plan() {
        let space = Space::new(fig4_kernel());
        let d = space
            .parse_draft("[[2,2,A0^b],[1,1,A1^i],[1,1,B1^k]]")
            .unwrap();
        let b = small_backend(2, 2);
        let plan = build_schedule_plan(&space, &d, &b, PlanOptions::new(Strategy::Sparse)).unwrap();
        assert_eq!(plan.cores.len(), 4);
        assert!(plan.strategy_matters);
        let a = plan.kernel.tensor_id("A").unwrap();
        let s = plan.cores[0].slot(a).unwrap();
        assert_eq!(s.dims[0], IndexSet::Range { lo: 0, hi: 4 });
        assert_eq!(s.dims[1].len(), 12);
        let e = build_schedule_plan(&space, &d, &b, PlanOptions::new(Strategy::Expand)).unwrap();
        assert_eq!(
            e.cores[0].slot(a).unwrap().dims[1],
            IndexSet::Range { lo: 0, hi: 16 }
        );
    }

    #[test]
    fn uniform_group_uses_broadcast() {
        let space = Space::new(builtin("va", &[64]).unwrap());
        let d = space.parse_draft("[[2,4,A0^i]]").unwrap();
        let b = small_backend(2, 4);
        let g = build_schedule_plan(&space, &d, &b, PlanOptions::new(Strategy::Expand)).unwrap();
        let mut o = PlanOptions::new(Strategy::Expand);
        o.broadcast = false;
        let n = build_schedule_plan(&space, &d, &b, o).unwrap();
        let (gg, gb) = g.command_counts();
        let (ng, nb) = n.command_counts();
        assert_eq!((gb, ng), (0, 0));
        assert_eq!(gg * 4, nb);
    }

    #[test]
    fn reduction_split_records_merge() {
        let space = Space::new(builtin("red", &[1, 64]).unwrap());
        let d = space.parse_draft("[[1,1,A0^b],[2,2,A1^i]]").unwrap();
        let plan =
            build_schedule_plan(&space, &d, &small_backend(2, 2), PlanOptions::default()).unwrap();
        assert_eq!(plan.merges[0].kind, MergeKind::HostSum);
        assert_eq!(plan.output.total_pim_bytes(), 4 * 2);
    }

    #[test]
    fn plan_json_round_trip() {
        let space = Space::new(fig4_kernel());
        let d = space
            .parse_draft("[[2,2,A0^b],[1,1,A1^i],[1,1,B1^k]]")
            .unwrap();
        let plan =
            build_schedule_plan(&space, &d, &small_backend(2, 2), PlanOptions::default()).unwrap();
        let back = SchedulePlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
        assert!(SchedulePlan::from_json("{").is_err());
    }
}
