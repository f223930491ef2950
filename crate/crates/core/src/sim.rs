//! Functional execution and analytic cost of schedule plans.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::error::{Error, Result};
use crate::ir::{AssignOp, Expr, Kernel, Role, TensorId};
use crate::plan::{
    build_schedule_plan, for_each_point, written_elements, BlockKind, CorePlan, Level, MergeKind,
    PlanOptions, RearrangementPlan, SchedulePlan,
};
use crate::schedule::{Space, TilingDraft};
use crate::tensor::{TensorMap, TensorValue};
use crate::tile::Strategy;

/// PIM memory state: one word array per core plus group accumulator buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryImage {
    pub banks: Vec<Vec<f64>>,
    /// Shadow bitmap: word written since start.
    pub init: Vec<Vec<bool>>,
    pub group_buffers: BTreeMap<(usize, TensorId), Vec<f64>>,
    capacity_words: u64,
}

impl MemoryImage {
    fn new(plan: &SchedulePlan) -> Self {
        let banks: Vec<Vec<f64>> = plan
            .cores
            .iter()
            .map(|c| vec![0.0; c.used_elems() as usize])
            .collect();
        let init = banks.iter().map(|b| vec![false; b.len()]).collect();
        MemoryImage {
            banks,
            init,
            group_buffers: BTreeMap::new(),
            capacity_words: plan.backend.core_capacity_bytes() / plan.backend.element_bytes as u64,
        }
    }

    fn check(&self, core: usize, addr: u64, index: usize) -> Result<usize> {
        if addr >= self.capacity_words {
            return Err(Error::Fault {
                index,
                msg: format!("address {addr} beyond the banks of core entry {core}"),
            });
        }
        Ok(addr as usize)
    }

    fn read(&self, core: usize, addr: u64, index: usize) -> Result<f64> {
        let a = self.check(core, addr, index)?;
        if a >= self.banks[core].len() || !self.init[core][a] {
            return Err(Error::Fault {
                index,
                msg: format!("read of uninitialized word {addr} on core entry {core}"),
            });
        }
        Ok(self.banks[core][a])
    }

    fn write(&mut self, core: usize, addr: u64, v: f64, index: usize) -> Result<()> {
        let a = self.check(core, addr, index)?;
        if a >= self.banks[core].len() {
            return Err(Error::Fault {
                index,
                msg: format!("write to unallocated word {addr} on core entry {core}"),
            });
        }
        self.banks[core][a] = v;
        self.init[core][a] = true;
        Ok(())
    }
}

fn unflatten(dims: &[usize], mut f: usize, out: &mut [i64]) {
    for d in (0..dims.len()).rev() {
        out[d] = (f % dims[d]) as i64;
        f /= dims[d];
    }
}

fn addr_of(c: &CorePlan, t: TensorId, idx: &[i64], index: usize, k: &Kernel) -> Result<u64> {
    c.slot(t)
        .and_then(|s| s.local(idx))
        .ok_or_else(|| Error::Fault {
            index,
            msg: format!(
                "`{}{:?}` is not in the layout of group {} core {}",
                k.tensors[t].name,
                idx,
                c.group(),
                c.core()
            ),
        })
}

fn ref_addr(
    k: &Kernel,
    c: &CorePlan,
    r: &crate::ir::TensorRef,
    env: &[i64],
    index: usize,
) -> Result<u64> {
    let idx: Vec<i64> = r.index.iter().map(|e| e.eval(env[e.var])).collect();
    addr_of(c, r.tensor, &idx, index, k)
}

fn eval(
    k: &Kernel,
    e: &Expr,
    c: &CorePlan,
    ci: usize,
    env: &[i64],
    mem: &MemoryImage,
    index: usize,
) -> Result<f64> {
    Ok(match e {
        Expr::Ref(r) => mem.read(ci, ref_addr(k, c, r, env, index)?, index)?,
        Expr::Const(v) => *v,
        Expr::Add(a, b) => {
            eval(k, a, c, ci, env, mem, index)? + eval(k, b, c, ci, env, mem, index)?
        }
        Expr::Mul(a, b) => {
            eval(k, a, c, ci, env, mem, index)? * eval(k, b, c, ci, env, mem, index)?
        }
        Expr::Max(a, b) => {
            eval(k, a, c, ci, env, mem, index)?.max(eval(k, b, c, ci, env, mem, index)?)
        }
        Expr::Exp(a) => eval(k, a, c, ci, env, mem, index)?.exp(),
        Expr::Softmax { .. } => unreachable!("softmax blocks are handled separately"),
    })
}

/// Run a plan on concrete inputs and return its outputs and final memory.
pub fn functional_execute_with_memory(
    plan: &SchedulePlan,
    inputs: &TensorMap,
) -> Result<(TensorMap, MemoryImage)> {
    let k = &plan.kernel;
    for d in k.inputs() {
        let v = inputs
            .get(&d.name)
            .ok_or_else(|| Error::Precondition(format!("missing input tensor `{}`", d.name)))?;
        if v.dims != d.dims {
            return Err(Error::Precondition(format!(
                "input `{}` has shape {:?}, declared {:?}",
                d.name, v.dims, d.dims
            )));
        }
    }
    let mut mem = MemoryImage::new(plan);

    // Input rearrangement: padding arrives as zeros.
    for (ci, c) in plan.cores.iter().enumerate() {
        for s in &c.slots {
            let decl = &k.tensors[s.tensor];
            if decl.role != Role::Input {
                continue;
            }
            for a in s.base..s.base + s.elems() {
                mem.write(ci, a, 0.0, 0)?;
            }
            if !s.holds_data() {
                continue;
            }
            let host = &inputs[&decl.name];
            let mut idx = vec![0i64; s.dims.len()];
            let mut pos = vec![0usize; s.dims.len()];
            let total = s.real_elems();
            for _ in 0..total {
                for d in 0..idx.len() {
                    idx[d] = s.dims[d].get(pos[d]);
                }
                let f = host.flat(&idx.iter().map(|&x| x as usize).collect::<Vec<_>>());
                let a = s.local(&idx).expect("held index");
                mem.write(ci, a, host.data[f], 0)?;
                for d in (0..pos.len()).rev() {
                    pos[d] += 1;
                    if pos[d] < s.dims[d].len() {
                        break;
                    }
                    pos[d] = 0;
                }
            }
        }
    }

    let mut env = vec![0i64; k.vars.len()];
    for (index, blk) in plan.blocks.iter().enumerate() {
        match blk.kind {
            BlockKind::Zero { tensor } => {
                for &ci in &blk.cores {
                    if let Some(s) = plan.cores[ci].slot(tensor) {
                        for a in s.base..s.base + s.elems() {
                            mem.write(ci, a, 0.0, index)?;
                        }
                    }
                }
            }
            BlockKind::Compute { stmt } => {
                let st = &k.stmts[stmt];
                for &ci in &blk.cores {
                    let c = &plan.cores[ci];
                    let mut res: Result<()> = Ok(());
                    for_each_point(&st.loops, &c.tile.ranges, &mut env, |env| {
                        if res.is_err() {
                            return;
                        }
                        res = (|| {
                            let v = eval(k, &st.rhs, c, ci, env, &mem, index)?;
                            let a = ref_addr(k, c, &st.dst, env, index)?;
                            let v = match st.op {
                                AssignOp::Assign => v,
                                AssignOp::Accumulate => mem.read(ci, a, index)? + v,
                            };
                            mem.write(ci, a, v, index)
                        })();
                    });
                    res?;
                }
            }
            BlockKind::Softmax { stmt } => {
                let st = &k.stmts[stmt];
                let (axis, arg) = match &st.rhs {
                    Expr::Softmax { axis, arg } => (*axis, arg),
                    _ => {
                        return Err(Error::Fault {
                            index,
                            msg: "softmax block on a non-softmax statement".into(),
                        })
                    }
                };
                let outer: Vec<usize> = st.loops.iter().copied().filter(|&v| v != axis).collect();
                for &ci in &blk.cores {
                    let c = &plan.cores[ci];
                    let (lo, hi) = c.tile.ranges[axis];
                    let mut res: Result<()> = Ok(());
                    let mut row_env = env.clone();
                    for_each_point(&outer, &c.tile.ranges, &mut row_env, |env| {
                        if res.is_err() {
                            return;
                        }
                        res = (|| {
                            let mut e = env.to_vec();
                            let mut vals = Vec::with_capacity((hi - lo) as usize);
                            for j in lo..hi {
                                e[axis] = j;
                                vals.push(mem.read(ci, ref_addr(k, c, arg, &e, index)?, index)?);
                            }
                            let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = vals.iter().map(|v| (v - m).exp()).sum();
                            for j in lo..hi {
                                e[axis] = j;
                                let a = ref_addr(k, c, &st.dst, &e, index)?;
                                mem.write(ci, a, (vals[(j - lo) as usize] - m).exp() / sum, index)?;
                            }
                            Ok(())
                        })();
                    });
                    res?;
                }
            }
            BlockKind::Accumulate { tensor } => {
                let dims = &k.tensors[tensor].dims;
                let mut buf = vec![0.0; k.tensors[tensor].elements()];
                let mut idx = vec![0i64; dims.len()];
                for &ci in &blk.cores {
                    let c = &plan.cores[ci];
                    for f in written_elements(k, c, tensor) {
                        unflatten(dims, f, &mut idx);
                        buf[f] += mem.read(ci, addr_of(c, tensor, &idx, index, k)?, index)?;
                    }
                }
                mem.group_buffers.insert((blk.group, tensor), buf);
            }
        }
    }

    // Output rearrangement and merge.
    let mut out = TensorMap::new();
    for (t, decl) in k.tensors.iter().enumerate() {
        if decl.role != Role::Output {
            continue;
        }
        let mut v = TensorValue::zeros(&decl.dims);
        if plan.merge_kind(t) == MergeKind::Accumulator {
            for ((_, bt), buf) in &mem.group_buffers {
                if *bt == t {
                    for (o, x) in v.data.iter_mut().zip(buf) {
                        *o += x;
                    }
                }
            }
        } else {
            let mut idx = vec![0i64; decl.dims.len()];
            for (ci, c) in plan.cores.iter().enumerate() {
                for f in written_elements(k, c, t) {
                    unflatten(&decl.dims, f, &mut idx);
                    v.data[f] +=
                        mem.read(ci, addr_of(c, t, &idx, usize::MAX, k)?, plan.blocks.len())?;
                }
            }
        }
        out.insert(decl.name.clone(), v);
    }
    Ok((out, mem))
}

pub fn functional_execute(plan: &SchedulePlan, inputs: &TensorMap) -> Result<TensorMap> {
    functional_execute_with_memory(plan, inputs).map(|(o, _)| o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub t_input_rearrange: f64,
    pub t_compute: f64,
    pub t_output_rearrange: f64,
    pub t_total: f64,
    /// Compute cycles per group, indexed by group.
    pub group_compute: Vec<f64>,
    /// Command issue serialized through the controller.
    pub controller_cycles: f64,
    pub group_commands: u64,
    pub bank_commands: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub input_phases: u64,
    pub output_phases: u64,
}

impl CostReport {
    pub fn zero() -> Self {
        CostReport {
            t_input_rearrange: 0.0,
            t_compute: 0.0,
            t_output_rearrange: 0.0,
            t_total: 0.0,
            group_compute: Vec::new(),
            controller_cycles: 0.0,
            group_commands: 0,
            bank_commands: 0,
            input_bytes: 0,
            output_bytes: 0,
            input_phases: 0,
            output_phases: 0,
        }
    }

    pub fn rearrange_share(&self) -> f64 {
        if self.t_total > 0.0 {
            (self.t_input_rearrange + self.t_output_rearrange) / self.t_total
        } else {
            0.0
        }
    }
}

/// Cycles for one command of `count` elements.
pub fn command_cycles(b: &BackendDescriptor, op: crate::plan::Opcode, count: usize) -> f64 {
    if op.is_unit() {
        return count as f64 * b.core_op_cycles;
    }
    let lanes = b.simd_width_d.max(1);
    b.cmd_issue_cycles
        + count.div_ceil(lanes) as f64 * b.core_op_cycles
        + count as f64 * b.bank_access_cycles_per_elem
}

/// Modeled time of one rearrangement.
pub fn rearrangement_cycles(r: &RearrangementPlan, b: &BackendDescriptor) -> f64 {
    if r.staged {
        let host: f64 = r
            .channels
            .iter()
            .map(|c| c.host_bytes as f64 / b.host_channel_bw)
            .sum();
        let pim = r.max_channel_bytes() as f64 / b.pim_channel_bw;
        host + pim
    } else {
        r.channels
            .iter()
            .map(|c| {
                c.host_bytes as f64 / b.host_channel_bw + c.pim_bytes as f64 / b.pim_channel_bw
            })
            .sum()
    }
}

/// Same as [`rearrangement_cycles`] for staged plans, summed phase by phase.
pub fn staged_cycles_by_phase(r: &RearrangementPlan, b: &BackendDescriptor) -> f64 {
    r.phases()
        .map(|p| {
            let reads: f64 = p.blocks.iter().map(|x| x.2 / b.host_channel_bw).sum();
            let writes = p
                .blocks
                .iter()
                .map(|x| x.1 as f64 / b.pim_channel_bw)
                .fold(0.0, f64::max);
            reads + writes
        })
        .sum()
}

pub fn estimate_cost(plan: &SchedulePlan, b: &BackendDescriptor) -> CostReport {
    let n_groups = plan.cores.iter().map(|c| c.group() + 1).max().unwrap_or(0);
    let mut groups = vec![0.0; n_groups];
    let mut controller = 0.0;
    let (mut gc, mut bc) = (0, 0);
    for blk in &plan.blocks {
        let per_row: f64 = blk
            .body
            .iter()
            .map(|m| command_cycles(b, m.op, m.count))
            .sum();
        groups[blk.group] += blk.rows as f64 * per_row;
        controller += blk.command_count() as f64 * b.cmd_issue_cycles;
        match blk.level {
            Level::Group => gc += blk.command_count(),
            Level::Bank => bc += blk.command_count(),
        }
    }
    let t_compute = groups.iter().copied().fold(0.0, f64::max) + controller;
    let t_in = rearrangement_cycles(&plan.input, b);
    let t_out = rearrangement_cycles(&plan.output, b);
    CostReport {
        t_input_rearrange: t_in,
        t_compute,
        t_output_rearrange: t_out,
        t_total: t_in + t_compute + t_out,
        group_compute: groups,
        controller_cycles: controller,
        group_commands: gc,
        bank_commands: bc,
        input_bytes: plan.input.total_pim_bytes(),
        output_bytes: plan.output.total_pim_bytes(),
        input_phases: plan.input.phase_count(),
        output_phases: plan.output.phase_count(),
    }
}

/// One costed candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    /// Index into the draft list passed to the tuner.
    pub draft: usize,
    pub strategy: Strategy,
    pub report: CostReport,
}

#[derive(Debug, Clone, Default)]
pub struct TuneOutcome {
    /// Ascending by t_total, ties by draft order then strategy.
    pub ranked: Vec<Ranked>,
    /// Drafts that could not be lowered, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// Lower and cost one draft under every strategy it distinguishes.
pub fn evaluate_draft(
    space: &Space,
    draft: &TilingDraft,
    b: &BackendDescriptor,
) -> Result<Vec<(Strategy, CostReport)>> {
    let first = build_schedule_plan(space, draft, b, PlanOptions::new(Strategy::Expand))?;
    let mut out = vec![(Strategy::Expand, estimate_cost(&first, b))];
    if first.strategy_matters {
        let second = build_schedule_plan(space, draft, b, PlanOptions::new(Strategy::Sparse))?;
        out.push((Strategy::Sparse, estimate_cost(&second, b)));
    }
    Ok(out)
}

fn rank_cmp(a: &Ranked, b: &Ranked) -> std::cmp::Ordering {
    a.report
        .t_total
        .total_cmp(&b.report.t_total)
        .then(a.draft.cmp(&b.draft))
        .then((a.strategy as u8).cmp(&(b.strategy as u8)))
}

/// Cost every draft and rank the candidates. The drafts are expected in
/// canonical order; the ranking is identical for any worker count.
pub fn exhaustive_tune(
    space: &Space,
    drafts: &[TilingDraft],
    b: &BackendDescriptor,
) -> TuneOutcome {
    let results: Vec<Result<Vec<(Strategy, CostReport)>>> = drafts
        .par_iter()
        .map(|d| evaluate_draft(space, d, b))
        .collect();
    let mut out = TuneOutcome::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out
                .ranked
                .extend(v.into_iter().map(|(strategy, report)| Ranked {
                    draft: i,
                    strategy,
                    report,
                })),
            Err(e) => out.failures.push((i, e.to_string())),
        }
    }
    out.ranked.sort_by(rank_cmp);
    out
}
