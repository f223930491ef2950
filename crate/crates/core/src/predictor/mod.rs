//! Coupled predictor: a boosted-tree regressor over draft features that
//! estimates end-to-end time, plus the offline-training workflow and the
//! best-draft lookup table.

pub mod gbt;

use std::collections::BTreeMap;
use std::sync::RwLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gbt::{GbtModel, Hyper};

use crate::backend::BackendDescriptor;
use crate::error::{Error, Result};
use crate::ir::Kernel;
use crate::plan::{build_schedule_plan, MergeKind, PlanOptions, SchedulePlan};
use crate::prune::{prune, PruneOptions};
use crate::schedule::{all_drafts, Part, Space, TilingDraft};
use crate::sim::estimate_cost;
use crate::tile::Strategy;

/// Dimension sets encoded per draft; further sets are dropped.
pub const MAX_SETS: usize = 4;
pub const FEATURE_VERSION: u32 = 1;

const PER_SET: [&str; 7] = [
    "groups",
    "cores",
    "extent",
    "tile",
    "tile_mod_d",
    "scale",
    "offset",
];
const PER_PLAN: [&str; 22] = [
    "sparse",
    "strategy_matters",
    "padded",
    "total_groups",
    "cores_per_group",
    "active_cores",
    "active_groups",
    "group_commands",
    "bank_commands",
    "max_group_commands",
    "max_group_elements",
    "in_pim_bytes",
    "in_host_bytes",
    "in_max_channel_bytes",
    "in_channels",
    "in_phases",
    "out_pim_bytes",
    "out_host_bytes",
    "out_max_channel_bytes",
    "out_channels",
    "out_phases",
    "merge",
];
const PER_BACKEND: [&str; 10] = [
    "d",
    "groups",
    "backend_cores_per_group",
    "bw_ratio",
    "issue",
    "op",
    "bank",
    "onchip_kib",
    "element_bytes",
    "broadcast",
];
const MAX_VARS: usize = 4;

/// Feature names in vector order.
pub fn feature_names() -> Vec<String> {
    let mut out = Vec::new();
    for s in 0..MAX_SETS {
        out.extend(PER_SET.iter().map(|n| format!("set{s}_{n}")));
    }
    out.extend(PER_PLAN.iter().map(|s| s.to_string()));
    out.extend(PER_BACKEND.iter().map(|s| s.to_string()));
    out.push("kernel_hash".into());
    out.push("statements".into());
    out.extend((0..MAX_VARS).map(|v| format!("extent{v}")));
    out
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hash of a kernel's structure, independent of extents.
pub fn kernel_signature(k: &Kernel) -> u64 {
    let mut s = k.name.clone();
    for t in &k.tensors {
        s.push_str(&format!("|{}:{}:{}", t.name, t.rank(), t.role));
    }
    for st in &k.stmts {
        s.push_str(&format!("|{}={:?}", k.render_ref(&st.dst), st.op));
    }
    fnv(s.as_bytes())
}

/// First representative with the same mapping function and tile length, so
/// drafts that differ only in which tensor carries the function encode alike.
fn canonical_choice(space: &Space, s: usize, p: &Part) -> usize {
    let f = space.rep(s, p.choice).func;
    let t = space.tile_len(s, p);
    (0..space.choices(s).len())
        .find(|&c| space.rep(s, c).func == f && space.tile_len(s, &Part { choice: c, ..*p }) == t)
        .unwrap_or(p.choice)
}

/// Fixed-length feature vector of one lowered draft.
pub fn featurize(
    space: &Space,
    draft: &TilingDraft,
    plan: &SchedulePlan,
    b: &BackendDescriptor,
) -> Vec<f64> {
    let k = &space.kernel;
    let mut x = Vec::with_capacity(feature_names().len());
    for s in 0..MAX_SETS {
        match draft.parts.get(s) {
            Some(p) => {
                let r = space.rep(s, canonical_choice(space, s, p));
                let t = space.tile_len(s, p);
                let residue = if b.simd_width_d > 0 {
                    t % b.simd_width_d
                } else {
                    t
                };
                x.extend([
                    p.groups as f64,
                    p.cores as f64,
                    space.extent(s, canonical_choice(space, s, p)) as f64,
                    t as f64,
                    residue as f64,
                    r.func.scale as f64,
                    r.func.offset as f64,
                ]);
            }
            None => x.extend([0.0; PER_SET.len()]),
        }
    }
    let (gc, bc) = plan.command_counts();
    let n_groups = plan.cores.iter().map(|c| c.group() + 1).max().unwrap_or(0);
    let mut per_group_cmds = vec![0u64; n_groups];
    let mut per_group_elems = vec![0u64; n_groups];
    for blk in &plan.blocks {
        per_group_cmds[blk.group] += blk.command_count();
        per_group_elems[blk.group] +=
            blk.rows as u64 * blk.body.iter().map(|m| m.count as u64).sum::<u64>();
    }
    let mut groups_seen: Vec<usize> = plan.cores.iter().map(|c| c.group()).collect();
    groups_seen.dedup();
    let merge = plan
        .merges
        .iter()
        .map(|m| match m.kind {
            MergeKind::Single => 0.0,
            MergeKind::HostSum => 1.0,
            MergeKind::Accumulator => 2.0,
        })
        .fold(0.0, f64::max);
    x.extend([
        (plan.strategy == Strategy::Sparse) as u8 as f64,
        plan.strategy_matters as u8 as f64,
        plan.padded as u8 as f64,
        draft.total_groups() as f64,
        draft.cores_per_group() as f64,
        plan.cores.len() as f64,
        groups_seen.len() as f64,
        gc as f64,
        bc as f64,
        per_group_cmds.iter().copied().max().unwrap_or(0) as f64,
        per_group_elems.iter().copied().max().unwrap_or(0) as f64,
        plan.input.total_pim_bytes() as f64,
        plan.input.total_host_bytes() as f64,
        plan.input.max_channel_bytes() as f64,
        plan.input.channels.len() as f64,
        plan.input.phase_count() as f64,
        plan.output.total_pim_bytes() as f64,
        plan.output.total_host_bytes() as f64,
        plan.output.max_channel_bytes() as f64,
        plan.output.channels.len() as f64,
        plan.output.phase_count() as f64,
        merge,
    ]);
    x.extend([
        b.simd_width_d as f64,
        b.groups as f64,
        b.cores_per_group as f64,
        b.host_channel_bw / b.pim_channel_bw,
        b.cmd_issue_cycles,
        b.core_op_cycles,
        b.bank_access_cycles_per_elem,
        b.onchip_buffer_bytes as f64 / 1024.0,
        b.element_bytes as f64,
        b.supports_group_broadcast as u8 as f64,
    ]);
    x.push((kernel_signature(k) % 1000) as f64);
    x.push(k.stmts.len() as f64);
    for v in 0..MAX_VARS {
        x.push(k.vars.get(v).map(|lv| lv.extent as f64).unwrap_or(0.0));
    }
    x
}

/// One lowered candidate with its features and modeled time.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiled {
    /// Index into the draft list.
    pub draft: usize,
    pub strategy: Strategy,
    pub features: Vec<f64>,
    pub t_total: f64,
}

/// Lower every draft under each strategy it distinguishes and record
/// features and modeled time. Failing drafts are returned separately.
pub fn profile_drafts(
    space: &Space,
    drafts: &[TilingDraft],
    b: &BackendDescriptor,
) -> (Vec<Profiled>, Vec<(usize, String)>) {
    let results: Vec<Result<Vec<Profiled>>> = drafts
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut out = Vec::new();
            let first = build_schedule_plan(space, d, b, PlanOptions::new(Strategy::Expand))?;
            let matters = first.strategy_matters;
            out.push(profile_one(space, i, d, &first, b));
            if matters {
                let second = build_schedule_plan(space, d, b, PlanOptions::new(Strategy::Sparse))?;
                out.push(profile_one(space, i, d, &second, b));
            }
            Ok(out)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.extend(v),
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    (ok, failed)
}

fn profile_one(
    space: &Space,
    i: usize,
    d: &TilingDraft,
    plan: &SchedulePlan,
    b: &BackendDescriptor,
) -> Profiled {
    Profiled {
        draft: i,
        strategy: plan.strategy,
        features: featurize(space, d, plan, b),
        t_total: estimate_cost(plan, b).t_total,
    }
}

/// Lookup-table key: kernel name, loop extents and backend name.
pub fn table_key(k: &Kernel, backend: &str) -> String {
    let ext: Vec<String> = k.vars.iter().map(|v| v.extent.to_string()).collect();
    format!("{}|{}|{}", k.name, ext.join(","), backend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub draft: TilingDraft,
    pub draft_text: String,
    pub strategy: Strategy,
    /// Predicted log-time of the chosen draft.
    pub predicted: f64,
    /// Number of candidates sharing the best prediction.
    pub ties: usize,
    /// Seed used to break those ties.
    pub tie_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub version: u32,
    pub entries: BTreeMap<String, TableEntry>,
}

impl LookupTable {
    pub fn new() -> Self {
        LookupTable {
            version: FEATURE_VERSION,
            entries: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: LookupTable = serde_json::from_str(text)
            .map_err(|e| Error::Artifact(format!("lookup table: {e}")))?;
        if t.version != FEATURE_VERSION {
            return Err(Error::Artifact(format!(
                "lookup table: unsupported version {}",
                t.version
            )));
        }
        Ok(t)
    }
}

fn entry_valid(space: &Space, b: &BackendDescriptor, e: &TableEntry) -> bool {
    e.draft.parts.len() == space.sets.len()
        && e.draft
            .parts
            .iter()
            .enumerate()
            .all(|(s, p)| p.choice < space.choices(s).len() && p.groups >= 1 && p.cores >= 1)
        && e.draft.total_groups() <= b.groups
        && e.draft.cores_per_group() <= b.cores_per_group
}

/// Pick the candidate with the lowest prediction; exact ties are broken by
/// a seeded draw.
fn choose(preds: &[f64], seed: u64) -> (usize, usize) {
    let best = preds.iter().copied().fold(f64::INFINITY, f64::min);
    let tied: Vec<usize> = (0..preds.len()).filter(|&i| preds[i] == best).collect();
    if tied.len() == 1 {
        return (tied[0], 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (tied[rng.gen_range(0..tied.len())], tied.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub draft: TilingDraft,
    pub strategy: Strategy,
    pub predicted: f64,
    pub hit: bool,
    /// Wall-clock of the miss path (zero on hits).
    pub elapsed: Duration,
    pub candidates: usize,
}

/// A trained model with its lookup table. Lookups take a read lock; misses
/// compute outside the lock and insert under the write lock, keeping the
/// first entry written for a key.
#[derive(Debug)]
pub struct Predictor {
    pub model: GbtModel,
    table: RwLock<LookupTable>,
    pub seed: u64,
}

impl Predictor {
    pub fn new(model: GbtModel, table: LookupTable, seed: u64) -> Self {
        Predictor {
            model,
            table: RwLock::new(table),
            seed,
        }
    }

    pub fn table(&self) -> LookupTable {
        self.table.read().expect("table lock").clone()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.model.predict(x)
    }

    /// Best draft for a kernel with concrete extents, from the table or by
    /// running the generation pipeline and the model.
    pub fn dynamic_predict(
        &self,
        space: &Space,
        b: &BackendDescriptor,
        rules: PruneOptions,
    ) -> Result<Prediction> {
        let key = table_key(&space.kernel, &b.name);
        if let Some(e) = self.table.read().expect("table lock").entries.get(&key) {
            if entry_valid(space, b, e) {
                return Ok(Prediction {
                    draft: e.draft.clone(),
                    strategy: e.strategy,
                    predicted: e.predicted,
                    hit: true,
                    elapsed: Duration::ZERO,
                    candidates: 0,
                });
            }
        }
        let start = Instant::now();
        let drafts = all_drafts(space, b.groups, b.cores_per_group);
        let (kept, _) = prune(space, b, drafts, rules);
        let (cands, failed) = profile_drafts(space, &kept, b);
        if cands.is_empty() {
            return Err(Error::Lowering(no_candidates(&failed)));
        }
        let entry = self.pick(space, &kept, &cands, &key);
        let elapsed = start.elapsed();
        let mut table = self.table.write().expect("table lock");
        let e = table.entries.entry(key).or_insert(entry).clone();
        Ok(Prediction {
            draft: e.draft,
            strategy: e.strategy,
            predicted: e.predicted,
            hit: false,
            elapsed,
            candidates: cands.len(),
        })
    }

    fn pick(
        &self,
        space: &Space,
        drafts: &[TilingDraft],
        cands: &[Profiled],
        key: &str,
    ) -> TableEntry {
        let preds: Vec<f64> = cands
            .iter()
            .map(|c| self.model.predict(&c.features))
            .collect();
        let tie_seed = self.seed ^ fnv(key.as_bytes());
        let (i, ties) = choose(&preds, tie_seed);
        let d = &drafts[cands[i].draft];
        TableEntry {
            draft: d.clone(),
            draft_text: d.render(space),
            strategy: cands[i].strategy,
            predicted: preds[i],
            ties,
            tie_seed,
        }
    }

    /// Continue boosting on newly profiled samples (labels in cycles).
    pub fn refresh(&mut self, samples: &[Profiled], hyper: &Hyper) {
        let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.t_total.max(1e-9).ln()).collect();
        self.model.boost(&xs, &ys, hyper);
    }
}

fn no_candidates(failed: &[(usize, String)]) -> String {
    let mut causes: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, e) in failed {
        *causes.entry(e.as_str()).or_default() += 1;
    }
    let list: Vec<String> = causes.iter().map(|(c, n)| format!("{n}x {c}")).collect();
    format!("no draft could be lowered ({})", list.join("; "))
}

/// A profiled search space.
#[derive(Debug, Clone)]
pub struct ProfiledSpace {
    pub space: Space,
    pub drafts: Vec<TilingDraft>,
    pub candidates: Vec<Profiled>,
}

impl ProfiledSpace {
    pub fn build(kernel: Kernel, b: &BackendDescriptor, rules: PruneOptions) -> Result<Self> {
        let space = Space::new(kernel);
        let drafts = all_drafts(&space, b.groups, b.cores_per_group);
        let (drafts, _) = prune(&space, b, drafts, rules);
        let (candidates, failed) = profile_drafts(&space, &drafts, b);
        if candidates.is_empty() {
            return Err(Error::Lowering(no_candidates(&failed)));
        }
        Ok(ProfiledSpace {
            space,
            drafts,
            candidates,
        })
    }

    pub fn best_time(&self) -> f64 {
        self.candidates
            .iter()
            .map(|c| c.t_total)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct OfflineResult {
    pub model: GbtModel,
    pub table: LookupTable,
    pub samples: usize,
    pub candidates: usize,
    pub train_rmse: f64,
    pub elapsed: Duration,
}

/// Sample indices stratified by (configuration, total core count).
fn stratified_sample(spaces: &[ProfiledSpace], fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (si, ps) in spaces.iter().enumerate() {
        let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (ci, c) in ps.candidates.iter().enumerate() {
            let d = &ps.drafts[c.draft];
            strata
                .entry(d.total_groups() * d.cores_per_group())
                .or_default()
                .push(ci);
        }
        for (cores, mut members) in strata {
            let take = ((members.len() as f64 * fraction).ceil() as usize).clamp(1, members.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((si as u64) << 32) ^ cores as u64);
            members.shuffle(&mut rng);
            members.truncate(take);
            members.sort_unstable();
            out.extend(members.into_iter().map(|ci| (si, ci)));
        }
    }
    out
}

/// Profile every configuration, train on a stratified sample and fill the
/// lookup table with each configuration's best predicted draft.
pub fn offline_train(
    kernels: &[Kernel],
    b: &BackendDescriptor,
    fraction: f64,
    hyper: &Hyper,
) -> Result<OfflineResult> {
    if kernels.is_empty() {
        return Err(Error::Precondition(
            "offline training needs at least one configuration".into(),
        ));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "sampling fraction {fraction} is not in (0, 1]"
        )));
    }
    let start = Instant::now();
    let spaces: Vec<ProfiledSpace> = kernels
        .iter()
        .map(|k| ProfiledSpace::build(k.clone(), b, PruneOptions::default()))
        .collect::<Result<_>>()?;
    offline_train_profiled(&spaces, b, fraction, hyper, start)
}

/// Like [`offline_train`] on already profiled spaces.
pub fn offline_train_profiled(
    spaces: &[ProfiledSpace],
    b: &BackendDescriptor,
    fraction: f64,
    hyper: &Hyper,
    start: Instant,
) -> Result<OfflineResult> {
    let picked = stratified_sample(spaces, fraction, hyper.seed);
    let xs: Vec<Vec<f64>> = picked
        .iter()
        .map(|&(s, c)| spaces[s].candidates[c].features.clone())
        .collect();
    let ys: Vec<f64> = picked
        .iter()
        .map(|&(s, c)| spaces[s].candidates[c].t_total.max(1e-9).ln())
        .collect();
    let model = GbtModel::train(&xs, &ys, hyper)?;
    let train_rmse = model.rmse(&xs, &ys);
    let predictor = Predictor::new(model, LookupTable::new(), hyper.seed);
    let mut table = LookupTable::new();
    for ps in spaces {
        let key = table_key(&ps.space.kernel, &b.name);
        let e = predictor.pick(&ps.space, &ps.drafts, &ps.candidates, &key);
        table.entries.insert(key, e);
    }
    Ok(OfflineResult {
        model: predictor.model,
        table,
        samples: picked.len(),
        candidates: spaces.iter().map(|s| s.candidates.len()).sum(),
        train_rmse,
        elapsed: start.elapsed(),
    })
}

/// Outcome of predicting one configuration against its exhaustive optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretCase {
    pub key: String,
    pub candidates: usize,
    pub chosen: f64,
    pub optimum: f64,
    /// optimum / chosen, in (0, 1].
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretSummary {
    pub cases: Vec<RegretCase>,
    pub top1: f64,
    /// Mean achieved fraction over mispredicted cases (1 when there are none).
    pub mispredicted_achieved: f64,
}

/// Compare the model's choice with the exhaustive optimum on each space.
pub fn regret(
    model: &GbtModel,
    spaces: &[ProfiledSpace],
    b: &BackendDescriptor,
    seed: u64,
) -> RegretSummary {
    let p = Predictor::new(model.clone(), LookupTable::new(), seed);
    let cases: Vec<RegretCase> = spaces
        .iter()
        .map(|ps| {
            let key = table_key(&ps.space.kernel, &b.name);
            let preds: Vec<f64> = ps
                .candidates
                .iter()
                .map(|c| p.predict(&c.features))
                .collect();
            let (i, _) = choose(&preds, seed ^ fnv(key.as_bytes()));
            let chosen = ps.candidates[i].t_total;
            let optimum = ps.best_time();
            RegretCase {
                key,
                candidates: ps.candidates.len(),
                chosen,
                optimum,
                achieved: if chosen > 0.0 { optimum / chosen } else { 1.0 },
            }
        })
        .collect();
    let hits = cases
        .iter()
        .filter(|c| c.chosen <= c.optimum * (1.0 + 1e-12))
        .count();
    let missed: Vec<f64> = cases
        .iter()
        .filter(|c| c.chosen > c.optimum * (1.0 + 1e-12))
        .map(|c| c.achieved)
        .collect();
    RegretSummary {
        top1: hits as f64 / cases.len().max(1) as f64,
        mispredicted_achieved: if missed.is_empty() {
            1.0
        } else {
            missed.iter().sum::<f64>() / missed.len() as f64
        },
        cases,
    }
}
