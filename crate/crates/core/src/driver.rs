//! End-to-end tuning: generate, prune, lower, cost, select.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::error::{Error, Result};
use crate::ir::Kernel;
use crate::plan::{build_schedule_plan, PlanOptions, SchedulePlan};
use crate::predictor::{offline_train, Hyper, LookupTable, Predictor};
use crate::prune::{prune, PruneOptions, PruneReport};
use crate::schedule::{all_drafts, Space};
use crate::sim::{estimate_cost, exhaustive_tune, CostReport, Ranked};
use crate::tile::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Rank every surviving draft by end-to-end time.
    Exhaustive,
    /// Pick with the learned predictor.
    Predictor,
    /// Keep the best drafts by compute time alone, then attach rearrangement.
    ComputeCentricBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Exhaustive => "exhaustive",
            Mode::Predictor => "predictor",
            Mode::ComputeCentricBaseline => "compute-centric-baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(Mode::Exhaustive),
            "predictor" => Ok(Mode::Predictor),
            "compute-centric-baseline" | "compute-centric" | "baseline" => {
                Ok(Mode::ComputeCentricBaseline)
            }
            _ => Err(Error::Precondition(format!(
                "unknown mode `{s}` (expected exhaustive, predictor or compute-centric-baseline)"
            ))),
        }
    }
}

/// Default number of compute-time templates the baseline keeps.
pub const DEFAULT_TOP_J: usize = 5;

#[derive(Debug, Clone)]
pub struct TuneConfig {
    pub kernel: Kernel,
    pub backend: BackendDescriptor,
    pub mode: Mode,
    pub rules: PruneOptions,
    pub seed: u64,
    pub top_j: usize,
    /// Trained predictor for [`Mode::Predictor`]; trained on the spot when absent.
    pub predictor: Option<Arc<Predictor>>,
}

impl TuneConfig {
    pub fn new(kernel: Kernel, backend: BackendDescriptor, mode: Mode) -> Self {
        TuneConfig {
            kernel,
            backend,
            mode,
            rules: PruneOptions::default(),
            seed: 0,
            top_j: DEFAULT_TOP_J,
            predictor: None,
        }
    }
}

/// Wall-clock per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub generate: Duration,
    pub prune: Duration,
    pub lower: Duration,
    pub select: Duration,
}

impl Timing {
    pub fn total(&self) -> Duration {
        self.generate + self.prune + self.lower + self.select
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub mode: Mode,
    pub plan: SchedulePlan,
    pub report: CostReport,
    pub prune: PruneReport,
    pub timing: Timing,
    /// Candidates costed (draft × strategy); zero on a predictor table hit.
    pub candidates: usize,
    pub failures: usize,
    /// Predictor table hit, when the predictor chose.
    pub table_hit: Option<bool>,
}

impl TuneResult {
    /// Machine-readable summary without wall-clock fields.
    pub fn summary_json(&self, space: &Space) -> serde_json::Value {
        serde_json::json!({
            "kernel": self.plan.kernel.name,
            "backend": self.plan.backend.name,
            "mode": self.mode.name(),
            "draft": self.plan.draft_text,
            "strategy": self.plan.strategy.name(),
            "candidates": self.candidates,
            "failures": self.failures,
            "prune": self.prune.to_json(space, false),
            "cost": self.report,
        })
    }
}

fn diagnose(failures: &[(usize, String)]) -> Error {
    let mut causes: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, e) in failures {
        *causes.entry(e.as_str()).or_default() += 1;
    }
    if causes.is_empty() {
        return Error::Lowering("the search space is empty".into());
    }
    let list: Vec<String> = causes.iter().map(|(c, n)| format!("{n}x {c}")).collect();
    Error::Lowering(format!("no draft could be lowered: {}", list.join("; ")))
}

/// Pick from a ranking: by t_total, or by t_compute over the top J.
pub fn select(ranked: &[Ranked], mode: Mode, top_j: usize) -> Option<&Ranked> {
    match mode {
        Mode::ComputeCentricBaseline => {
            let mut by_compute: Vec<&Ranked> = ranked.iter().collect();
            by_compute.sort_by(|a, b| {
                a.report
                    .t_compute
                    .total_cmp(&b.report.t_compute)
                    .then(a.draft.cmp(&b.draft))
                    .then((a.strategy as u8).cmp(&(b.strategy as u8)))
            });
            by_compute.truncate(top_j.max(1));
            by_compute.into_iter().min_by(|a, b| {
                a.report
                    .t_total
                    .total_cmp(&b.report.t_total)
                    .then(a.draft.cmp(&b.draft))
                    .then((a.strategy as u8).cmp(&(b.strategy as u8)))
            })
        }
        _ => ranked.first(),
    }
}

pub fn tune(cfg: &TuneConfig) -> Result<TuneResult> {
    let b = &cfg.backend;
    let mut timing = Timing::default();
    crate::plan::check_capabilities(&cfg.kernel, b)?;
    let space = Space::new(cfg.kernel.clone());

    if cfg.mode == Mode::Predictor {
        let trained;
        let predictor = match &cfg.predictor {
            Some(p) => p.as_ref(),
            None => {
                let hyper = Hyper {
                    seed: cfg.seed,
                    ..Hyper::default()
                };
                let r = offline_train(std::slice::from_ref(&cfg.kernel), b, 0.5, &hyper)?;
                trained = Predictor::new(r.model, LookupTable::new(), cfg.seed);
                &trained
            }
        };
        let t = Instant::now();
        let p = predictor.dynamic_predict(&space, b, cfg.rules)?;
        timing.select = t.elapsed();
        let t = Instant::now();
        let plan = build_schedule_plan(&space, &p.draft, b, PlanOptions::new(p.strategy))?;
        let report = estimate_cost(&plan, b);
        timing.lower = t.elapsed();
        return Ok(TuneResult {
            mode: cfg.mode,
            plan,
            report,
            prune: PruneReport::default(),
            timing,
            candidates: p.candidates,
            failures: 0,
            table_hit: Some(p.hit),
        });
    }

    let t = Instant::now();
    let drafts = all_drafts(&space, b.groups, b.cores_per_group);
    timing.generate = t.elapsed();
    let t = Instant::now();
    let (drafts, prune_report) = prune(&space, b, drafts, cfg.rules);
    timing.prune = t.elapsed();
    let t = Instant::now();
    let outcome = exhaustive_tune(&space, &drafts, b);
    timing.lower = t.elapsed();
    let t = Instant::now();
    let best =
        select(&outcome.ranked, cfg.mode, cfg.top_j).ok_or_else(|| diagnose(&outcome.failures))?;
    let plan = build_schedule_plan(
        &space,
        &drafts[best.draft],
        b,
        PlanOptions::new(best.strategy),
    )?;
    timing.select = t.elapsed();
    Ok(TuneResult {
        mode: cfg.mode,
        report: best.report.clone(),
        plan,
        prune: prune_report,
        timing,
        candidates: outcome.ranked.len(),
        failures: outcome.failures.len(),
        table_hit: None,
    })
}

/// Lower a draft under each strategy it distinguishes and keep the cheaper plan.
pub fn best_plan_for(
    space: &Space,
    draft: &crate::schedule::TilingDraft,
    b: &BackendDescriptor,
) -> Result<(SchedulePlan, CostReport)> {
    let mut best: Option<(SchedulePlan, CostReport)> = None;
    for s in [Strategy::Expand, Strategy::Sparse] {
        let plan = build_schedule_plan(space, draft, b, PlanOptions::new(s))?;
        let matters = plan.strategy_matters;
        let r = estimate_cost(&plan, b);
        if best.as_ref().is_none_or(|(_, br)| r.t_total < br.t_total) {
            best = Some((plan, r));
        }
        if !matters {
            break;
        }
    }
    Ok(best.expect("at least one strategy was tried"))
}
