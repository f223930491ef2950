use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use pimdcc::driver::{tune, Mode, TuneConfig, DEFAULT_TOP_J};
use pimdcc::ir::{builtin, parse_kernel, reference_execute, Kernel, BUILTIN_NAMES};
use pimdcc::plan::{build_schedule_plan, PlanOptions, SchedulePlan};
use pimdcc::predictor::{offline_train, GbtModel, Hyper, LookupTable, Predictor};
use pimdcc::prune::PruneOptions;
use pimdcc::schedule::Space;
use pimdcc::sim::{estimate_cost, functional_execute, CostReport};
use pimdcc::tensor::{decode_any, encode_text, max_rel_error, random_inputs};
use pimdcc::tile::Strategy;
use pimdcc::{resolve_backend, BackendDescriptor};

#[derive(Parser)]
#[command(
    name = "pimdcc",
    version,
    about = "Data-centric kernel compiler for simulated PIM backends"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search the draft space and write the best plan.
    Tune(TuneArgs),
    /// Lower one draft (or the best one) to a plan file.
    Compile(CompileArgs),
    /// Execute a plan functionally and report its modeled cost.
    Simulate(SimulateArgs),
    /// Train the predictor and fill its lookup table.
    TrainPredictor(TrainArgs),
    /// Tabulate compute/rearrangement breakdowns of report files.
    Report(ReportArgs),
    /// Walk through the worked example stage by stage.
    Demo(DemoArgs),
}

#[derive(Args)]
struct KernelArgs {
    /// Builtin name (gemv, red, va, relu, attn) or a kernel source file.
    #[arg(long)]
    kernel: String,
    /// Comma-separated extents for builtins, e.g. 1,128,4096.
    #[arg(long)]
    extents: Option<String>,
    /// Preset name, name in $PIMDCC_BACKEND_DIR, or JSON file.
    #[arg(long)]
    backend: String,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    k: KernelArgs,
    #[arg(long, default_value = "exhaustive")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drafts the compute-centric baseline keeps.
    #[arg(long, default_value_t = DEFAULT_TOP_J)]
    top_j: usize,
    #[arg(long)]
    no_prune: bool,
    /// Predictor model file (predictor mode).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Lookup table file, read and updated in predictor mode.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Output directory for plan.json and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    k: KernelArgs,
    /// Draft to lower, e.g. [[2,2,A0^b],[1,1,A1^i],[1,1,B1^k]]; default is the tuned best.
    #[arg(long)]
    draft: Option<String>,
    #[arg(long, default_value = "expand")]
    strategy: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-core layout dump.
    #[arg(long)]
    emit_layout: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Tensor file (text or binary); random inputs when absent.
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    check_against_reference: bool,
    /// Output directory for outputs.txt and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated builtin names.
    #[arg(long)]
    kernels: String,
    /// `name=e,e;e,e` per kernel; the name may be omitted with one kernel.
    #[arg(long = "extents-grid", required = true)]
    extents_grid: Vec<String>,
    #[arg(long)]
    backend: String,
    /// Fraction of each stratum used for training.
    #[arg(long, default_value_t = 0.3)]
    sample: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long)]
    table_out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Machine-readable table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine-readable record of every stage.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when a simulated plan disagrees with the reference interpreter.
#[derive(Debug)]
struct Mismatch(f64);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} exceeds 1e-5: plan disagrees with the reference",
            self.0
        )
    }
}

impl std::error::Error for Mismatch {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match cli.cmd {
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::TrainPredictor(a) => cmd_train(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Demo(a) => cmd_demo(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Mismatch>().is_some() {
        return 2;
    }
    match e.downcast_ref::<pimdcc::Error>() {
        Some(pe) if pe.is_internal() => 2,
        _ => 1,
    }
}

fn parse_extents(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad extent `{x}` in `{s}`"))
        })
        .collect()
}

fn load_kernel(name: &str, extents: Option<&str>) -> anyhow::Result<Kernel> {
    if BUILTIN_NAMES.contains(&name) {
        let ext = extents.ok_or_else(|| anyhow!("builtin kernel `{name}` needs --extents"))?;
        return Ok(builtin(name, &parse_extents(ext)?)?);
    }
    let path = Path::new(name);
    if !path.is_file() {
        bail!(
            "`{name}` is neither a builtin kernel ({}) nor a file",
            BUILTIN_NAMES.join(", ")
        );
    }
    if extents.is_some() {
        bail!("--extents applies to builtin kernels only; source files carry their own extents");
    }
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_kernel(&src).with_context(|| format!("parsing {}", path.display()))
}

fn load_inputs(a: &KernelArgs) -> anyhow::Result<(Kernel, BackendDescriptor)> {
    let backend = resolve_backend(&a.backend)?;
    let kernel = load_kernel(&a.kernel, a.extents.as_deref())?;
    Ok((kernel, backend))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn report_json(label: &str, plan: &SchedulePlan, cost: &CostReport) -> Value {
    json!({
        "label": label,
        "kernel": plan.kernel.name,
        "extents": plan.kernel.vars.iter().map(|v| v.extent).collect::<Vec<_>>(),
        "backend": plan.backend.name,
        "draft": plan.draft_text,
        "strategy": plan.strategy.name(),
        "cost": cost,
    })
}

fn cmd_tune(a: TuneArgs) -> anyhow::Result<()> {
    let (kernel, backend) = load_inputs(&a.k)?;
    let mode: Mode = a.mode.parse()?;
    let mut cfg = TuneConfig::new(kernel, backend, mode);
    cfg.seed = a.seed;
    cfg.top_j = a.top_j;
    if a.no_prune {
        cfg.rules = PruneOptions::none();
    }
    if mode == Mode::Predictor {
        let Some(model_path) = &a.model else {
            bail!("--mode predictor needs --model (train one with train-predictor)");
        };
        let bytes =
            fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
        let model = GbtModel::from_bytes(&bytes)?;
        let table = match &a.table {
            Some(p) if p.is_file() => LookupTable::from_json(&fs::read_to_string(p)?)?,
            _ => LookupTable::new(),
        };
        cfg.predictor = Some(Arc::new(Predictor::new(model, table, a.seed)));
    }
    let r = tune(&cfg)?;
    let space = Space::new(cfg.kernel.clone());
    println!(
        "best t_total={:.1} draft={} strategy={} mode={}",
        r.report.t_total,
        r.plan.draft_text,
        r.plan.strategy.name(),
        mode
    );
    let t = r.timing;
    eprintln!(
        "candidates {} failures {} | generate {:?} prune {:?} lower {:?} select {:?}{}",
        r.candidates,
        r.failures,
        t.generate,
        t.prune,
        t.lower,
        t.select,
        match r.table_hit {
            Some(true) => " | table hit",
            Some(false) => " | table miss",
            None => "",
        }
    );
    if let (Some(p), Some(pred)) = (&a.table, &cfg.predictor) {
        write(p, &pred.table().to_json())?;
    }
    if let Some(dir) = &a.out {
        write(&dir.join("plan.json"), &r.plan.to_json())?;
        let mut rep = report_json(mode.name(), &r.plan, &r.report);
        rep["search"] = r.summary_json(&space);
        write(&dir.join("report.json"), &to_pretty(&rep))?;
    }
    Ok(())
}

fn cmd_compile(a: CompileArgs) -> anyhow::Result<()> {
    let (kernel, backend) = load_inputs(&a.k)?;
    let strategy = match a.strategy.as_str() {
        "expand" => Strategy::Expand,
        "sparse" => Strategy::Sparse,
        s => bail!("unknown strategy `{s}` (expected expand or sparse)"),
    };
    let plan = match &a.draft {
        Some(text) => {
            let space = Space::new(kernel);
            let draft = space
                .parse_draft(text)
                .ok_or_else(|| anyhow!("`{text}` is not a draft of this kernel"))?;
            if draft.total_groups() > backend.groups
                || draft.cores_per_group() > backend.cores_per_group
            {
                bail!(
                    "draft uses {} groups x {} cores, backend has {} x {}",
                    draft.total_groups(),
                    draft.cores_per_group(),
                    backend.groups,
                    backend.cores_per_group
                );
            }
            build_schedule_plan(&space, &draft, &backend, PlanOptions::new(strategy))?
        }
        None => tune(&TuneConfig::new(kernel, backend.clone(), Mode::Exhaustive))?.plan,
    };
    let cost = estimate_cost(&plan, &backend);
    write(&a.out, &plan.to_json())?;
    if let Some(p) = &a.emit_layout {
        write(p, &to_pretty(&plan.layout_json()))?;
    }
    println!(
        "compiled draft={} strategy={} t_total={:.1}",
        plan.draft_text,
        plan.strategy.name(),
        cost.t_total
    );
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan = SchedulePlan::from_json(&text)?;
    let inputs = match &a.inputs {
        Some(p) => decode_any(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => random_inputs(&plan.kernel, a.seed),
    };
    let outputs = functional_execute(&plan, &inputs)?;
    let cost = estimate_cost(&plan, &plan.backend);
    println!(
        "t_input_rearrange {:.1}\nt_compute {:.1}\nt_output_rearrange {:.1}\nt_total {:.1}",
        cost.t_input_rearrange, cost.t_compute, cost.t_output_rearrange, cost.t_total
    );
    let mut rep = report_json("simulate", &plan, &cost);
    let mut failure = None;
    if a.check_against_reference {
        let want = reference_execute(&plan.kernel, &inputs)?;
        let err = max_rel_error(&outputs, &want)?;
        rep["max_rel_err"] = json!(err);
        if err <= 1e-5 {
            println!("max rel err {err:.3e} <= 1e-5");
        } else {
            failure = Some(Mismatch(err));
        }
    }
    if let Some(dir) = &a.out {
        write(&dir.join("outputs.txt"), &encode_text(&outputs))?;
        write(&dir.join("report.json"), &to_pretty(&rep))?;
    }
    match failure {
        Some(m) => Err(m.into()),
        None => Ok(()),
    }
}

fn parse_grid(kernels: &[&str], grid: &[String]) -> anyhow::Result<Vec<Kernel>> {
    let mut out = Vec::new();
    let mut seen = vec![false; kernels.len()];
    for g in grid {
        let (name, rest) = match g.split_once('=') {
            Some((n, r)) => (n.trim(), r),
            None if kernels.len() == 1 => (kernels[0], g.as_str()),
            None => bail!(
                "--extents-grid `{g}` must be `kernel=extents;...` when several kernels are given"
            ),
        };
        let Some(i) = kernels.iter().position(|k| *k == name) else {
            bail!("--extents-grid names `{name}`, which is not in --kernels");
        };
        seen[i] = true;
        for ext in rest.split(';').filter(|s| !s.trim().is_empty()) {
            out.push(builtin(name, &parse_extents(ext)?)?);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        bail!("kernel `{}` has no --extents-grid entry", kernels[i]);
    }
    Ok(out)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let backend = resolve_backend(&a.backend)?;
    let names: Vec<&str> = a
        .kernels
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("--kernels is empty");
    }
    let kernels = parse_grid(&names, &a.extents_grid)?;
    let hyper = Hyper {
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..Hyper::default()
    };
    let start = Instant::now();
    let r = offline_train(&kernels, &backend, a.sample, &hyper)?;
    fs::write(&a.model_out, r.model.to_bytes())
        .with_context(|| format!("writing {}", a.model_out.display()))?;
    write(&a.table_out, &r.table.to_json())?;
    println!(
        "trained on {} of {} candidates across {} configurations, rmse {:.4} (log cycles)",
        r.samples,
        r.candidates,
        kernels.len(),
        r.train_rmse
    );
    println!("wall-clock {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

struct Row {
    label: String,
    backend: String,
    cost: CostReport,
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let v: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let cost: CostReport =
            serde_json::from_value(v.get("cost").cloned().unwrap_or(Value::Null))
                .with_context(|| format!("{} has no cost report", p.display()))?;
        let label = v
            .get("label")
            .and_then(Value::as_str)
            .map(String::from)
            .unwrap_or_else(|| p.display().to_string());
        let label = match v.get("kernel").and_then(Value::as_str) {
            Some(k) => {
                let ext = v.get("extents").map(|e| e.to_string()).unwrap_or_default();
                format!("{label} {k}{ext}")
            }
            None => label,
        };
        let backend = v
            .get("backend")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        rows.push(Row {
            label,
            backend,
            cost,
        });
    }
    let mixed = rows.iter().any(|r| r.backend != rows[0].backend);
    let base = rows[0].cost.t_total;
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    println!(
        "{:<width$}  {:>8} {:>8} {:>8} {:>14} {:>8}",
        "input", "in%", "compute%", "out%", "t_total", "speedup"
    );
    let mut table = Vec::new();
    for r in &rows {
        let t = r.cost.t_total;
        let share = |x: f64| if t > 0.0 { 100.0 * x / t } else { 0.0 };
        let speedup = if t > 0.0 { base / t } else { 0.0 };
        let line = format!(
            "{:<width$}  {:>8.1} {:>8.1} {:>8.1} {:>14.1}",
            r.label,
            share(r.cost.t_input_rearrange),
            share(r.cost.t_compute),
            share(r.cost.t_output_rearrange),
            t
        );
        if rows.len() > 1 {
            println!("{line} {speedup:>7.3}x");
        } else {
            println!("{line}");
        }
        table.push(json!({
            "label": r.label,
            "backend": r.backend,
            "input_share": share(r.cost.t_input_rearrange) / 100.0,
            "compute_share": share(r.cost.t_compute) / 100.0,
            "output_share": share(r.cost.t_output_rearrange) / 100.0,
            "t_total": t,
            "speedup": (rows.len() > 1).then_some(speedup),
        }));
    }
    if mixed {
        println!("warning: reports come from different backends");
    }
    if let Some(p) = &a.out {
        write(
            p,
            &to_pretty(&json!({ "mixed_backends": mixed, "rows": table })),
        )?;
    }
    Ok(())
}

fn cmd_demo(a: DemoArgs) -> anyhow::Result<()> {
    let (text, record) = pimdcc::demo::fig4_walkthrough(a.seed)?;
    print!("{text}");
    if let Some(p) = &a.out {
        write(p, &to_pretty(&record))?;
    }
    Ok(())
}
