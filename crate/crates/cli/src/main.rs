mod config;
mod manifest;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use tdag_core::compgraph::{build_dag_range, validate_dag};
use tdag_core::depth_sched::{batch_depth_stats, wavefront_schedule};
use tdag_core::dnode_select::{select, sweep, sweep_greedy, write_sweep_csv, Strategy};
use tdag_core::ingest::{
    classify_active, make_batches, parse_csv_path, split_train_valid_test, write_csv, ActiveSets, BatchPlan,
    EventStream, Partition,
};
use tdag_core::synthgen::{generate_scale_free, generate_uniform};
use tdag_core::traincore::{batch_dags, evaluate, toy_six_layer, train, Checkpoint, CHECKPOINT_VERSION};

use config::{Generator, RunConfig};
use manifest::Run;

#[derive(Parser)]
#[command(name = "tdag", version, about = "Depth analysis, d-node selection and training on temporal interaction streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event log.
    Generate(Args),
    /// Longest-path table over a sweep of d-node budgets.
    Analyze(Args),
    /// Per-batch d-node selection.
    Select(Args),
    /// Per-batch wavefront schedules.
    Schedule(Args),
    /// Train, then evaluate on the test split.
    Train(Args),
    /// Six-layer scalar chain decoupled in the middle.
    Toy(Args),
    /// Evaluate a saved checkpoint on the test split.
    Eval(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Event-log CSV; a stream is generated when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// none, greedy, exact or cut-by-time.
    #[arg(long)]
    strategy: Option<String>,
    /// D-nodes per batch (parts for cut-by-time).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Args {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?),
            None => None,
        };
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("input", self.input.as_ref().map(|p| p.display().to_string())),
            ("strategy", self.strategy.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
        ];
        overrides.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        RunConfig::resolve(file.as_deref(), &overrides)
    }
}

fn load_stream(cfg: &RunConfig) -> Result<EventStream> {
    if let Some(path) = &cfg.input {
        let parsed = parse_csv_path(path).with_context(|| format!("cannot read event log {}", path.display()))?;
        if parsed.out_of_order_rows > 0 {
            eprintln!("note: {} rows were out of time order and have been sorted", parsed.out_of_order_rows);
        }
        return Ok(parsed.stream);
    }
    let spec = cfg.stream_spec();
    Ok(match cfg.generator {
        Generator::ScaleFree => generate_scale_free(&spec)?,
        Generator::Uniform => generate_uniform(&spec)?,
    })
}

struct Prepared {
    train: EventStream,
    valid: EventStream,
    test: EventStream,
    actives: ActiveSets,
    plan: BatchPlan,
}

/// Split, classify actives on the training part and cut it into batches.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let stream = load_stream(cfg)?;
    let [a, b, c] = cfg.split;
    let (train, valid, test) = split_train_valid_test(&stream, (a, b, c))?;
    let actives = classify_active(&train, cfg.user_threshold, cfg.item_threshold);
    let plan = if train.is_empty() {
        BatchPlan::single(0)
    } else {
        make_batches(&train, cfg.n_batches.min(train.len()))?
    };
    Ok(Prepared {
        train,
        valid,
        test,
        actives,
        plan,
    })
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let stream = load_stream(cfg)?;
    let mut run = Run::new(&cfg.out)?;
    let mut bytes = Vec::new();
    write_csv(&stream, &mut bytes)?;
    let path = run.write("events.csv", &bytes)?;
    println!("{} events -> {}", stream.len(), path.display());
    run.finish("generate", cfg)
}

#[derive(Serialize)]
struct BatchSummary {
    batch: usize,
    start: usize,
    end: usize,
    work: usize,
    depth: usize,
}

fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    for (i, r) in p.plan.boundaries.iter().enumerate() {
        let report = validate_dag(&build_dag_range(&p.train, &p.actives, r.clone())?);
        if !report.passed() {
            bail!("batch {i} DAG failed validation: {:?}", report.violations);
        }
    }
    let base = batch_depth_stats(&p.train, &p.actives, &p.plan)?;
    let rows = match cfg.strategy {
        Strategy::None => sweep(&p.train, &p.actives, &p.plan, Strategy::None, &[0])?,
        Strategy::Greedy => sweep_greedy(&p.train, &p.actives, &p.plan, &cfg.sweep)?,
        s => sweep(&p.train, &p.actives, &p.plan, s, &cfg.sweep)?,
    };

    let mut run = Run::new(&cfg.out)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    run.write("table5.csv", &csv)?;
    let batches: Vec<BatchSummary> = p
        .plan
        .boundaries
        .iter()
        .zip(&base.reports)
        .enumerate()
        .map(|(batch, (r, rep))| BatchSummary {
            batch,
            start: r.start,
            end: r.end,
            work: rep.work,
            depth: rep.depth,
        })
        .collect();
    run.write_json(
        "summary.json",
        &json!({
            "n_events": p.train.len(),
            "n_batches": p.plan.n_batches(),
            "active_users": p.actives.count(Partition::User),
            "active_items": p.actives.count(Partition::Item),
            "baseline_mean_depth": base.mean_depth,
            "total_work": base.total_work(),
            "batches": batches,
            "rows": rows,
        }),
    )?;
    print!("{}", String::from_utf8_lossy(&csv));
    run.finish("analyze", cfg)
}

fn cmd_select(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    let mut out = Vec::new();
    for (i, r) in p.plan.boundaries.iter().enumerate() {
        let dag = build_dag_range(&p.train, &p.actives, r.clone())?;
        let res = select(&dag, cfg.strategy, cfg.k)?;
        let export = res.export();
        out.push(json!({
            "batch": i,
            "start": r.start,
            "end": r.end,
            "n_dnodes": export.dnodes.len(),
            "depth_before": export.depth_trajectory[0],
            "depth_after": res.final_depth(),
            "dnodes": export.dnodes,
            "depth_trajectory": export.depth_trajectory,
        }));
    }
    let mut run = Run::new(&cfg.out)?;
    run.write_json(
        "selection.json",
        &json!({ "strategy": cfg.strategy.name(), "k_or_parts": cfg.k, "batches": out }),
    )?;
    println!("{} batches selected with {} (k = {})", out.len(), cfg.strategy.name(), cfg.k);
    run.finish("select", cfg)
}

fn cmd_schedule(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    let mut text = Vec::new();
    let mut steps = Vec::new();
    for (i, r) in p.plan.boundaries.iter().enumerate() {
        let dag = build_dag_range(&p.train, &p.actives, r.clone())?;
        let dag = select(&dag, cfg.strategy, cfg.k)?.dag;
        let sch = wavefront_schedule(&dag)?;
        use std::io::Write;
        writeln!(text, "# batch {i} events {}..{} steps {}", r.start, r.end, sch.step_count)?;
        sch.write_levels(&mut text)?;
        steps.push(sch.step_count);
    }
    let mut run = Run::new(&cfg.out)?;
    run.write("schedule.txt", &text)?;
    run.write_json("schedule.json", &json!({ "steps_per_batch": steps, "total_steps": steps.iter().sum::<usize>() }))?;
    println!("{} batches, {} sequential steps", steps.len(), steps.iter().sum::<usize>());
    run.finish("schedule", cfg)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let p = prepare(cfg)?;
    let dags = batch_dags(&p.train, &p.actives, &p.plan, cfg.strategy, cfg.k)?;
    let outcome = train(&p.train, &p.actives, &dags, &cfg.train_config())?;
    let history = p.train.concat(&p.valid);
    let m = evaluate(&history, &p.test, &p.actives, &outcome.model, &cfg.eval_config())?;

    let mut run = Run::new(&cfg.out)?;
    run.write_json("checkpoint.json", &Checkpoint::new(outcome.model, outcome.phis))?;
    let metrics = &outcome.metrics;
    run.write_json(
        "metrics.json",
        &json!({
            "mrr": m.mrr,
            "recall_at_10": m.recall_at_10,
            "n_test_events": m.n_events,
            "loss_curve": metrics.loss_curve,
            "ranking_curve": metrics.ranking_curve,
            "penalty_curve": metrics.penalty_curve,
            "steps_per_epoch": metrics.steps_per_epoch,
            "constraint_residual": metrics.constraint_residual,
            "n_dnodes": metrics.n_dnodes,
        }),
    )?;
    println!(
        "MRR {:.4}  Recall@10 {:.4}  residual {:.3e}  steps/epoch {:?}",
        m.mrr, m.recall_at_10, metrics.constraint_residual, metrics.steps_per_epoch
    );
    run.finish("train", cfg)
}

fn cmd_toy(cfg: &RunConfig) -> Result<()> {
    let r = toy_six_layer(&cfg.toy_config());
    let mut run = Run::new(&cfg.out)?;
    run.write_json("toy.json", &r)?;
    println!(
        "depth {} -> {}, segment lengths {:?}, |h3 - phi3| {:.2e}, |decoupled h6 - coupled h6| {:.2e}",
        r.coupled_depth, r.decoupled_depth, r.segment_lengths, r.residual, r.output_gap
    );
    run.finish("toy", cfg)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.checkpoint.as_ref().context("eval needs a checkpoint (--checkpoint)")?;
    let text = fs::read_to_string(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text).context("checkpoint is not valid JSON")?;
    if ck.version != CHECKPOINT_VERSION {
        bail!("checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})", ck.version);
    }
    let p = prepare(cfg)?;
    // actives are whatever nodes the checkpoint holds static embeddings for
    let users: Vec<u32> = ck.model.psi[0].keys().copied().collect();
    let items: Vec<u32> = ck.model.psi[1].keys().copied().collect();
    if users.iter().any(|&u| u as usize >= p.train.n_users) || items.iter().any(|&i| i as usize >= p.train.n_items) {
        bail!("checkpoint refers to nodes outside the stream");
    }
    let actives = ActiveSets::from_members(p.train.n_users, p.train.n_items, &users, &items);
    let history = p.train.concat(&p.valid);
    let m = evaluate(&history, &p.test, &actives, &ck.model, &cfg.eval_config())?;
    let mut run = Run::new(&cfg.out)?;
    run.write_json("eval.json", &m)?;
    println!("MRR {:.4}  Recall@10 {:.4}  over {} events", m.mrr, m.recall_at_10, m.n_events);
    run.finish("eval", cfg)
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let (args, run): (&Args, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Generate(a) => (a, cmd_generate),
        Command::Analyze(a) => (a, cmd_analyze),
        Command::Select(a) => (a, cmd_select),
        Command::Schedule(a) => (a, cmd_schedule),
        Command::Train(a) => (a, cmd_train),
        Command::Toy(a) => (a, cmd_toy),
        Command::Eval(a) => (a, cmd_eval),
    };
    let cfg = args.resolve()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    run(&cfg)
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
