//! `moesim`: reproducible expert-offloading experiments from one config file.
//!
//! Exit codes: 0 on success, 1 on internal errors, 2 on bad input (invalid
//! config values, unreadable or missing input files).

mod config;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use moesim_core::compress::{CompressionConfig, CompressionPlan, RetentionRegistry};
use moesim_core::metrics::affinity_report;
use moesim_core::pipeline::{
    run_ablation, simulate, simulate_hybrid, simulate_reactive, AblationRow, ExecutionPlan, SimMode, SimReport,
};
use moesim_core::predict::{
    build_dataset, evaluate_recall, mean_hot_recall, train, ExpertPredictor, MlpModel, PredictorKind,
    PredictorRegistry, RequestView,
};
use moesim_core::trace::{generate_trace, load_trace, save_trace, RoutingTrace, TraceGenConfig};

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "moesim", version, about = "Trace-driven expert offloading experiments")]
struct Cli {
    /// TOML run config; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides paths.out_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for trace generation, training and simulation
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress output
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic routing trace
    GenTrace,
    /// Select retained visual tokens for the trace
    Compress,
    /// Train the lookahead predictor on profiling requests to the trace's model
    Train,
    /// Simulate one request
    Simulate,
    /// Run the four-row mechanism ablation
    Ablate,
    /// Aggregate runs, recall and affinity diagnostics
    Report,
    /// Print the default config
    Defaults,
}

struct Ctx {
    cfg: RunConfig,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let dir = &self.cfg.paths.out_dir;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = self.cfg.out(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(&self.cfg.paths.out_dir)?;
        let path = self.cfg.out(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.note(format!("wrote {}", path.display()));
        Ok(())
    }

    fn trace(&self) -> Result<RoutingTrace> {
        let path = self.cfg.trace_path();
        load_trace(&path).with_context(|| format!("loading trace {}", path.display()))
    }

    fn plan(&self) -> Result<CompressionPlan> {
        read_json(&self.cfg.plan_path())
    }

    fn exec(&self, trace: &RoutingTrace) -> Result<ExecutionPlan> {
        Ok(ExecutionPlan::new(trace, &self.cfg.sim)?)
    }

    /// The compression config with an empty prefix filled in from the plan.
    fn compression(&self, exec: &ExecutionPlan) -> CompressionConfig {
        let mut c = self.cfg.compression.clone();
        if c.prefix_layers.is_empty() {
            c.prefix_layers = exec.prefix_layers();
        }
        c
    }

    fn retain(&self, trace: &RoutingTrace, exec: &ExecutionPlan) -> Result<CompressionPlan> {
        let policy =
            RetentionRegistry::default().build(&self.cfg.retention, &self.compression(exec), self.cfg.trace.seed)?;
        Ok(policy.retain(trace)?)
    }

    fn predictor(&self) -> Result<Box<dyn ExpertPredictor>> {
        let spec = &self.cfg.sim.predictor;
        let model = match spec.kind {
            PredictorKind::Mlp => {
                let path = self.cfg.model_path();
                Some(MlpModel::load(&path).with_context(|| format!("loading model {}", path.display()))?)
            }
            _ => None,
        };
        Ok(PredictorRegistry::default().build(spec, model.as_ref())?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_trace(ctx: &Ctx) -> Result<()> {
    let trace = generate_trace(&ctx.cfg.trace)?;
    let path = ctx.cfg.out("trace.jsonl");
    fs::create_dir_all(&ctx.cfg.paths.out_dir)?;
    save_trace(&trace, &path)?;
    ctx.note(format!(
        "wrote {}: L={} E={} k={} shared={} tokens={}",
        path.display(),
        trace.num_layers,
        trace.num_experts,
        trace.top_k,
        trace.shared_experts,
        trace.num_tokens()
    ));
    Ok(())
}

fn compress(ctx: &Ctx) -> Result<()> {
    let trace = ctx.trace()?;
    let exec = ctx.exec(&trace)?;
    let plan = ctx.retain(&trace, &exec)?;
    ctx.note(format!(
        "kept {} of {} visual tokens ({} core)",
        plan.keep.len(),
        plan.visual.len(),
        plan.core.len()
    ));
    ctx.write("plan.json", &plan.to_json()?)
}

fn train_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    // Profiling requests share the cluster structure of the evaluated trace
    // and differ in their tokens.
    let model_seed = cfg.trace.model_seed.unwrap_or(cfg.trace.seed);
    let mut data = Vec::new();
    for i in 0..cfg.profiling_requests as u64 {
        let tcfg = TraceGenConfig {
            seed: cfg.trace.seed.wrapping_add(1 + i).wrapping_mul(0x9e37_79b9),
            model_seed: Some(model_seed),
            ..cfg.trace.clone()
        };
        let trace = generate_trace(&tcfg)?;
        let exec = ctx.exec(&trace)?;
        let plan = ctx.retain(&trace, &exec)?;
        let view = RequestView::new(&trace, &plan);
        data.extend(build_dataset(&view, &view.phases(), exec.l_pinned, &cfg.train)?);
    }
    ctx.note(format!(
        "training on {} examples from {} requests",
        data.len(),
        cfg.profiling_requests
    ));
    let (model, report) = train(&data, &cfg.train)?;
    ctx.note(format!(
        "loss {:.4} -> {:.4} over {} steps",
        report.initial_loss, report.final_loss, report.steps
    ));
    fs::create_dir_all(&cfg.paths.out_dir)?;
    let path = cfg.out("model.json");
    model.save(&path)?;
    ctx.note(format!("wrote {}", path.display()));
    ctx.write("train_report.json", &serde_json::to_string_pretty(&report)?)
}

fn run_simulation(ctx: &Ctx, trace: &RoutingTrace, exec: &ExecutionPlan, plan: &CompressionPlan) -> Result<SimReport> {
    let sim = &ctx.cfg.sim;
    let report = match sim.mode {
        SimMode::Reactive if sim.hybrid() => simulate_hybrid(trace, exec, plan, None, sim, sim.hybrid_threshold)?,
        SimMode::Reactive => simulate_reactive(trace, exec, plan, sim)?,
        SimMode::Prefetch => {
            let predictor = ctx.predictor()?;
            if sim.hybrid() {
                simulate_hybrid(trace, exec, plan, Some(predictor.as_ref()), sim, sim.hybrid_threshold)?
            } else {
                simulate(trace, exec, plan, predictor.as_ref(), sim)?
            }
        }
    };
    Ok(report)
}

fn simulate_cmd(ctx: &Ctx) -> Result<()> {
    let trace = ctx.trace()?;
    let plan = ctx.plan()?;
    let exec = ctx.exec(&trace)?;
    let report = run_simulation(ctx, &trace, &exec, &plan)?;
    ctx.note(format!(
        "makespan {:.2} ms, hit rate {:.3}, {} stalls",
        report.makespan, report.hit_rate, report.stalls
    ));
    ctx.write("report.json", &report.to_json()?)?;
    SimReport::write_csv([("simulate", &report)], ctx.create("report.csv")?)?;
    report.write_timeline(ctx.create("timeline.csv")?)?;
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let trace = ctx.trace()?;
    let plan = ctx.plan()?;
    let exec = ctx.exec(&trace)?;
    let predictor = ctx.predictor()?;
    let rows = run_ablation(&trace, &exec, &plan, predictor.as_ref(), &ctx.cfg.sim)?;
    for row in &rows {
        ctx.note(format!("{:<13} {:>10.2} ms", row.name, row.report.makespan));
    }
    ctx.write("ablation.json", &serde_json::to_string_pretty(&rows)?)?;
    SimReport::write_csv(
        rows.iter().map(|r| (r.name.as_str(), &r.report)),
        ctx.create("ablation.csv")?,
    )?;
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let trace = ctx.trace()?;
    let plan = ctx.plan()?;
    let exec = ctx.exec(&trace)?;

    let mut runs: Vec<(String, SimReport)> = Vec::new();
    let single = cfg.out("report.json");
    if single.exists() {
        runs.push(("simulate".to_string(), read_json(&single)?));
    }
    let ablation = cfg.out("ablation.json");
    if ablation.exists() {
        let rows: Vec<AblationRow> = read_json(&ablation)?;
        runs.extend(rows.into_iter().map(|r| (r.name, r.report)));
    }
    SimReport::write_csv(runs.iter().map(|(l, r)| (l.as_str(), r)), ctx.create("runs.csv")?)?;

    let predictor = ctx.predictor()?;
    let view = RequestView::new(&trace, &plan);
    let spec = &cfg.sim.predictor;
    let recall = evaluate_recall(
        predictor.as_ref(),
        &view,
        &view.phases(),
        exec.l_pinned,
        spec.top_b,
        spec.window,
    )?;
    let mut w = csv::Writer::from_writer(ctx.create("recall.csv")?);
    for row in &recall {
        w.serialize(row)?;
    }
    w.flush()?;

    let raw = affinity_report(&trace, &trace.prefill_indices(), cfg.coverage_k)?;
    let kept = affinity_report(&trace, &plan.retained(), cfg.coverage_k)?;
    raw.write_csv(ctx.create("affinity_raw.csv")?)?;
    kept.write_csv(ctx.create("affinity_compressed.csv")?)?;

    let mut md = String::new();
    writeln!(md, "# Run summary\n")?;
    writeln!(
        md,
        "Trace: L={} E={} k={}, {} prompt tokens, {} decode steps. Pinned prefix: {} layers.\n",
        trace.num_layers,
        trace.num_experts,
        trace.top_k,
        trace.prefill_len(),
        trace.decode_steps(),
        exec.l_pinned
    )?;
    if !runs.is_empty() {
        writeln!(
            md,
            "| run | makespan ms | prefill ms | decode ms/step | hit rate | stalls |"
        )?;
        writeln!(md, "|---|---:|---:|---:|---:|---:|")?;
        for (label, r) in &runs {
            writeln!(
                md,
                "| {label} | {:.2} | {:.2} | {:.2} | {:.3} | {} |",
                r.makespan,
                r.prefill_ms,
                r.decode_ms_mean(),
                r.hit_rate,
                r.stalls
            )?;
        }
        writeln!(md)?;
    }
    writeln!(
        md,
        "Hot recall of the {} predictor at B={}: mean {:.3} over layers {}..{} (per layer in recall.csv).\n",
        predictor.name(),
        spec.top_b,
        mean_hot_recall(&recall),
        exec.l_pinned,
        trace.num_layers.saturating_sub(1)
    )?;
    writeln!(
        md,
        "| subset | tokens | working set | inactive experts | top-{} coverage | inter-layer similarity |",
        cfg.coverage_k
    )?;
    writeln!(md, "|---|---:|---:|---:|---:|---:|")?;
    for (name, a) in [("full prompt", &raw), ("retained", &kept)] {
        writeln!(
            md,
            "| {name} | {} | {:.2} | {:.2} | {:.3} | {:.3} |",
            a.subset_size,
            a.mean_working_set,
            a.mean_inactive_experts,
            a.mean_topk_coverage,
            a.mean_interlayer_similarity
        )?;
    }
    ctx.write("summary.md", &md)
}

fn defaults() -> Result<()> {
    print!("{}", RunConfig::default().to_toml()?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Defaults = cli.command {
        return defaults();
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        cfg: cfg.resolve(cli.seed, cli.out),
        quiet: cli.quiet,
    };
    match cli.command {
        Command::GenTrace => gen_trace(&ctx),
        Command::Compress => compress(&ctx),
        Command::Train => train_cmd(&ctx),
        Command::Simulate => simulate_cmd(&ctx),
        Command::Ablate => ablate(&ctx),
        Command::Report => report(&ctx),
        Command::Defaults => unreachable!(),
    }
}

/// 2 when any cause in the chain is bad input, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<moesim_core::Error>() {
            return match e {
                moesim_core::Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                other => other.is_input_error(),
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io.kind() == std::io::ErrorKind::NotFound;
        }
        cause.is::<ConfigError>() || cause.is::<serde_json::Error>()
    });
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
