//! Command-line front end. Exit status is 0 on success, 2 when there is no
//! feasible plan (or the given strategy is infeasible), and 1 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::{Axis, BandwidthProfile, Collective};
use crate::config::{load_config, Overrides, RunConfig};
use crate::cost::{memory, Estimator, OverlapModel};
use crate::error::{Error, Result};
use crate::mempool::{run as run_pool, synthesize_trace, PoolPolicy};
use crate::model::Preset;
use crate::overlap::{
    compare_to_analytic, simulate_backward, simulate_forward, stage_workloads, strategy_link,
    BackwardPolicy, ForwardPolicy, LayerWorkload, Link, SimSettings, Timeline,
};
use crate::report::{
    breakdown_csv, render_estimate, render_mempool, render_overlap, render_plan_report,
    render_verdict, EstimateRecord, Format, MempoolRecord, OverlapRecord, SCHEMA_VERSION,
};
use crate::search::{explain, search};
use crate::strategy::{validate, Strategy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "longseq-plan", version, about = "Plan parallelism and sharding for long-sequence transformer training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for the fastest feasible strategies.
    Plan(PlanArgs),
    /// Estimate memory and step time of one strategy.
    Estimate(EstimateArgs),
    /// Check one strategy against the feasibility constraints.
    Validate(StrategyCommand),
    /// Simulate gather/reduce-scatter overlap for one pipeline stage.
    SimulateOverlap(OverlapArgs),
    /// Replay a synthesized allocation trace on a caching allocator.
    SimulateMempool(MempoolArgs),
    /// Validate a bandwidth profile and print its interpolated curves.
    ProfileCheck(ProfileCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Built-in model (7b, 13b, 30b, 65b); overrides the file's model.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seq_len: Option<u64>,
    /// Global batch in tokens.
    #[arg(long)]
    pub global_batch: Option<u64>,
    /// Bandwidth profile CSV; overrides the file's path.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self, extra: Overrides) -> Result<RunConfig> {
        let o = Overrides {
            preset: self.preset,
            seq_len: self.seq_len,
            global_batch: self.global_batch,
            bandwidth_profile: self.profile.clone(),
            ..extra
        };
        load_config(&self.config, &o)
    }
}

impl clap::builder::ValueParserFactory for Preset {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Preset>())
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Multiplier on GPU memory capacity for the memory gate.
    #[arg(long)]
    pub memory_slack: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also print the rationale for the plan at this rank.
    #[arg(long)]
    pub explain: Option<usize>,
    /// Evaluate on one thread.
    #[arg(long)]
    pub sequential: bool,
}

/// Strategy components; `s_dp` and `n` are derived when omitted.
#[derive(Debug, Args, Clone)]
pub struct StrategyArgs {
    #[arg(long, default_value_t = 1)]
    pub micro_batch: u64,
    #[arg(long)]
    pub micro_batches: Option<u64>,
    /// Enable activation recomputation.
    #[arg(long)]
    pub recompute: bool,
    #[arg(long, default_value_t = 1)]
    pub pp: u64,
    #[arg(long)]
    pub dp: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub tp: u64,
    #[arg(long, default_value_t = 1)]
    pub sp: u64,
    #[arg(long, default_value_t = 1)]
    pub ps: u64,
    #[arg(long, default_value_t = 1)]
    pub gs: u64,
    #[arg(long, default_value_t = 1)]
    pub oss: u64,
}

impl StrategyArgs {
    pub fn resolve(&self, cfg: &RunConfig) -> Strategy {
        let dp = self
            .dp
            .unwrap_or_else(|| cfg.cluster.total_gpus / (self.pp * self.sp).max(1));
        let per_micro_batch = self.micro_batch * cfg.model.seq_len * dp;
        let n = self.micro_batches.unwrap_or_else(|| {
            if per_micro_batch > 0 && cfg.model.global_batch.is_multiple_of(per_micro_batch) {
                cfg.model.global_batch / per_micro_batch
            } else {
                0
            }
        });
        Strategy {
            micro_batch: self.micro_batch,
            micro_batches: n,
            recompute: self.recompute,
            pp: self.pp,
            dp,
            tp: self.tp,
            sp: self.sp,
            ps: self.ps,
            gs: self.gs,
            oss: self.oss,
        }
    }
}

#[derive(Debug, Args)]
pub struct StrategyCommand {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write memory and communication bar-chart data as CSV.
    #[arg(long)]
    pub emit_breakdown: Option<PathBuf>,
    #[arg(long)]
    pub memory_slack: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    /// Derive the workload from a config and strategy instead of the
    /// synthetic flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seq_len: Option<u64>,
    #[arg(long)]
    pub global_batch: Option<u64>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// Synthetic workload: number of layers.
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 10.0)]
    pub forward_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    pub gather_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    pub reduce_scatter_ms: f64,
    /// Backward compute as a multiple of forward.
    #[arg(long, default_value_t = 2.0)]
    pub backward_ratio: f64,
    /// Fixed latency before every event starts.
    #[arg(long, default_value_t = 0.0)]
    pub issue_delay_ms: f64,
    /// Slowdown ratio used in the analytic comparison.
    #[arg(long)]
    pub slowdown_ratio: Option<f64>,
    /// Layers per group in the analytic comparison.
    #[arg(long, default_value_t = 1)]
    pub group_layers: usize,
    /// Write every simulated event as CSV.
    #[arg(long)]
    pub emit_timeline: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct MempoolArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// Route comm buffers to two dedicated rotating segments.
    #[arg(long)]
    pub pinned_comm_pool: bool,
    /// Pack every K MLP outputs into one fresh segment (0 disables).
    #[arg(long, default_value_t = 0)]
    pub consolidate_every: u64,
    /// Reserve all gradients in one segment up front.
    #[arg(long)]
    pub grad_premap: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ProfileCheckArgs {
    /// Bandwidth profile CSV; the synthetic A100 profile when omitted.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_ERROR,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Plan(a) => plan(a, out, err),
        Command::Estimate(a) => estimate(a, out),
        Command::Validate(a) => validate_cmd(a, out),
        Command::SimulateOverlap(a) => simulate_overlap(a, out),
        Command::SimulateMempool(a) => simulate_mempool(a, out),
        Command::ProfileCheck(a) => profile_check(a, out),
    }
}

fn plan(a: PlanArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load(Overrides { top_k: a.top_k, memory_slack: a.memory_slack, ..Overrides::default() })?;
    let mut opts = cfg.search;
    opts.parallel = !a.sequential;
    let report = search(&cfg.model, &cfg.cluster, &cfg.profile, &cfg.compute, &opts)?;
    out.write_all(render_plan_report(&report, a.format)?.as_bytes())?;
    if let Some(rank) = a.explain {
        let text = explain(&report, rank)?;
        if a.format == Format::Records {
            err.write_all(text.as_bytes())?;
        } else {
            out.write_all(text.as_bytes())?;
        }
    }
    if report.is_empty() {
        if a.format == Format::Records {
            writeln!(err, "no feasible plan")?;
        }
        return Ok(EXIT_INFEASIBLE);
    }
    Ok(EXIT_OK)
}

fn estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load(Overrides { memory_slack: a.memory_slack, ..Overrides::default() })?;
    let s = a.strategy.resolve(&cfg);
    let est = Estimator::new(&cfg.model, &cfg.cluster, &cfg.profile, &cfg.compute, cfg.settings);
    let cost = est.step_time(&s)?;
    let record = EstimateRecord {
        schema_version: SCHEMA_VERSION,
        strategy: s,
        fits_memory: cost.mem_total() <= cfg.cluster.gpu_memory_capacity as f64 * cfg.search.memory_slack,
        cost,
        placement: est.placement(&s),
        throughput: est.throughput(&cost),
    };
    out.write_all(render_estimate(&record, a.format)?.as_bytes())?;
    if let Some(path) = a.emit_breakdown {
        breakdown_csv(&cost, std::fs::File::create(path)?)?;
    }
    Ok(if record.fits_memory { EXIT_OK } else { EXIT_INFEASIBLE })
}

fn validate_cmd(a: StrategyCommand, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load(Overrides::default())?;
    let s = a.strategy.resolve(&cfg);
    let verdict = validate(&s, &cfg.model, &cfg.cluster);
    out.write_all(render_verdict(&s, &verdict).as_bytes())?;
    if verdict.is_feasible() {
        let m = memory(&s, &cfg.model);
        writeln!(
            out,
            "memory {:.3} GiB of {:.3} GiB",
            m.total() / (1u64 << 30) as f64,
            cfg.cluster.gpu_memory_capacity as f64 / (1u64 << 30) as f64
        )?;
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_INFEASIBLE)
    }
}

fn write_timelines(path: &Path, runs: &[(&str, &str, &Timeline)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pass", "policy", "stream", "kind", "layer", "start", "end"])?;
    for (pass, policy, t) in runs {
        for e in &t.events {
            let stream = serde_json::to_value(e.stream)?;
            let kind = serde_json::to_value(e.kind)?;
            w.write_record([
                pass.to_string(),
                policy.to_string(),
                stream.as_str().unwrap_or_default().to_string(),
                kind.as_str().unwrap_or_default().to_string(),
                e.layer.to_string(),
                e.start.to_string(),
                e.end.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn simulate_overlap(a: OverlapArgs, out: &mut dyn Write) -> Result<i32> {
    let settings = SimSettings { issue_delay: a.issue_delay_ms * 1e-3 };
    let mut overlap = OverlapModel::default();
    let loaded;
    let (workloads, link) = match &a.config {
        Some(path) => {
            let o = Overrides {
                preset: a.preset,
                seq_len: a.seq_len,
                global_batch: a.global_batch,
                bandwidth_profile: a.profile.clone(),
                slowdown_ratio: a.slowdown_ratio,
                ..Overrides::default()
            };
            loaded = load_config(path, &o)?;
            overlap = loaded.settings.overlap;
            let s = a.strategy.resolve(&loaded);
            let verdict = validate(&s, &loaded.model, &loaded.cluster);
            if !verdict.is_feasible() {
                return Err(Error::InfeasibleStrategy(verdict.messages()));
            }
            let w = stage_workloads(&s, &loaded.model, &loaded.compute)?;
            (w, strategy_link(&s, &loaded.cluster, &loaded.profile))
        }
        None => {
            if let Some(r) = a.slowdown_ratio {
                overlap = OverlapModel::new(r)?;
            }
            if a.layers == 0 {
                return Err(Error::Validation(vec!["--layers must be at least 1".into()]));
            }
            // bytes are milliseconds at 1000 bytes per second
            let w = LayerWorkload {
                forward: a.forward_ms * 1e-3,
                grad_input: a.forward_ms * a.backward_ratio / 2.0 * 1e-3,
                grad_weight: a.forward_ms * a.backward_ratio / 2.0 * 1e-3,
                gather_bytes: a.gather_ms,
                reduce_scatter_bytes: a.reduce_scatter_ms,
            };
            (vec![w; a.layers], Link::Constant(1e3))
        }
    };
    let naive = simulate_forward(&workloads, ForwardPolicy::Naive, link, settings)?;
    let prefetch = simulate_forward(&workloads, ForwardPolicy::InterLayerPrefetch, link, settings)?;
    let fused = simulate_backward(&workloads, BackwardPolicy::Fused, link, settings)?;
    let selective = simulate_backward(&workloads, BackwardPolicy::Selective, link, settings)?;
    let runs = [
        ("forward", "naive", &naive),
        ("forward", "inter_layer_prefetch", &prefetch),
        ("backward", "fused", &fused),
        ("backward", "selective", &selective),
    ];
    let records: Vec<_> = runs
        .iter()
        .map(|(pass, policy, t)| {
            OverlapRecord::new(pass, policy, t, compare_to_analytic(t, &overlap, a.group_layers))
        })
        .collect();
    out.write_all(render_overlap(&records, a.format)?.as_bytes())?;
    if let Some(path) = &a.emit_timeline {
        write_timelines(path, &runs)?;
    }
    Ok(EXIT_OK)
}

fn simulate_mempool(a: MempoolArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.load(Overrides::default())?;
    let mut s = a.strategy.resolve(&cfg);
    s.recompute = true;
    let verdict = validate(&s, &cfg.model, &cfg.cluster);
    if !verdict.is_feasible() {
        return Err(Error::InfeasibleStrategy(verdict.messages()));
    }
    let trace = synthesize_trace(&cfg.model, &s)?;
    let capacity = Some(cfg.cluster.gpu_memory_capacity);
    let mut records = vec![MempoolRecord::new("best-fit", &run_pool(&trace, PoolPolicy::NONE, capacity)?)];
    let policy = PoolPolicy {
        pinned_comm_pool: a.pinned_comm_pool,
        consolidate_every_k_mlp: a.consolidate_every,
        grad_premap: a.grad_premap,
    };
    if policy != PoolPolicy::NONE {
        let mut label = Vec::new();
        if policy.pinned_comm_pool {
            label.push("pinned".to_string());
        }
        if policy.consolidate_every_k_mlp > 0 {
            label.push(format!("consolidate-{}", policy.consolidate_every_k_mlp));
        }
        if policy.grad_premap {
            label.push("grad-premap".to_string());
        }
        records.push(MempoolRecord::new(&label.join("+"), &run_pool(&trace, policy, capacity)?));
    }
    out.write_all(render_mempool(&records, a.format)?.as_bytes())?;
    Ok(EXIT_OK)
}

/// Message sizes at which profile curves are printed.
pub const CHECK_SIZES: [f64; 6] = [
    1024.0 * 1024.0,
    4.0 * 1024.0 * 1024.0,
    16.0 * 1024.0 * 1024.0,
    64.0 * 1024.0 * 1024.0,
    256.0 * 1024.0 * 1024.0,
    1024.0 * 1024.0 * 1024.0,
];

fn profile_check(a: ProfileCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let profile = match &a.profile {
        Some(p) => BandwidthProfile::load_csv(p)?,
        None => BandwidthProfile::synthetic_a100(),
    };
    let mut missing = Vec::new();
    for op in Collective::ALL {
        for axis in Axis::ALL {
            if !profile.curve_keys().any(|(o, x, _)| o == op && x == axis) {
                missing.push(format!("{op}/{axis}"));
            }
        }
    }
    write!(out, "{:<16}{:<7}{:>6}", "op", "axis", "p")?;
    for v in CHECK_SIZES {
        write!(out, "{:>12}", format!("{}MiB", v / (1024.0 * 1024.0)))?;
    }
    writeln!(out, "   (GB/s)")?;
    for (op, axis, p) in profile.curve_keys() {
        write!(out, "{op:<16}{axis:<7}{p:>6}")?;
        for v in CHECK_SIZES {
            let w = profile.lookup_bandwidth(op, p, axis, v)?;
            write!(out, "{:>12.2}", w / 1e9)?;
        }
        writeln!(out)?;
    }
    if missing.is_empty() {
        writeln!(out, "all collectives covered on both axes")?;
    } else {
        writeln!(out, "no curve for: {}", missing.join(", "))?;
    }
    Ok(EXIT_OK)
}
