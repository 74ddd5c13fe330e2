//! Rendering of plans, estimates and simulator results as aligned tables or
//! line-delimited JSON records.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{CostBreakdown, Throughput};
use crate::error::Result;
use crate::mempool::{FragmentationReport, PoolStats, MIB};
use crate::overlap::{AnalyticComparison, Timeline};
use crate::placement::MeshPlacement;
use crate::search::{PlanEntry, PlanReport};
use crate::strategy::{Strategy, Verdict};

pub const SCHEMA_VERSION: u32 = 1;

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Table,
    Records,
}

/// One ranked plan as written in records output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub schema_version: u32,
    pub rank: usize,
    pub strategy: Strategy,
    pub cost: CostBreakdown,
    pub placement: MeshPlacement,
    pub throughput: Throughput,
}

impl PlanRecord {
    pub fn new(rank: usize, entry: &PlanEntry) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rank,
            strategy: entry.strategy,
            cost: entry.cost,
            placement: entry.placement.clone(),
            throughput: entry.throughput,
        }
    }

    pub fn into_entry(self) -> PlanEntry {
        PlanEntry {
            strategy: self.strategy,
            cost: self.cost,
            placement: self.placement,
            throughput: self.throughput,
        }
    }
}

fn json_line<T: Serialize>(out: &mut String, value: &T) -> Result<()> {
    out.push_str(&serde_json::to_string(value)?);
    out.push('\n');
    Ok(())
}

/// Parses records output back into plan entries, in rank order.
pub fn parse_plan_records(text: &str) -> Result<Vec<PlanEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str::<PlanRecord>(l)?.into_entry()))
        .collect()
}

const PLAN_COLUMNS: [&str; 17] = [
    "rank", "b", "n", "a", "s_pp", "s_dp", "s_tp", "s_sp", "s_ps", "s_gs", "s_oss", "mem_gib",
    "step_ms", "comp_ms", "comm_ms", "tgs", "mfu_%",
];

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let text: Vec<String> =
            cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(text.join("  ").trim_end());
        out.push('\n');
    };
    line(&mut out, &mut header.iter().copied());
    for row in rows {
        line(&mut out, &mut row.iter().map(String::as_str));
    }
    out
}

fn plan_row(rank: usize, e: &PlanEntry) -> Vec<String> {
    let mut row = vec![rank.to_string()];
    row.extend(e.strategy.tuple().iter().map(u64::to_string));
    let c = &e.cost;
    row.push(format!("{:.2}", c.mem_total() / GIB));
    row.push(format!("{:.3}", c.t_step * 1e3));
    row.push(format!("{:.3}", c.t_comp_per_layer * 1e3));
    row.push(format!("{:.3}", (c.t_comm_act + c.t_comm_param + c.t_comm_grad_oss) * 1e3));
    row.push(format!("{:.1}", e.throughput.tgs));
    row.push(format!("{:.1}", e.throughput.mfu * 100.0));
    row
}

pub fn render_plan_report(report: &PlanReport, format: Format) -> Result<String> {
    let mut out = String::new();
    match format {
        Format::Records => {
            for (rank, e) in report.plans.iter().enumerate() {
                json_line(&mut out, &PlanRecord::new(rank, e))?;
            }
        }
        Format::Table => {
            let s = &report.stats;
            if report.plans.is_empty() {
                out.push_str("no feasible plan\n");
            } else {
                let rows: Vec<_> =
                    report.plans.iter().enumerate().map(|(i, e)| plan_row(i, e)).collect();
                out.push_str(&table(&PLAN_COLUMNS, &rows));
                out.push_str("ranked by estimated step time; profile the leading plans before committing\n");
            }
            let _ = writeln!(
                out,
                "candidates {}  constraint-rejected {}  over-memory {}  feasible {}",
                s.candidates, s.constraint_rejected, s.pruned, s.feasible
            );
        }
    }
    Ok(out)
}

/// Estimate of a single strategy as written in records output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub fits_memory: bool,
    pub cost: CostBreakdown,
    pub placement: MeshPlacement,
    pub throughput: Throughput,
}

pub fn render_estimate(record: &EstimateRecord, format: Format) -> Result<String> {
    let mut out = String::new();
    if format == Format::Records {
        json_line(&mut out, record)?;
        return Ok(out);
    }
    let c = &record.cost;
    let gib = |v: f64| format!("{:.3} GiB", v / GIB);
    let ms = |v: f64| format!("{:.4} ms", v * 1e3);
    let rows = [
        ("strategy", record.strategy.to_string()),
        ("memory.params", gib(c.mem_params)),
        ("memory.grads", gib(c.mem_grads)),
        ("memory.optstate", gib(c.mem_optstate)),
        ("memory.activations", gib(c.mem_act)),
        ("memory.other", gib(c.mem_other)),
        ("memory.total", gib(c.mem_total())),
        ("fits_memory", record.fits_memory.to_string()),
        ("time.comp_per_layer", ms(c.t_comp_per_layer)),
        ("time.comm_act", ms(c.t_comm_act)),
        ("time.comm_param", ms(c.t_comm_param)),
        ("time.comm_grad_oss", ms(c.t_comm_grad_oss)),
        ("time.layer_overlapped", ms(c.t_layer_overlapped)),
        ("time.other", ms(c.t_other)),
        ("time.fwd_bwd", ms(c.t_fwd_bwd)),
        ("time.update", ms(c.t_update)),
        ("time.step", ms(c.t_step)),
        ("bubble_factor", format!("{:.4}", c.bubble_factor)),
        ("tgs", format!("{:.1}", record.throughput.tgs)),
        ("mfu", format!("{:.2}%", record.throughput.mfu * 100.0)),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<22}{v}");
    }
    for (kind, g) in &record.placement.groups {
        let _ = writeln!(out, "{:<22}size {} {} over {} nodes", format!("placement.{kind}"), g.size, g.span, g.nodes);
    }
    Ok(out)
}

/// CSV rows behind the memory and communication bar charts.
pub fn breakdown_csv(cost: &CostBreakdown, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["chart", "component", "value", "unit"])?;
    let mem = [
        ("params", cost.mem_params),
        ("grads", cost.mem_grads),
        ("optstate", cost.mem_optstate),
        ("activations", cost.mem_act),
        ("other", cost.mem_other),
    ];
    for (k, v) in mem {
        w.write_record(["memory", k, &v.to_string(), "bytes"])?;
    }
    let comm = [
        ("activations", cost.t_comm_act),
        ("params", cost.t_comm_param),
        ("grads_optstate", cost.t_comm_grad_oss),
    ];
    for (k, v) in comm {
        w.write_record(["communication", k, &v.to_string(), "seconds"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_verdict(s: &Strategy, verdict: &Verdict) -> String {
    let mut out = String::new();
    if verdict.is_feasible() {
        let _ = writeln!(out, "feasible: {s}");
    } else {
        let _ = writeln!(out, "infeasible: {s}");
        for m in verdict.messages() {
            let _ = writeln!(out, "  {m}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub schema_version: u32,
    pub pass: String,
    pub policy: String,
    pub makespan: f64,
    pub compute: f64,
    pub comm: f64,
    pub exposed_comm: f64,
    pub comparison: AnalyticComparison,
}

impl OverlapRecord {
    pub fn new(pass: &str, policy: &str, t: &Timeline, comparison: AnalyticComparison) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            pass: pass.into(),
            policy: policy.into(),
            makespan: t.makespan,
            compute: t.compute_time(),
            comm: t.comm_time(),
            exposed_comm: t.exposed_comm(),
            comparison,
        }
    }
}

pub fn render_overlap(records: &[OverlapRecord], format: Format) -> Result<String> {
    let mut out = String::new();
    if format == Format::Records {
        for r in records {
            json_line(&mut out, r)?;
        }
        return Ok(out);
    }
    let header = ["pass", "policy", "makespan_ms", "compute_ms", "comm_ms", "exposed_ms", "vs_analytic"];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.pass.clone(),
                r.policy.clone(),
                format!("{:.3}", r.makespan * 1e3),
                format!("{:.3}", r.compute * 1e3),
                format!("{:.3}", r.comm * 1e3),
                format!("{:.3}", r.exposed_comm * 1e3),
                format!("{:.4}", r.comparison.ratio),
            ]
        })
        .collect();
    Ok(table(&header, &rows))
}

/// Summary of one allocator run, without the per-operation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MempoolRecord {
    pub schema_version: u32,
    pub label: String,
    pub threshold: u64,
    pub peak_reserved: u64,
    pub peak_allocated: u64,
    pub peak_fragmented: u64,
    pub pinned_reserved: u64,
    pub final_stats: PoolStats,
    /// `(fragment bytes, most present at once)`.
    pub fragment_sizes: Vec<(u64, u64)>,
    pub oom_events: usize,
}

impl MempoolRecord {
    pub fn new(label: &str, r: &FragmentationReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            label: label.into(),
            threshold: r.threshold,
            peak_reserved: r.peak_reserved,
            peak_allocated: r.peak_allocated,
            peak_fragmented: r.peak_fragmented,
            pinned_reserved: r.pinned_reserved,
            final_stats: r.final_stats(),
            fragment_sizes: r.fragment_sizes.iter().map(|(&k, &v)| (k, v)).collect(),
            oom_events: r.oom_events.len(),
        }
    }
}

pub fn render_mempool(records: &[MempoolRecord], format: Format) -> Result<String> {
    let mut out = String::new();
    if format == Format::Records {
        for r in records {
            json_line(&mut out, r)?;
        }
        return Ok(out);
    }
    let mib = |v: u64| format!("{:.1}", v as f64 / MIB as f64);
    let header = ["run", "peak_reserved_mib", "peak_alloc_mib", "peak_frag_mib", "pinned_mib", "fragments (mib x count)", "ooms"];
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let frags: Vec<String> =
                r.fragment_sizes.iter().map(|(s, n)| format!("{}x{n}", mib(*s))).collect();
            vec![
                r.label.clone(),
                mib(r.peak_reserved),
                mib(r.peak_allocated),
                mib(r.peak_fragmented),
                mib(r.pinned_reserved),
                if frags.is_empty() { "-".into() } else { frags.join(" ") },
                r.oom_events.to_string(),
            ]
        })
        .collect();
    Ok(table(&header, &rows))
}
