//! Exhaustive plan search keeping the K fastest feasible strategies.
//!
//! Plans are ranked by estimated step time only; the report does not
//! replace measuring the leading candidates on the real cluster.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{BandwidthProfile, ClusterConfig};
use crate::cost::{
    memory, CostBreakdown, ComputeModel, Estimator, EstimatorSettings, MemoryBreakdown, Throughput,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::placement::{place_groups, MeshPlacement};
use crate::strategy::{candidates, partitions, validate, Partition, SearchBounds, Strategy};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub top_k: usize,
    /// A plan fits when its memory is at most `capacity · memory_slack`.
    pub memory_slack: f64,
    pub bounds: SearchBounds,
    pub settings: EstimatorSettings,
    /// Evaluate partitions of the space on the rayon pool.
    pub parallel: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            memory_slack: 1.0,
            bounds: SearchBounds::default(),
            settings: EstimatorSettings::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub strategy: Strategy,
    pub cost: CostBreakdown,
    pub placement: MeshPlacement,
    pub throughput: Throughput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchStats {
    /// Candidates produced by the loop nest.
    pub candidates: u64,
    /// Candidates rejected by a feasibility constraint.
    pub constraint_rejected: u64,
    /// Constraint-feasible candidates over the memory budget.
    pub pruned: u64,
    /// Candidates passing every constraint and the memory gate.
    pub feasible: u64,
}

impl SearchStats {
    fn merge(self, o: Self) -> Self {
        Self {
            candidates: self.candidates + o.candidates,
            constraint_rejected: self.constraint_rejected + o.constraint_rejected,
            pruned: self.pruned + o.pruned,
            feasible: self.feasible + o.feasible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub top_k: usize,
    pub memory_slack: f64,
    /// Ascending by `t_step`, ties broken on the strategy tuple.
    pub plans: Vec<PlanEntry>,
    pub stats: SearchStats,
}

impl PlanReport {
    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn memory_budget(&self) -> f64 {
        self.cluster.gpu_memory_capacity as f64 * self.memory_slack
    }
}

fn rank_order(a: (f64, &Strategy), b: (f64, &Strategy)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Bounded set of the K best entries seen so far.
#[derive(Debug, Clone)]
pub struct TopK<T> {
    k: usize,
    items: Vec<(f64, Strategy, T)>,
}

impl<T> TopK<T> {
    pub fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    /// Inserts if the entry ranks among the best K; returns whether it did.
    pub fn push(&mut self, time: f64, strategy: Strategy, item: T) -> bool {
        if self.k == 0 {
            return false;
        }
        if self.items.len() == self.k {
            let (worst_t, worst_s, _) = &self.items[self.k - 1];
            if rank_order((time, &strategy), (*worst_t, worst_s)) != Ordering::Less {
                return false;
            }
        }
        let pos = self
            .items
            .partition_point(|(t, s, _)| rank_order((*t, s), (time, &strategy)) == Ordering::Less);
        self.items.insert(pos, (time, strategy, item));
        self.items.truncate(self.k);
        true
    }

    /// Time of the K-th best entry, once K entries have been seen.
    pub fn kth_best(&self) -> Option<f64> {
        (self.items.len() == self.k).then(|| self.items[self.k - 1].0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (t, s, item) in other.items {
            self.push(t, s, item);
        }
        self
    }

    pub fn into_sorted(self) -> Vec<(f64, Strategy, T)> {
        self.items
    }
}

fn fits(mem: &MemoryBreakdown, budget: f64) -> bool {
    mem.total() <= budget
}

fn search_partition(
    est: &Estimator<'_>,
    opts: &SearchOptions,
    part: Partition,
) -> Result<(TopK<(CostBreakdown, MeshPlacement)>, SearchStats)> {
    let budget = est.cluster.gpu_memory_capacity as f64 * opts.memory_slack;
    let mut top = TopK::new(opts.top_k);
    let mut stats = SearchStats::default();
    for s in candidates(est.model, est.cluster, &opts.bounds, part) {
        stats.candidates += 1;
        if !validate(&s, est.model, est.cluster).is_feasible() {
            stats.constraint_rejected += 1;
            continue;
        }
        if !fits(&memory(&s, est.model), budget) {
            stats.pruned += 1;
            continue;
        }
        stats.feasible += 1;
        let placement = place_groups(est.cluster, &s);
        let cost = est.step_time_unchecked(&s, &placement)?;
        top.push(cost.t_step, s, (cost, placement));
    }
    Ok((top, stats))
}

/// Top-K feasible strategies by estimated step time.
///
/// An empty report means no strategy fits; it is not an error.
pub fn search(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    profile: &BandwidthProfile,
    compute: &ComputeModel,
    opts: &SearchOptions,
) -> Result<PlanReport> {
    model.validate()?;
    cluster.validate()?;
    compute.validate()?;
    let est = Estimator::new(model, cluster, profile, compute, opts.settings);
    let parts = partitions(cluster, &opts.bounds);
    let empty = || (TopK::new(opts.top_k), SearchStats::default());
    let (top, stats) = if opts.parallel {
        parts
            .par_iter()
            .map(|&p| search_partition(&est, opts, p))
            .try_reduce(empty, |a, b| Ok((a.0.merge(b.0), a.1.merge(b.1))))?
    } else {
        let mut acc = empty();
        for &p in &parts {
            let (t, s) = search_partition(&est, opts, p)?;
            acc = (acc.0.merge(t), acc.1.merge(s));
        }
        acc
    };
    let plans = top
        .into_sorted()
        .into_iter()
        .map(|(_, strategy, (cost, placement))| PlanEntry {
            strategy,
            throughput: est.throughput(&cost),
            cost,
            placement,
        })
        .collect();
    Ok(PlanReport {
        model: *model,
        cluster: *cluster,
        top_k: opts.top_k,
        memory_slack: opts.memory_slack,
        plans,
        stats,
    })
}

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

fn bar(parts: &[(char, f64)], width: usize) -> String {
    let total: f64 = parts.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return ".".repeat(width);
    }
    let mut out = String::new();
    let mut acc = 0.0;
    for &(c, v) in parts {
        let start = (acc / total * width as f64).round() as usize;
        acc += v;
        let end = (acc / total * width as f64).round() as usize;
        out.extend(std::iter::repeat_n(c, end - start));
    }
    out
}

/// Outcome of bumping one component of a plan by one step.
fn increment_outcome(
    report: &PlanReport,
    s: &Strategy,
    index: usize,
) -> String {
    let mut t = s.tuple();
    if index == 2 {
        if t[2] == 1 {
            return "already enabled".to_string();
        }
        t[2] = 1;
    } else {
        t[index] += 1;
    }
    let bumped = Strategy::from_tuple(t);
    let verdict = validate(&bumped, &report.model, &report.cluster);
    if !verdict.is_feasible() {
        let names: Vec<_> = verdict.violations.iter().map(|v| v.constraint.as_str()).collect();
        return format!("breaks {}", names.join(", "));
    }
    let mem = memory(&bumped, &report.model);
    if !fits(&mem, report.memory_budget()) {
        return format!("exceeds memory ({:.2} GiB)", mem.total() / GIB);
    }
    format!("feasible ({:.2} GiB)", mem.total() / GIB)
}

/// Human-readable account of the plan at `rank`: its components, memory and
/// communication bars, and what incrementing each component would break.
pub fn explain(report: &PlanReport, rank: usize) -> Result<String> {
    let entry = report
        .plans
        .get(rank)
        .ok_or(Error::RankOutOfRange { rank, len: report.plans.len() })?;
    let s = &entry.strategy;
    let c = &entry.cost;
    let mut out = String::new();
    let _ = writeln!(out, "plan #{rank}: {s}");
    let _ = writeln!(
        out,
        "step time {:.3} ms (fwd/bwd {:.3} ms, update {:.3} ms), bubble factor {}",
        c.t_step * 1e3,
        c.t_fwd_bwd * 1e3,
        c.t_update * 1e3,
        c.bubble_factor
    );
    let _ = writeln!(
        out,
        "predicted TGS {:.1} tokens/gpu/s, MFU {:.1}%",
        entry.throughput.tgs,
        entry.throughput.mfu * 100.0
    );

    let mem = [
        ('P', c.mem_params),
        ('G', c.mem_grads),
        ('O', c.mem_optstate),
        ('A', c.mem_act),
        ('x', c.mem_other),
    ];
    let _ = writeln!(
        out,
        "memory {:.2} GiB of {:.2} GiB budget",
        c.mem_total() / GIB,
        report.memory_budget() / GIB
    );
    let _ = writeln!(out, "  [{}]", bar(&mem, 48));
    let _ = writeln!(
        out,
        "  P {:.2}  G {:.2}  OS {:.2}  ACT {:.2}  other {:.2} (GiB)",
        c.mem_params / GIB,
        c.mem_grads / GIB,
        c.mem_optstate / GIB,
        c.mem_act / GIB,
        c.mem_other / GIB
    );
    let comm = [('a', c.t_comm_act), ('p', c.t_comm_param), ('g', c.t_comm_grad_oss)];
    let _ = writeln!(out, "communication per layer per step");
    let _ = writeln!(out, "  [{}]", bar(&comm, 48));
    let _ = writeln!(
        out,
        "  activations {:.3}  params {:.3}  grads/optimizer {:.3} (ms)",
        c.t_comm_act * 1e3,
        c.t_comm_param * 1e3,
        c.t_comm_grad_oss * 1e3
    );
    let _ = writeln!(out, "placement");
    for (kind, g) in &entry.placement.groups {
        let _ = writeln!(out, "  {kind:<6} size {:<4} {} ({} nodes)", g.size, g.span, g.nodes);
    }
    let _ = writeln!(out, "incrementing each component");
    for (i, name) in Strategy::FIELD_NAMES.iter().enumerate() {
        let _ = writeln!(out, "  {name:<6} -> {}", increment_outcome(report, s, i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_keeps_best_in_order() {
        let mut top = TopK::new(2);
        let s = |b| Strategy { micro_batch: b, ..Strategy::serial() };
        assert!(top.push(3.0, s(1), ()));
        assert!(top.push(1.0, s(2), ()));
        assert_eq!(top.kth_best(), Some(3.0));
        assert!(top.push(2.0, s(3), ()));
        assert!(!top.push(5.0, s(4), ()));
        // equal time: lexicographically smaller strategy wins
        assert!(top.push(2.0, s(0), ()));
        let order: Vec<_> = top.into_sorted().into_iter().map(|(t, s, _)| (t, s.micro_batch)).collect();
        assert_eq!(order, vec![(1.0, 2), (2.0, 0)]);
    }

    #[test]
    fn zero_k_keeps_nothing() {
        let mut top: TopK<()> = TopK::new(0);
        assert!(!top.push(1.0, Strategy::serial(), ()));
        assert!(top.is_empty());
    }

    #[test]
    fn bar_widths() {
        assert_eq!(bar(&[('a', 1.0), ('b', 1.0)], 4), "aabb");
        assert_eq!(bar(&[('a', 0.0)], 3), "...");
    }
}
