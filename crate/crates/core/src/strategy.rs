//! The execution-plan vector `[b, n, a, s_pp, s_dp, s_tp, s_sp, s_ps, s_gs, s_oss]`,
//! its feasibility constraints, and the enumeration of the feasible space.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::model::ModelConfig;

/// One point of the search space.
///
/// `pp`, `dp`, `tp` and `sp` are the pipeline, data, tensor and sequence
/// parallel sizes; `ps`, `gs` and `oss` are the sharding factors of
/// parameters, gradients and optimizer states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub micro_batch: u64,
    pub micro_batches: u64,
    pub recompute: bool,
    pub pp: u64,
    pub dp: u64,
    pub tp: u64,
    pub sp: u64,
    pub ps: u64,
    pub gs: u64,
    pub oss: u64,
}

impl Strategy {
    /// Everything 1, no recomputation.
    pub fn serial() -> Self {
        Self {
            micro_batch: 1,
            micro_batches: 1,
            recompute: false,
            pp: 1,
            dp: 1,
            tp: 1,
            sp: 1,
            ps: 1,
            gs: 1,
            oss: 1,
        }
    }

    pub fn recompute_flag(&self) -> u64 {
        u64::from(self.recompute)
    }

    /// The plan as `[b, n, a, s_pp, s_dp, s_tp, s_sp, s_ps, s_gs, s_oss]`;
    /// ordering of strategies is lexicographic on this tuple.
    pub fn tuple(&self) -> [u64; 10] {
        [
            self.micro_batch,
            self.micro_batches,
            self.recompute_flag(),
            self.pp,
            self.dp,
            self.tp,
            self.sp,
            self.ps,
            self.gs,
            self.oss,
        ]
    }

    pub fn from_tuple(t: [u64; 10]) -> Self {
        Self {
            micro_batch: t[0],
            micro_batches: t[1],
            recompute: t[2] != 0,
            pp: t[3],
            dp: t[4],
            tp: t[5],
            sp: t[6],
            ps: t[7],
            gs: t[8],
            oss: t[9],
        }
    }

    pub const FIELD_NAMES: [&'static str; 10] =
        ["b", "n", "a", "s_pp", "s_dp", "s_tp", "s_sp", "s_ps", "s_gs", "s_oss"];

    /// Layers held by one pipeline stage, `⌈L / s_pp⌉`.
    pub fn stage_layers(&self, model: &ModelConfig) -> u64 {
        model.layers.div_ceil(self.pp)
    }

    /// Size of the set of GPUs holding replicas of the same model-state
    /// slice before sharding: `N / (s_pp · s_tp)`.
    pub fn replica_set(&self, cluster: &ClusterConfig) -> u64 {
        cluster.total_gpus / (self.pp * self.tp)
    }

    pub fn param_layout(&self, model: &ModelConfig, cluster: &ClusterConfig) -> ShardingLayout {
        let elements = self.stage_layers(model) * model.layer_param_count() / self.tp;
        ShardingLayout::new(elements, self.replica_set(cluster), self.ps)
    }

    pub fn optstate_layout(&self, model: &ModelConfig, cluster: &ClusterConfig) -> ShardingLayout {
        let elements = self.stage_layers(model) * model.layer_param_count() / self.tp;
        ShardingLayout::new(elements, self.replica_set(cluster), self.ps * self.oss)
    }
}

impl Ord for Strategy {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.tuple().cmp(&other.tuple())
    }
}

impl PartialOrd for Strategy {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Self::FIELD_NAMES
            .iter()
            .zip(self.tuple())
            .map(|(name, v)| format!("{name}={v}"))
            .collect();
        f.pad(&parts.join(" "))
    }
}

/// Placement of a tensor of `E` elements over a replicated set of `R` GPUs
/// with sharding factor `F`: `F = 1` replicates, `F = R` fully shards, and
/// anything in between shards over `F` and replicates `R / F` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardingLayout {
    pub factor: u64,
    pub replica_groups: u64,
    pub elements_per_gpu: u64,
}

impl ShardingLayout {
    pub fn new(elements: u64, replicas: u64, factor: u64) -> Self {
        debug_assert!(factor > 0 && replicas.is_multiple_of(factor));
        Self {
            factor,
            replica_groups: replicas / factor,
            elements_per_gpu: elements.div_ceil(factor),
        }
    }

    pub fn is_replicated(&self) -> bool {
        self.factor == 1
    }

    pub fn is_fully_sharded(&self) -> bool {
        self.replica_groups == 1
    }
}

/// The feasibility predicates, in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    PositiveComponents,
    GlobalBatch,
    GpuCount,
    ParamShardDivides,
    OptStateShardDivides,
    GradShardChoice,
    ModeCoupling,
    ParamShardRange,
    OptStateShardRange,
    HeadDivisibility,
    StageLayers,
}

impl Constraint {
    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::PositiveComponents => "positive-components",
            Constraint::GlobalBatch => "global-batch",
            Constraint::GpuCount => "gpu-count",
            Constraint::ParamShardDivides => "param-shard-divides",
            Constraint::OptStateShardDivides => "optstate-shard-divides",
            Constraint::GradShardChoice => "grad-shard-choice",
            Constraint::ModeCoupling => "mode-coupling",
            Constraint::ParamShardRange => "param-shard-range",
            Constraint::OptStateShardRange => "optstate-shard-range",
            Constraint::HeadDivisibility => "head-divisibility",
            Constraint::StageLayers => "stage-layers",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub detail: String,
}

/// Result of [`validate`]: feasible when no constraint is violated.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, c: Constraint) -> bool {
        self.violations.iter().any(|v| v.constraint == c)
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| format!("{}: {}", v.constraint, v.detail)).collect()
    }
}

/// Checks every constraint of the plan search and reports all violations.
pub fn validate(s: &Strategy, model: &ModelConfig, cluster: &ClusterConfig) -> Verdict {
    let mut out = Vec::new();
    let mut fail = |constraint, detail: String| out.push(Violation { constraint, detail });

    let t = s.tuple();
    let zero: Vec<&str> = Strategy::FIELD_NAMES
        .iter()
        .zip(t)
        .filter(|&(name, v)| *name != "a" && v == 0)
        .map(|(name, _)| *name)
        .collect();
    if !zero.is_empty() {
        fail(Constraint::PositiveComponents, format!("{} must be >= 1", zero.join(", ")));
        return Verdict { violations: out };
    }

    let n_gpus = cluster.total_gpus;
    let tokens = s.micro_batch as u128
        * model.seq_len as u128
        * s.micro_batches as u128
        * s.dp as u128;
    if tokens != model.global_batch as u128 {
        fail(
            Constraint::GlobalBatch,
            format!("b*S*n*s_dp = {tokens} != B = {}", model.global_batch),
        );
    }
    let gpus = s.dp as u128 * s.sp as u128 * s.pp as u128;
    if gpus != n_gpus as u128 {
        fail(Constraint::GpuCount, format!("s_dp*s_sp*s_pp = {gpus} != N = {n_gpus}"));
    }
    let ps_group = s.ps as u128 * s.pp as u128 * s.tp as u128;
    if !(n_gpus as u128).is_multiple_of(ps_group) {
        fail(
            Constraint::ParamShardDivides,
            format!("s_ps*s_pp*s_tp = {ps_group} does not divide N = {n_gpus}"),
        );
    }
    let oss_group = ps_group * s.oss as u128;
    if !(n_gpus as u128).is_multiple_of(oss_group) {
        fail(
            Constraint::OptStateShardDivides,
            format!("s_ps*s_oss*s_pp*s_tp = {oss_group} does not divide N = {n_gpus}"),
        );
    }
    if s.gs != 1 && s.gs != s.oss {
        fail(Constraint::GradShardChoice, format!("s_gs = {} not in {{1, s_oss = {}}}", s.gs, s.oss));
    }
    if s.tp != 1 && s.tp != s.sp {
        fail(
            Constraint::ModeCoupling,
            format!("s_tp = {} must be 1 or equal s_sp = {}", s.tp, s.sp),
        );
    }
    let ps_max = n_gpus / (s.pp * s.tp).max(1);
    if s.ps > ps_max {
        fail(Constraint::ParamShardRange, format!("s_ps = {} > N/(s_pp*s_tp) = {ps_max}", s.ps));
    }
    let oss_max = n_gpus / (s.pp * s.tp * s.ps).max(1);
    if s.oss > oss_max {
        fail(
            Constraint::OptStateShardRange,
            format!("s_oss = {} > N/(s_pp*s_tp*s_ps) = {oss_max}", s.oss),
        );
    }
    if s.sp > model.heads || !model.heads.is_multiple_of(s.sp) {
        fail(
            Constraint::HeadDivisibility,
            format!("heads D = {} not divisible by s_sp = {}", model.heads, s.sp),
        );
    }
    if s.pp > model.layers {
        fail(Constraint::StageLayers, format!("s_pp = {} > L = {}", s.pp, model.layers));
    }
    Verdict { violations: out }
}

/// Optional caps on the enumerated dimensions; `None` means "as large as the
/// cluster and batch allow".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchBounds {
    pub max_pp: Option<u64>,
    pub max_sp: Option<u64>,
    pub max_micro_batch: Option<u64>,
    pub max_ps: Option<u64>,
    pub max_oss: Option<u64>,
}

/// Outer loop coordinates `(s_pp, s_sp, s_tp)`; the enumeration space is
/// partitioned along these for concurrent evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Partition {
    pub pp: u64,
    pub sp: u64,
    pub tp: u64,
}

pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

fn capped(limit: Option<u64>) -> impl Fn(&u64) -> bool {
    move |v| limit.is_none_or(|m| *v <= m)
}

/// Outer loop nest: `s_pp` over divisors of N, `s_sp` over powers of two up
/// to `N / s_pp`, and `s_tp ∈ {1, s_sp}`.
pub fn partitions(cluster: &ClusterConfig, bounds: &SearchBounds) -> Vec<Partition> {
    let n = cluster.total_gpus;
    let mut out = Vec::new();
    for pp in divisors(n).into_iter().filter(capped(bounds.max_pp)) {
        let per_stage = n / pp;
        let mut sp = 1;
        while sp <= per_stage {
            if capped(bounds.max_sp)(&sp) {
                out.push(Partition { pp, sp, tp: 1 });
                if sp > 1 {
                    out.push(Partition { pp, sp, tp: sp });
                }
            }
            sp *= 2;
        }
    }
    out
}

/// Every candidate of the inner loop nest for one partition, before
/// validation. `s_dp` and `n` are derived from the equality constraints;
/// candidates whose derived values are not integral are skipped.
pub fn candidates(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    bounds: &SearchBounds,
    part: Partition,
) -> Vec<Strategy> {
    let n_gpus = cluster.total_gpus;
    let Partition { pp, sp, tp } = part;
    let mut out = Vec::new();
    if model.seq_len == 0 || !model.global_batch.is_multiple_of(model.seq_len) {
        return out;
    }
    let sequences = model.global_batch / model.seq_len;
    if !n_gpus.is_multiple_of(pp * sp) {
        return out;
    }
    let dp = n_gpus / (pp * sp);
    if !sequences.is_multiple_of(dp) || !n_gpus.is_multiple_of(pp * tp) {
        return out;
    }
    let replicas = n_gpus / (pp * tp);
    for b in divisors(sequences / dp).into_iter().filter(capped(bounds.max_micro_batch)) {
        let micro_batches = sequences / (dp * b);
        for ps in divisors(replicas).into_iter().filter(capped(bounds.max_ps)) {
            for oss in divisors(replicas / ps).into_iter().filter(capped(bounds.max_oss)) {
                let gs_choices: &[u64] = if oss == 1 { &[1] } else { &[1, oss] };
                for &gs in gs_choices {
                    for recompute in [false, true] {
                        out.push(Strategy {
                            micro_batch: b,
                            micro_batches,
                            recompute,
                            pp,
                            dp,
                            tp,
                            sp,
                            ps,
                            gs,
                            oss,
                        });
                    }
                }
            }
        }
    }
    out
}

/// All feasible strategies (with power-of-two `s_sp`), each exactly once,
/// in loop-nest order.
pub fn enumerate<'a>(
    model: &'a ModelConfig,
    cluster: &'a ClusterConfig,
    bounds: &'a SearchBounds,
) -> impl Iterator<Item = Strategy> + 'a {
    partitions(cluster, bounds)
        .into_iter()
        .flat_map(move |part| candidates(model, cluster, bounds, part))
        .filter(move |s| validate(s, model, cluster).is_feasible())
}
