//! Assignment of process groups to the two-level device mesh.
//!
//! Ranks are laid out stage-major: rank `r` belongs to pipeline stage
//! `r / M` with `M = N / s_pp`. Inside a stage the tensor/sequence group is
//! innermost (consecutive ranks), so it occupies the fewest nodes. Model-state
//! groups (parameter, optimizer and gradient sharding, and the gradient
//! all-reduce group) are formed over the remaining data-parallel coordinate
//! first: position `dp_index + s_dp · sp_index` inside a stage, cut into
//! replica sets of `N / (s_pp · s_tp)` GPUs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{Axis, ClusterConfig};
use crate::strategy::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    /// Tensor / sequence parallel group.
    TpSp,
    /// Parameter sharding group.
    Ps,
    /// Optimizer-state sharding group.
    Oss,
    /// Gradient sharding group.
    Gs,
    /// GPUs holding the same parameter shard, which all-reduce gradients.
    Dp,
}

impl GroupKind {
    pub const ALL: [GroupKind; 5] =
        [GroupKind::TpSp, GroupKind::Ps, GroupKind::Oss, GroupKind::Gs, GroupKind::Dp];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::TpSp => "tp/sp",
            GroupKind::Ps => "ps",
            GroupKind::Oss => "oss",
            GroupKind::Gs => "gs",
            GroupKind::Dp => "dp",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// How a group's ranks sit on nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    /// All ranks on one node.
    Intra,
    /// Several nodes, several ranks on at least one of them.
    Mixed,
    /// Several nodes, one rank on each.
    Inter,
}

impl Span {
    /// The bandwidth curve a group with this span is priced on; partially
    /// spanning groups use the inter-node curve.
    pub fn axis(self) -> Axis {
        match self {
            Span::Intra => Axis::Intra,
            Span::Mixed | Span::Inter => Axis::Inter,
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Span::Intra => "intra",
            Span::Mixed => "mixed",
            Span::Inter => "inter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlacement {
    pub size: u64,
    pub span: Span,
    /// Largest number of nodes any group of this kind touches.
    pub nodes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshPlacement {
    pub groups: BTreeMap<GroupKind, GroupPlacement>,
}

impl MeshPlacement {
    pub fn span(&self, kind: GroupKind) -> Span {
        self.groups[&kind].span
    }

    pub fn axis(&self, kind: GroupKind) -> Axis {
        self.span(kind).axis()
    }
}

/// Group key of `rank` for `kind`; ranks sharing a key form one group.
fn group_key(kind: GroupKind, s: &Strategy, n_gpus: u64, rank: u64) -> (u64, u64, u64) {
    let per_stage = n_gpus / s.pp;
    let stage = rank / per_stage;
    let q = rank % per_stage;
    let sp_index = q % s.sp;
    let dp_index = q / s.sp;
    if kind == GroupKind::TpSp {
        return (stage, dp_index, 0);
    }
    let replicas = n_gpus / (s.pp * s.tp);
    let pos = dp_index + s.dp * sp_index;
    let set = pos / replicas;
    let offset = pos % replicas;
    let shard = offset % s.ps;
    match kind {
        GroupKind::Ps => (stage, set, offset / s.ps),
        GroupKind::Oss => (stage, set, shard + s.ps * (offset / (s.ps * s.oss))),
        GroupKind::Gs | GroupKind::Dp => (stage, set, shard),
        GroupKind::TpSp => unreachable!(),
    }
}

/// Ranks of every group of `kind`, each list ascending.
pub fn group_members(kind: GroupKind, s: &Strategy, cluster: &ClusterConfig) -> Vec<Vec<u64>> {
    let mut groups: BTreeMap<(u64, u64, u64), Vec<u64>> = BTreeMap::new();
    for rank in 0..cluster.total_gpus {
        groups.entry(group_key(kind, s, cluster.total_gpus, rank)).or_default().push(rank);
    }
    groups.into_values().collect()
}

/// Span of one set of ranks on nodes of `gpus_per_node`.
pub fn classify(ranks: &[u64], gpus_per_node: u64) -> (Span, u64) {
    let mut per_node: BTreeMap<u64, u64> = BTreeMap::new();
    for r in ranks {
        *per_node.entry(r / gpus_per_node).or_default() += 1;
    }
    let nodes = per_node.len() as u64;
    let span = if nodes <= 1 {
        Span::Intra
    } else if per_node.values().all(|&c| c == 1) {
        Span::Inter
    } else {
        Span::Mixed
    };
    (span, nodes)
}

/// Places every process group of a feasible strategy on the mesh.
///
/// Tensor/sequence groups take consecutive ranks, so they stay inside a
/// node whenever they fit in one. Parameter-sharding groups come next on the
/// data-parallel coordinate and are intra-node when `s_sp · s_ps` GPUs fit
/// in what a node has left; the remaining groups get whatever span follows.
pub fn place_groups(cluster: &ClusterConfig, s: &Strategy) -> MeshPlacement {
    let mut groups = BTreeMap::new();
    for kind in GroupKind::ALL {
        let members = group_members(kind, s, cluster);
        let size = members.first().map_or(1, |g| g.len() as u64);
        let (span, nodes) = members
            .iter()
            .map(|g| classify(g, cluster.gpus_per_node))
            .max()
            .unwrap_or((Span::Intra, 1));
        groups.insert(kind, GroupPlacement { size, span, nodes });
    }
    MeshPlacement { groups }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strat(n: u64, pp: u64, sp: u64, tp: u64, ps: u64, oss: u64) -> Strategy {
        Strategy { pp, sp, tp, ps, oss, gs: 1, dp: n / (pp * sp), ..Strategy::serial() }
    }

    #[test]
    fn full_node_sequence_group_pushes_ps_across_nodes() {
        let c = ClusterConfig::new(32, 8, 1);
        let p = place_groups(&c, &strat(32, 1, 8, 1, 4, 1));
        assert_eq!(p.span(GroupKind::TpSp), Span::Intra);
        assert_eq!(p.span(GroupKind::Ps), Span::Inter);
        assert_eq!(p.groups[&GroupKind::Ps].size, 4);
    }

    #[test]
    fn small_groups_share_a_node() {
        let c = ClusterConfig::new(16, 8, 1);
        let p = place_groups(&c, &strat(16, 1, 2, 1, 4, 1));
        assert_eq!(p.span(GroupKind::TpSp), Span::Intra);
        assert_eq!(p.span(GroupKind::Ps), Span::Intra);
    }

    #[test]
    fn trivial_groups_are_intra() {
        let c = ClusterConfig::new(16, 8, 1);
        let p = place_groups(&c, &strat(16, 1, 1, 1, 1, 1));
        assert_eq!(p.span(GroupKind::TpSp), Span::Intra);
        assert_eq!(p.span(GroupKind::Ps), Span::Intra);
        assert_eq!(p.span(GroupKind::Oss), Span::Intra);
        // 16 data-parallel replicas across two nodes
        assert_eq!(p.span(GroupKind::Dp), Span::Mixed);
    }

    #[test]
    fn oversized_sequence_group_is_not_intra() {
        let c = ClusterConfig::new(32, 8, 1);
        let p = place_groups(&c, &strat(32, 1, 16, 16, 2, 1));
        assert_eq!(p.span(GroupKind::TpSp), Span::Mixed);
        assert_eq!(p.axis(GroupKind::TpSp), Axis::Inter);
    }

    #[test]
    fn groups_have_declared_sizes() {
        let c = ClusterConfig::new(64, 8, 1);
        let s = strat(64, 2, 4, 1, 4, 2);
        let p = place_groups(&c, &s);
        let replicas = 64 / 2;
        assert_eq!(p.groups[&GroupKind::TpSp].size, 4);
        assert_eq!(p.groups[&GroupKind::Ps].size, 4);
        assert_eq!(p.groups[&GroupKind::Oss].size, 2);
        assert_eq!(p.groups[&GroupKind::Dp].size, replicas / 4);
    }
}
