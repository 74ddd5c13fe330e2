use serde::{Deserialize, Serialize};

use crate::cluster::{BandwidthProfile, ClusterConfig, Collective};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::placement::{GroupKind, MeshPlacement};
use crate::strategy::Strategy;

/// How the once-per-step optimizer-state synchronisation is priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OssVariant {
    /// Reduce-scatter over the OSS group, then all-reduce over the replicas
    /// holding the same parameter shard.
    #[default]
    ReduceScatterAllReduce,
    /// All-reduce over the replicas, then all-gather of updated parameters
    /// over the OSS group.
    AllReduceAllGather,
}

/// Communication time of one transformer layer over a whole step, by source.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerComm {
    /// Tensor-parallel all-gather / reduce-scatter or sequence-parallel
    /// all-to-all of activations.
    pub act: f64,
    /// Parameter gathering and gradient reduce-scatter for `s_ps > 1`.
    pub param: f64,
    /// Optimizer-state synchronisation, once per step.
    pub oss: f64,
    /// Gradient-sharding all-reduce on every micro-batch but the last.
    pub grad: f64,
}

impl LayerComm {
    /// The part that recurs every micro-batch and can overlap computation.
    pub fn per_step_overlappable(&self) -> f64 {
        self.act + self.param
    }

    /// The part charged to the update phase.
    pub fn update_phase(&self) -> f64 {
        self.oss + self.grad
    }

    pub fn total(&self) -> f64 {
        self.act + self.param + self.oss + self.grad
    }
}

/// Per-layer communication for a feasible strategy, each collective priced
/// on the axis its group was placed on. Pipeline point-to-point transfers are
/// not charged.
pub fn comm_time_layer(
    s: &Strategy,
    model: &ModelConfig,
    cluster: &ClusterConfig,
    placement: &MeshPlacement,
    profile: &BandwidthProfile,
    variant: OssVariant,
) -> Result<LayerComm> {
    let e = model.bytes_per_element as f64;
    let n = s.micro_batches as f64;
    let bsh = (s.micro_batch * model.seq_len * model.hidden_dim) as f64;
    let psi = model.layer_param_count() as f64;
    let tau = |op, bytes, p, kind| profile.collective_time(op, bytes, p, placement.axis(kind));

    let mut out = LayerComm::default();
    if s.tp > 1 && s.tp == s.sp {
        let v = e * bsh;
        out.act = 2.0 * n * tau(Collective::ReduceScatter, v, s.tp, GroupKind::TpSp)?
            + 3.0 * n * tau(Collective::AllGather, v, s.tp, GroupKind::TpSp)?;
    } else if s.sp > 1 {
        out.act = 2.0 * n * tau(Collective::AllToAll, 3.0 * e * bsh, s.sp, GroupKind::TpSp)?
            + 2.0 * n * tau(Collective::AllToAll, e * bsh, s.sp, GroupKind::TpSp)?;
    }

    let layer_bytes = e * psi / s.tp as f64;
    if s.ps > 1 {
        out.param = 2.0 * n * tau(Collective::AllGather, layer_bytes, s.ps, GroupKind::Ps)?
            + n * tau(Collective::ReduceScatter, layer_bytes, s.ps, GroupKind::Ps)?;
    }

    let shard_bytes = layer_bytes / s.ps as f64;
    let replicas = cluster.total_gpus / (s.pp * s.tp * s.ps);
    out.oss = match variant {
        OssVariant::ReduceScatterAllReduce => {
            tau(Collective::ReduceScatter, shard_bytes, s.oss, GroupKind::Oss)?
                + tau(Collective::AllReduce, shard_bytes, replicas, GroupKind::Dp)?
        }
        OssVariant::AllReduceAllGather => {
            tau(Collective::AllReduce, shard_bytes, replicas, GroupKind::Dp)?
                + tau(Collective::AllGather, shard_bytes, s.oss, GroupKind::Oss)?
        }
    };
    if s.gs > 1 {
        out.grad = (n - 1.0) * tau(Collective::AllReduce, shard_bytes, replicas, GroupKind::Gs)?;
    }
    Ok(out)
}
