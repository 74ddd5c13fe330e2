//! Memory and step-time estimation for a single strategy.
//!
//! Step time is
//! `(n + s_pp − 1) · (T_other + ⌈L/s_pp⌉ · OPro) + T_update`, where
//! `OPro = ℛ · max(comm, comp)` is the overlapped time of one layer for one
//! micro-batch. Once-per-step optimizer and gradient-sharding collectives
//! are kept out of the overlap and charged to the update phase, together with
//! an element-wise optimizer pass over the local optimizer states.

mod comm;
mod compute;
mod memory;

use serde::{Deserialize, Serialize};

pub use comm::{comm_time_layer, LayerComm, OssVariant};
pub use compute::{
    comp_time_layer, head_forward_flops, layer_forward_flops, layer_step_flops, ComputeMode,
    ComputeModel, LayerTimeTable,
};
pub use memory::{memory, MemoryBreakdown, OtherMemory};

use crate::cluster::{BandwidthProfile, ClusterConfig, Collective};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::placement::{place_groups, GroupKind, MeshPlacement};
use crate::strategy::{validate, Strategy};

/// Slowdown of overlapped communication and computation relative to the
/// slower of the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapModel {
    pub slowdown_ratio: f64,
}

impl Default for OverlapModel {
    fn default() -> Self {
        Self { slowdown_ratio: 1.30 }
    }
}

impl OverlapModel {
    pub fn new(slowdown_ratio: f64) -> Result<Self> {
        if !(slowdown_ratio.is_finite() && slowdown_ratio >= 1.0) {
            return Err(Error::Validation(vec![format!(
                "slowdown_ratio must be >= 1, got {slowdown_ratio}"
            )]));
        }
        Ok(Self { slowdown_ratio })
    }

    /// `ℛ · max(comm, comp)`.
    pub fn overlapped(&self, comm: f64, comp: f64) -> f64 {
        self.slowdown_ratio * comm.max(comp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub overlap: OverlapModel,
    /// Memory bandwidth of the element-wise optimizer update, bytes/s.
    pub update_bandwidth: f64,
    pub oss_variant: OssVariant,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            overlap: OverlapModel::default(),
            update_bandwidth: 1e12,
            oss_variant: OssVariant::default(),
        }
    }
}

/// Everything the planner reports about one strategy.
///
/// Memory is in bytes per GPU. Communication fields are per transformer
/// layer summed over the step's micro-batches; `t_comp_per_layer` and
/// `t_layer_overlapped` are per layer per micro-batch; `t_other` is per
/// micro-batch; the rest are per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub mem_params: f64,
    pub mem_grads: f64,
    pub mem_optstate: f64,
    pub mem_act: f64,
    pub mem_other: f64,
    pub mem_other_detail: OtherMemory,
    pub t_comp_per_layer: f64,
    pub t_comm_act: f64,
    pub t_comm_param: f64,
    pub t_comm_grad_oss: f64,
    pub t_layer_overlapped: f64,
    pub t_other: f64,
    pub t_fwd_bwd: f64,
    pub t_update: f64,
    pub t_step: f64,
    pub bubble_factor: f64,
}

impl CostBreakdown {
    pub fn mem_total(&self) -> f64 {
        self.mem_params + self.mem_grads + self.mem_optstate + self.mem_act + self.mem_other
    }

    pub fn memory(&self) -> MemoryBreakdown {
        MemoryBreakdown {
            params: self.mem_params,
            grads: self.mem_grads,
            optstate: self.mem_optstate,
            act: self.mem_act,
            other: self.mem_other_detail,
        }
    }
}

/// `(n + s_pp − 1) · (T_other + ⌈L/s_pp⌉ · OPro)`.
pub fn fwd_bwd_time(micro_batches: u64, pp: u64, layers: u64, t_other: f64, opro: f64) -> f64 {
    (micro_batches + pp - 1) as f64 * (t_other + layers.div_ceil(pp) as f64 * opro)
}

/// Predicted tokens per GPU per second and model FLOPs utilisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub tgs: f64,
    pub mfu: f64,
}

/// Model FLOPs of one step: `6·P·B` for the dense part plus `6·L·H·S·B` for
/// causal attention.
pub fn model_flops_per_step(model: &ModelConfig) -> f64 {
    let b = model.global_batch as f64;
    6.0 * model.total_param_count() as f64 * b
        + 6.0 * (model.layers * model.hidden_dim * model.seq_len) as f64 * b
}

pub fn throughput(
    breakdown: &CostBreakdown,
    model: &ModelConfig,
    cluster: &ClusterConfig,
    peak_flops: f64,
) -> Throughput {
    let gpu_seconds = breakdown.t_step * cluster.total_gpus as f64;
    Throughput {
        tgs: model.global_batch as f64 / gpu_seconds,
        mfu: model_flops_per_step(model) / (gpu_seconds * peak_flops),
    }
}

/// Bundles the immutable inputs of the cost model.
#[derive(Debug, Clone, Copy)]
pub struct Estimator<'a> {
    pub model: &'a ModelConfig,
    pub cluster: &'a ClusterConfig,
    pub profile: &'a BandwidthProfile,
    pub compute: &'a ComputeModel,
    pub settings: EstimatorSettings,
}

impl<'a> Estimator<'a> {
    pub fn new(
        model: &'a ModelConfig,
        cluster: &'a ClusterConfig,
        profile: &'a BandwidthProfile,
        compute: &'a ComputeModel,
        settings: EstimatorSettings,
    ) -> Self {
        Self { model, cluster, profile, compute, settings }
    }

    fn check(&self, s: &Strategy) -> Result<()> {
        let verdict = validate(s, self.model, self.cluster);
        if verdict.is_feasible() {
            Ok(())
        } else {
            Err(Error::InfeasibleStrategy(verdict.messages()))
        }
    }

    pub fn memory(&self, s: &Strategy) -> Result<MemoryBreakdown> {
        self.check(s)?;
        Ok(memory(s, self.model))
    }

    pub fn placement(&self, s: &Strategy) -> MeshPlacement {
        place_groups(self.cluster, s)
    }

    pub fn comm_time_layer(&self, s: &Strategy, placement: &MeshPlacement) -> Result<LayerComm> {
        self.check(s)?;
        comm_time_layer(s, self.model, self.cluster, placement, self.profile, self.settings.oss_variant)
    }

    /// Validates, then estimates.
    pub fn step_time(&self, s: &Strategy) -> Result<CostBreakdown> {
        self.check(s)?;
        let placement = self.placement(s);
        self.step_time_unchecked(s, &placement)
    }

    /// Estimates a strategy already known to be feasible.
    pub fn step_time_unchecked(&self, s: &Strategy, placement: &MeshPlacement) -> Result<CostBreakdown> {
        let model = self.model;
        let mem = memory(s, model);
        let comm = comm_time_layer(
            s,
            model,
            self.cluster,
            placement,
            self.profile,
            self.settings.oss_variant,
        )?;
        let comp = comp_time_layer(s, model, self.compute)?;
        let n = s.micro_batches as f64;
        let opro = self.settings.overlap.overlapped(comm.per_step_overlappable() / n, comp);
        let t_other = self.other_layers_time(s, placement)?;
        let stage_layers = s.stage_layers(model) as f64;
        let t_fwd_bwd = fwd_bwd_time(s.micro_batches, s.pp, model.layers, t_other, opro);
        let t_update =
            stage_layers * comm.update_phase() + mem.optstate / self.settings.update_bandwidth;
        Ok(CostBreakdown {
            mem_params: mem.params,
            mem_grads: mem.grads,
            mem_optstate: mem.optstate,
            mem_act: mem.act,
            mem_other: mem.other.total(),
            mem_other_detail: mem.other,
            t_comp_per_layer: comp,
            t_comm_act: comm.act,
            t_comm_param: comm.param,
            t_comm_grad_oss: comm.update_phase(),
            t_layer_overlapped: opro,
            t_other,
            t_fwd_bwd,
            t_update,
            t_step: t_fwd_bwd + t_update,
            bubble_factor: (s.micro_batches + s.pp - 1) as f64,
        })
    }

    /// Embedding and head for one micro-batch: head matmul forward and
    /// backward, plus gathering their parameter shards when `s_ps > 1`.
    fn other_layers_time(&self, s: &Strategy, placement: &MeshPlacement) -> Result<f64> {
        let comp = 3.0 * head_forward_flops(s, self.model) / self.compute.sustained_flops();
        if s.ps == 1 {
            return Ok(comp);
        }
        let model = self.model;
        let emb = if s.pp == 1 { 2 * model.vocab * model.hidden_dim } else { model.vocab * model.hidden_dim };
        let bytes = (model.bytes_per_element * emb) as f64 / s.tp as f64;
        let axis = placement.axis(GroupKind::Ps);
        let comm = 2.0 * self.profile.collective_time(Collective::AllGather, bytes, s.ps, axis)?
            + self.profile.collective_time(Collective::ReduceScatter, bytes, s.ps, axis)?;
        Ok(comp + comm)
    }

    pub fn throughput(&self, breakdown: &CostBreakdown) -> Throughput {
        throughput(breakdown, self.model, self.cluster, self.compute.peak_flops)
    }
}
