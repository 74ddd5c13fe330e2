use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::strategy::Strategy;

/// Memory outside the transformer layers, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OtherMemory {
    pub embedding_params: f64,
    pub embedding_grads: f64,
    pub embedding_optstate: f64,
    /// Last-layer activations and logits.
    pub tail_act: f64,
    /// Double buffer for gathered layer parameters when `s_ps > 1`.
    pub comm_buffer: f64,
}

impl OtherMemory {
    pub fn total(&self) -> f64 {
        self.embedding_params
            + self.embedding_grads
            + self.embedding_optstate
            + self.tail_act
            + self.comm_buffer
    }
}

/// Per-GPU memory of the most loaded pipeline stage, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub params: f64,
    pub grads: f64,
    pub optstate: f64,
    pub act: f64,
    pub other: OtherMemory,
}

impl MemoryBreakdown {
    pub fn transformer(&self) -> f64 {
        self.params + self.grads + self.optstate + self.act
    }

    pub fn total(&self) -> f64 {
        self.transformer() + self.other.total()
    }
}

/// Memory of a feasible strategy.
///
/// Model states of the `L` layers: parameters `2LΨ/(s_pp·s_tp·s_ps)`,
/// gradients additionally `/s_gs`, optimizer states `6LΨ/(s_pp·s_tp·s_ps·s_oss)`.
/// Activations follow the 1F1B bound: the first stage holds
/// `min(s_pp, n)` micro-batches of `b·S·H·L·(34 − 32a)/(s_pp·s_sp)` bytes.
/// Coefficients are written for 2-byte elements and scale with
/// `bytes_per_element`.
pub fn memory(s: &Strategy, model: &ModelConfig) -> MemoryBreakdown {
    let e = model.bytes_per_element as f64;
    let psi = model.layer_param_count() as f64;
    let l = model.layers as f64;
    let (pp, tp, ps, gs, oss, sp) =
        (s.pp as f64, s.tp as f64, s.ps as f64, s.gs as f64, s.oss as f64, s.sp as f64);

    let layer_params = l * psi / (pp * tp);
    let params = e * layer_params / ps;
    let grads = e * layer_params / (ps * gs);
    let optstate = 3.0 * e * layer_params / (ps * oss);

    let b = s.micro_batch as f64;
    let seq = model.seq_len as f64;
    let h = model.hidden_dim as f64;
    let per_token = e * (17.0 - 16.0 * s.recompute_flag() as f64);
    let in_flight = s.pp.min(s.micro_batches) as f64;
    let act = in_flight * per_token * b * seq * h * l / (pp * sp);

    // One stage holds both embedding and head only without pipelining.
    let emb = if s.pp == 1 { 2 * model.vocab * model.hidden_dim } else { model.vocab * model.hidden_dim };
    let emb = emb as f64 / tp;
    let v = model.vocab as f64;
    let other = OtherMemory {
        embedding_params: e * emb / ps,
        embedding_grads: e * emb / (ps * gs),
        embedding_optstate: 3.0 * e * emb / (ps * oss),
        tail_act: e * b * seq * (h + v) / sp,
        comm_buffer: if s.ps > 1 { 2.0 * e * psi / tp } else { 0.0 },
    };
    MemoryBreakdown { params, grads, optstate, act, other }
}
