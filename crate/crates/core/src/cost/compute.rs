use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::strategy::Strategy;

/// Profiled forward time of one transformer layer keyed by micro-batch,
/// tokens per GPU (`S / s_sp`) and hidden partition (`H / s_tp`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTimeTable {
    entries: BTreeMap<(u64, u64, u64), f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerTimeRow {
    micro_batch: u64,
    tokens: u64,
    hidden_partition: u64,
    forward_seconds: f64,
}

impl LayerTimeTable {
    pub fn insert(&mut self, micro_batch: u64, tokens: u64, hidden: u64, seconds: f64) -> Result<()> {
        if !(seconds.is_finite() && seconds > 0.0) {
            return Err(Error::InvalidComputeModel(format!(
                "forward time for b={micro_batch}, tokens={tokens}, hidden={hidden} must be positive"
            )));
        }
        self.entries.insert((micro_batch, tokens, hidden), seconds);
        Ok(())
    }

    pub fn get(&self, micro_batch: u64, tokens: u64, hidden: u64) -> Result<f64> {
        self.entries
            .get(&(micro_batch, tokens, hidden))
            .copied()
            .ok_or(Error::MissingComputeEntry { micro_batch, tokens, hidden })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with header `micro_batch,tokens,hidden_partition,forward_seconds`.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut table = Self::default();
        for row in rdr.deserialize::<LayerTimeRow>() {
            let row = row?;
            table.insert(row.micro_batch, row.tokens, row.hidden_partition, row.forward_seconds)?;
        }
        Ok(table)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_csv(std::fs::File::open(path)?).map_err(|e| match e {
            Error::Csv(e) => Error::Parse { path: path.to_path_buf(), message: e.to_string() },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComputeMode {
    Analytic,
    Profiled,
}

/// Source of per-layer computation time.
///
/// With a profiled table, transformer layers are looked up by exact key and
/// a missing key is an error. Without one, time is FLOPs over
/// `peak_flops · efficiency`. The embedding and head are always analytic.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeModel {
    pub peak_flops: f64,
    pub efficiency: f64,
    pub profile: Option<LayerTimeTable>,
}

impl ComputeModel {
    pub fn analytic(peak_flops: f64, efficiency: f64) -> Result<Self> {
        let m = Self { peak_flops, efficiency, profile: None };
        m.validate()?;
        Ok(m)
    }

    pub fn profiled(peak_flops: f64, efficiency: f64, table: LayerTimeTable) -> Result<Self> {
        let m = Self { peak_flops, efficiency, profile: Some(table) };
        m.validate()?;
        Ok(m)
    }

    /// A100 bf16 peak at 50% efficiency.
    pub fn a100() -> Self {
        Self { peak_flops: 312e12, efficiency: 0.5, profile: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_flops.is_finite() && self.peak_flops > 0.0) {
            return Err(Error::InvalidComputeModel("peak_flops must be positive".into()));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::InvalidComputeModel("efficiency must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> ComputeMode {
        if self.profile.is_some() {
            ComputeMode::Profiled
        } else {
            ComputeMode::Analytic
        }
    }

    pub fn sustained_flops(&self) -> f64 {
        self.peak_flops * self.efficiency
    }
}

/// Forward FLOPs of one transformer layer on one GPU for one micro-batch.
///
/// Each GPU processes `b·S/s_sp` tokens: QKV (`6tH²`), the output projection
/// (`2tH²`) and a ratio-4 MLP (`16tH²`), plus causal attention against the
/// full sequence, `2·b·S·(S/s_sp)·H` (score and value products, halved by the
/// mask). With `s_tp = s_sp` the token slice is the same size as the hidden
/// slice, so dividing by `s_sp` alone covers both modes.
pub fn layer_forward_flops(s: &Strategy, model: &ModelConfig) -> f64 {
    let b = s.micro_batch as f64;
    let seq = model.seq_len as f64;
    let h = model.hidden_dim as f64;
    let tokens = b * seq / s.sp as f64;
    24.0 * tokens * h * h + 2.0 * tokens * seq * h
}

/// Forward, backward (2x forward) and, with recomputation, one more forward.
pub fn layer_step_flops(s: &Strategy, model: &ModelConfig) -> f64 {
    (3 + s.recompute_flag()) as f64 * layer_forward_flops(s, model)
}

/// Computation time of one transformer layer for one micro-batch, forward
/// plus backward plus recomputation.
pub fn comp_time_layer(s: &Strategy, model: &ModelConfig, compute: &ComputeModel) -> Result<f64> {
    let forward = match &compute.profile {
        Some(table) => table.get(
            s.micro_batch,
            model.seq_len / s.sp,
            model.hidden_dim / s.tp,
        )?,
        None => layer_forward_flops(s, model) / compute.sustained_flops(),
    };
    Ok((3 + s.recompute_flag()) as f64 * forward)
}

/// Forward FLOPs of the output head for one micro-batch on one GPU.
pub fn head_forward_flops(s: &Strategy, model: &ModelConfig) -> f64 {
    let tokens = (s.micro_batch * model.seq_len) as f64 / s.sp as f64;
    2.0 * tokens * model.hidden_dim as f64 * model.vocab as f64
}
