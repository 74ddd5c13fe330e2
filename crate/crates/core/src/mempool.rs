//! Caching best-fit allocator simulation over synthesized training traces.
//!
//! Freed blocks stay cached in their segment and are reused by later
//! requests of any size, split best-fit. Segments are never returned to the
//! device. Free space smaller than the smallest recurring request in the
//! trace is counted as fragmented rather than cached.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::strategy::Strategy;

pub const MIB: u64 = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    MlpIntermediate,
    MlpOutput,
    Grad,
    CommBuffer,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum TraceOp {
    Alloc { id: u64, size: u64, tag: Tag },
    Free { id: u64, tag: Tag },
    StepBoundary,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub ops: Vec<TraceOp>,
}

impl Trace {
    /// Every free matches a live allocation and ids are never reused.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut live = HashSet::new();
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                TraceOp::Alloc { id, size, .. } => {
                    if size == 0 {
                        return Err(Error::InvalidTrace(format!("op {i}: zero-size allocation {id}")));
                    }
                    if !seen.insert(id) {
                        return Err(Error::InvalidTrace(format!("op {i}: id {id} allocated twice")));
                    }
                    live.insert(id);
                }
                TraceOp::Free { id, .. } => {
                    if !live.remove(&id) {
                        return Err(Error::InvalidTrace(format!("op {i}: free of unallocated id {id}")));
                    }
                }
                TraceOp::StepBoundary => {}
            }
        }
        Ok(())
    }

    pub fn count(&self, tag: Tag) -> usize {
        self.ops
            .iter()
            .filter(|op| matches!(op, TraceOp::Alloc { tag: t, .. } if *t == tag))
            .count()
    }

    /// The same trace with every comm-buffer operation removed.
    pub fn without(&self, tag: Tag) -> Trace {
        let ops = self
            .ops
            .iter()
            .filter(|op| match op {
                TraceOp::Alloc { tag: t, .. } | TraceOp::Free { tag: t, .. } => *t != tag,
                TraceOp::StepBoundary => true,
            })
            .copied()
            .collect();
        Trace { ops }
    }
}

/// FFN width of a gated MLP: `8H/3` rounded up to a multiple of 256.
pub fn ffn_dim(hidden: u64) -> u64 {
    (8 * hidden).div_ceil(3 * 256) * 256
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSizes {
    pub intermediate: u64,
    pub output: u64,
    pub grad: u64,
    pub comm_buffer: u64,
}

impl TraceSizes {
    pub fn new(model: &ModelConfig, s: &Strategy) -> Self {
        let e = model.bytes_per_element;
        let tokens = s.micro_batch * model.seq_len / s.sp;
        let layer = model.layer_param_count() / s.tp;
        Self {
            intermediate: tokens * ffn_dim(model.hidden_dim) * e,
            output: tokens * model.hidden_dim * e,
            grad: e * layer / (s.ps * s.gs),
            comm_buffer: e * layer,
        }
    }
}

#[derive(Default)]
struct TraceBuilder {
    last_id: u64,
    ops: Vec<TraceOp>,
}

impl TraceBuilder {
    fn alloc(&mut self, size: u64, tag: Tag) -> u64 {
        self.last_id += 1;
        self.ops.push(TraceOp::Alloc { id: self.last_id, size, tag });
        self.last_id
    }

    fn free(&mut self, id: u64, tag: Tag) {
        self.ops.push(TraceOp::Free { id, tag });
    }

    /// Runs `body` per layer, double-buffering parameter gathers if any.
    fn pass(&mut self, order: &[u64], gather: Option<u64>, mut body: impl FnMut(&mut Self, u64)) {
        let mut current = gather.map(|g| self.alloc(g, Tag::CommBuffer));
        for (k, &l) in order.iter().enumerate() {
            let next = gather.filter(|_| k + 1 < order.len()).map(|g| self.alloc(g, Tag::CommBuffer));
            body(self, l);
            if let Some(id) = current {
                self.free(id, Tag::CommBuffer);
            }
            current = next;
        }
    }
}

/// Allocation trace of one training step on the first pipeline stage with
/// activation checkpointing.
///
/// Per micro-batch, the forward of each layer allocates the gate and up
/// projections and their product, releases all three at the checkpoint and
/// keeps the MLP output. The backward walks the layers in reverse, releasing
/// each output; during the first micro-batch's backward it also allocates
/// that layer's gradient, held until the step boundary. With parameter
/// sharding, each layer's gathered parameters live in a double buffer: the
/// next layer's gather is allocated before the current one is released.
pub fn synthesize_trace(model: &ModelConfig, s: &Strategy) -> Result<Trace> {
    if !s.recompute {
        return Err(Error::InvalidTrace(
            "trace synthesis models activation checkpointing; recompute must be enabled".into(),
        ));
    }
    let sizes = TraceSizes::new(model, s);
    let layers = s.stage_layers(model);
    let gather = (s.ps > 1).then_some(sizes.comm_buffer);
    let mut b = TraceBuilder::default();
    let forward: Vec<u64> = (0..layers).collect();
    let backward: Vec<u64> = (0..layers).rev().collect();
    let mut grads = Vec::new();
    for m in 0..s.micro_batches {
        let mut outputs = vec![0; layers as usize];
        b.pass(&forward, gather, |b, l| {
            let inter: Vec<u64> =
                (0..3).map(|_| b.alloc(sizes.intermediate, Tag::MlpIntermediate)).collect();
            for id in inter {
                b.free(id, Tag::MlpIntermediate);
            }
            outputs[l as usize] = b.alloc(sizes.output, Tag::MlpOutput);
        });
        b.pass(&backward, gather, |b, l| {
            if m == 0 {
                grads.push(b.alloc(sizes.grad, Tag::Grad));
            }
            b.free(outputs[l as usize], Tag::MlpOutput);
        });
    }
    let mut ops = b.ops;
    for id in grads {
        ops.push(TraceOp::Free { id, tag: Tag::Grad });
    }
    ops.push(TraceOp::StepBoundary);
    Ok(Trace { ops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPolicy {
    /// Comm buffers rotate through two dedicated segments outside the pool.
    pub pinned_comm_pool: bool,
    /// Pack every `k` MLP outputs into one fresh segment; 0 disables.
    pub consolidate_every_k_mlp: u64,
    /// Gradients live in one segment reserved before the step starts.
    pub grad_premap: bool,
}

impl PoolPolicy {
    pub const NONE: Self = Self { pinned_comm_pool: false, consolidate_every_k_mlp: 0, grad_premap: false };
    pub const DEFAULT_CONSOLIDATION: u64 = 3;
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self::NONE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Chunk {
    offset: u64,
    size: u64,
    owner: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Segment {
    size: u64,
    chunks: Vec<Chunk>,
    /// Only requests with this tag may be placed here.
    reserved_for: Option<Tag>,
    /// Smallest request a dedicated segment serves; free space below it is
    /// fragmented. General segments use the pool-wide threshold.
    threshold: Option<u64>,
}

impl Segment {
    fn new(size: u64, reserved: Option<(Tag, u64)>) -> Self {
        Self {
            size,
            chunks: vec![Chunk { offset: 0, size, owner: None }],
            reserved_for: reserved.map(|r| r.0),
            threshold: reserved.map(|r| r.1),
        }
    }

    fn place(&mut self, index: usize, id: u64, size: u64) {
        let chunk = self.chunks[index];
        debug_assert!(chunk.owner.is_none() && chunk.size >= size);
        self.chunks[index] = Chunk { offset: chunk.offset, size, owner: Some(id) };
        if chunk.size > size {
            self.chunks.insert(
                index + 1,
                Chunk { offset: chunk.offset + size, size: chunk.size - size, owner: None },
            );
        }
    }

    fn release(&mut self, id: u64) -> bool {
        let Some(i) = self.chunks.iter().position(|c| c.owner == Some(id)) else {
            return false;
        };
        self.chunks[i].owner = None;
        if i + 1 < self.chunks.len() && self.chunks[i + 1].owner.is_none() {
            self.chunks[i].size += self.chunks.remove(i + 1).size;
        }
        if i > 0 && self.chunks[i - 1].owner.is_none() {
            let c = self.chunks.remove(i);
            self.chunks[i - 1].size += c.size;
        }
        true
    }
}

/// Allocator occupancy; `reserved = allocated + free_cached + fragmented`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolStats {
    pub reserved: u64,
    pub allocated: u64,
    /// Free space at least as large as the fragment threshold.
    pub free_cached: u64,
    pub fragmented: u64,
    pub segments: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocatorState {
    segments: Vec<Segment>,
    threshold: u64,
}

impl AllocatorState {
    fn new(threshold: u64) -> Self {
        Self { segments: Vec::new(), threshold }
    }

    pub fn stats(&self) -> PoolStats {
        let mut st = PoolStats { segments: self.segments.len() as u64, ..PoolStats::default() };
        for seg in &self.segments {
            st.reserved += seg.size;
            let threshold = seg.threshold.unwrap_or(self.threshold);
            for c in &seg.chunks {
                match c.owner {
                    Some(_) => st.allocated += c.size,
                    None if c.size >= threshold => st.free_cached += c.size,
                    None => st.fragmented += c.size,
                }
            }
        }
        st
    }

    /// Sizes of the fragmented free chunks.
    pub fn fragments(&self) -> impl Iterator<Item = u64> + '_ {
        self.segments.iter().flat_map(move |s| {
            let threshold = s.threshold.unwrap_or(self.threshold);
            s.chunks.iter().filter(move |c| c.owner.is_none() && c.size < threshold).map(|c| c.size)
        })
    }

    /// Every segment is tiled exactly by its chunks.
    pub fn is_tiled(&self) -> bool {
        self.segments.iter().all(|s| {
            let mut at = 0;
            for c in &s.chunks {
                if c.offset != at || c.size == 0 {
                    return false;
                }
                at += c.size;
            }
            at == s.size
        })
    }

    fn best_fit(&self, size: u64) -> Option<(usize, usize)> {
        let mut best: Option<(u64, usize, usize)> = None;
        for (si, seg) in self.segments.iter().enumerate() {
            if seg.reserved_for.is_some() {
                continue;
            }
            for (ci, c) in seg.chunks.iter().enumerate() {
                if c.owner.is_none() && c.size >= size && best.is_none_or(|b| c.size < b.0) {
                    best = Some((c.size, si, ci));
                }
            }
        }
        best.map(|(_, si, ci)| (si, ci))
    }

    fn first_fit_in(&self, seg: usize, size: u64) -> Option<usize> {
        self.segments[seg].chunks.iter().position(|c| c.owner.is_none() && c.size >= size)
    }

    fn push_segment(&mut self, size: u64, reserved: Option<(Tag, u64)>) -> usize {
        self.segments.push(Segment::new(size, reserved));
        self.segments.len() - 1
    }

    fn release(&mut self, id: u64) -> bool {
        self.segments.iter_mut().any(|s| s.release(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomEvent {
    pub op_index: usize,
    pub requested: u64,
    pub reserved: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentationReport {
    pub policy: PoolPolicy,
    /// Free chunks smaller than this are fragmented.
    pub threshold: u64,
    /// Pool statistics after every trace operation.
    pub steps: Vec<PoolStats>,
    pub peak_reserved: u64,
    pub peak_allocated: u64,
    /// Largest fragmented total seen at any point of the trace.
    pub peak_fragmented: u64,
    /// For each fragment size, the most such fragments present at once.
    pub fragment_sizes: BTreeMap<u64, u64>,
    pub pinned_reserved: u64,
    pub oom_events: Vec<OomEvent>,
}

impl FragmentationReport {
    pub fn final_stats(&self) -> PoolStats {
        self.steps.last().copied().unwrap_or_default()
    }

    pub fn max_fragments_of(&self, size: u64) -> u64 {
        self.fragment_sizes.get(&size).copied().unwrap_or(0)
    }
}

/// Smallest size requested at least twice by the general pool; 0 when no
/// size recurs.
fn fragment_threshold(trace: &Trace, policy: &PoolPolicy) -> u64 {
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for op in &trace.ops {
        if let TraceOp::Alloc { size, tag, .. } = *op {
            if policy.pinned_comm_pool && tag == Tag::CommBuffer {
                continue;
            }
            *counts.entry(size).or_default() += 1;
        }
    }
    counts.into_iter().filter(|&(_, c)| c > 1).map(|(s, _)| s).min().unwrap_or(0)
}

struct Consolidation {
    segment: usize,
    remaining: u64,
}

/// Replays `trace` on a fresh allocator. Exceeding `capacity` is recorded as
/// an out-of-memory event and the allocation proceeds.
pub fn run(trace: &Trace, policy: PoolPolicy, capacity: Option<u64>) -> Result<FragmentationReport> {
    trace.validate()?;
    let threshold = fragment_threshold(trace, &policy);
    let mut pool = AllocatorState::new(threshold);
    let mut steps = Vec::with_capacity(trace.ops.len());
    let mut oom_events = Vec::new();
    let mut fragment_sizes: BTreeMap<u64, u64> = BTreeMap::new();
    let mut consolidation: Option<Consolidation> = None;
    let mut pinned: [Option<u64>; 2] = [None, None];
    let mut pinned_size = 0;
    let mut pinned_ids = HashSet::new();
    let mut next_slot = 0;

    let premap_segment = if policy.grad_premap {
        let grads: Vec<u64> = trace
            .ops
            .iter()
            .filter_map(|op| match *op {
                TraceOp::Alloc { size, tag: Tag::Grad, .. } => Some(size),
                _ => None,
            })
            .collect();
        let total: u64 = grads.iter().sum();
        let smallest = grads.iter().copied().min().unwrap_or(0);
        (total > 0).then(|| pool.push_segment(total, Some((Tag::Grad, smallest))))
    } else {
        None
    };

    for (i, op) in trace.ops.iter().enumerate() {
        match *op {
            TraceOp::Alloc { id, size, tag } => {
                if policy.pinned_comm_pool && tag == Tag::CommBuffer {
                    let slot = if pinned[next_slot].is_none() { next_slot } else { 1 - next_slot };
                    if pinned[slot].is_some() {
                        return Err(Error::InvalidTrace(format!(
                            "op {i}: more than two comm buffers live with a pinned pool"
                        )));
                    }
                    pinned[slot] = Some(id);
                    pinned_ids.insert(id);
                    pinned_size = pinned_size.max(size);
                    next_slot = 1 - slot;
                } else {
                    let placed = place_reserved(&mut pool, &mut consolidation, &policy, premap_segment, id, size, tag);
                    if !placed {
                        if let Some((si, ci)) = pool.best_fit(size) {
                            pool.segments[si].place(ci, id, size);
                        } else {
                            let reserved = pool.stats().reserved;
                            if capacity.is_some_and(|c| reserved + size > c) {
                                oom_events.push(OomEvent { op_index: i, requested: size, reserved });
                            }
                            let si = pool.push_segment(size, None);
                            pool.segments[si].place(0, id, size);
                        }
                    }
                }
            }
            TraceOp::Free { id, .. } => {
                if pinned_ids.remove(&id) {
                    for slot in pinned.iter_mut() {
                        if *slot == Some(id) {
                            *slot = None;
                        }
                    }
                } else if !pool.release(id) {
                    return Err(Error::InvalidTrace(format!("op {i}: id {id} not resident")));
                }
            }
            TraceOp::StepBoundary => {}
        }
        let st = pool.stats();
        debug_assert_eq!(st.reserved, st.allocated + st.free_cached + st.fragmented);
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        for f in pool.fragments() {
            *hist.entry(f).or_default() += 1;
        }
        for (size, n) in hist {
            let e = fragment_sizes.entry(size).or_default();
            *e = (*e).max(n);
        }
        steps.push(st);
    }

    Ok(FragmentationReport {
        policy,
        threshold,
        peak_reserved: steps.iter().map(|s| s.reserved).max().unwrap_or(0),
        peak_allocated: steps.iter().map(|s| s.allocated).max().unwrap_or(0),
        peak_fragmented: steps.iter().map(|s| s.fragmented).max().unwrap_or(0),
        steps,
        fragment_sizes,
        pinned_reserved: if pinned_size > 0 { 2 * pinned_size } else { 0 },
        oom_events,
    })
}

/// Places gradients in the premapped segment and MLP outputs in their
/// consolidation segment; returns whether the request was placed.
fn place_reserved(
    pool: &mut AllocatorState,
    consolidation: &mut Option<Consolidation>,
    policy: &PoolPolicy,
    premap: Option<usize>,
    id: u64,
    size: u64,
    tag: Tag,
) -> bool {
    match tag {
        Tag::Grad => {
            let Some(seg) = premap else { return false };
            match pool.first_fit_in(seg, size) {
                Some(ci) => {
                    pool.segments[seg].place(ci, id, size);
                    true
                }
                None => false,
            }
        }
        Tag::MlpOutput if policy.consolidate_every_k_mlp > 0 => {
            let k = policy.consolidate_every_k_mlp;
            if let Some(c) = consolidation.as_mut().filter(|c| c.remaining > 0) {
                if let Some(ci) = pool.first_fit_in(c.segment, size) {
                    pool.segments[c.segment].place(ci, id, size);
                    c.remaining -= 1;
                    return true;
                }
            }
            let seg = pool.push_segment(k * size, Some((Tag::MlpOutput, size)));
            pool.segments[seg].place(0, id, size);
            *consolidation = Some(Consolidation { segment: seg, remaining: k - 1 });
            true
        }
        _ => false,
    }
}
