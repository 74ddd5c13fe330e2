//! Two-stream event simulation of parameter-gather and gradient
//! reduce-scatter overlap with layer computation.
//!
//! One compute stream and one communication stream, each executing its
//! events in issue order. Contention between concurrent kernels is not
//! modelled; that is what the slowdown ratio of [`OverlapModel`] abstracts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::{Axis, BandwidthProfile, ClusterConfig, Collective};
use crate::cost::{comp_time_layer, ComputeModel, OverlapModel};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::placement::{place_groups, GroupKind};
use crate::strategy::Strategy;

/// Work of one transformer layer for one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerWorkload {
    /// Forward compute, seconds.
    pub forward: f64,
    /// Backward gradient with respect to the layer input, seconds.
    pub grad_input: f64,
    /// Backward gradient with respect to the weights, seconds.
    pub grad_weight: f64,
    pub gather_bytes: f64,
    pub reduce_scatter_bytes: f64,
}

impl LayerWorkload {
    /// Backward costs `backward_ratio` times the forward, split evenly
    /// between the input and weight gradients.
    pub fn from_forward(forward: f64, comm_bytes: f64, backward_ratio: f64) -> Self {
        let half = forward * backward_ratio / 2.0;
        Self {
            forward,
            grad_input: half,
            grad_weight: half,
            gather_bytes: comm_bytes,
            reduce_scatter_bytes: comm_bytes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("forward", self.forward),
            ("grad_input", self.grad_input),
            ("grad_weight", self.grad_weight),
            ("gather_bytes", self.gather_bytes),
            ("reduce_scatter_bytes", self.reduce_scatter_bytes),
        ];
        let bad: Vec<String> = fields
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(k, v)| format!("{k} must be non-negative, got {v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// How communication bytes become seconds.
#[derive(Debug, Clone, Copy)]
pub enum Link<'a> {
    /// Fixed bandwidth in bytes per second.
    Constant(f64),
    Profiled { profile: &'a BandwidthProfile, axis: Axis, participants: u64 },
}

impl Link<'_> {
    fn time(&self, op: Collective, bytes: f64) -> Result<f64> {
        match *self {
            Link::Constant(w) => Ok(if bytes > 0.0 { bytes / w } else { 0.0 }),
            Link::Profiled { profile, axis, participants } => {
                profile.collective_time(op, bytes, participants, axis)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardPolicy {
    Naive,
    #[default]
    InterLayerPrefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardPolicy {
    Fused,
    #[default]
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Gather,
    Forward,
    GradInput,
    GradWeight,
    Backward,
    ReduceScatter,
}

impl EventKind {
    pub fn stream(self) -> Stream {
        match self {
            EventKind::Gather | EventKind::ReduceScatter => Stream::Comm,
            _ => Stream::Compute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stream: Stream,
    pub kind: EventKind,
    pub layer: usize,
    pub start: f64,
    pub end: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<Event>,
    pub makespan: f64,
}

impl Timeline {
    fn busy(&self, stream: Stream) -> f64 {
        self.events.iter().filter(|e| e.stream == stream).map(Event::duration).sum()
    }

    pub fn compute_time(&self) -> f64 {
        self.busy(Stream::Compute)
    }

    pub fn comm_time(&self) -> f64 {
        self.busy(Stream::Comm)
    }

    /// Communication not hidden behind computation.
    pub fn exposed_comm(&self) -> f64 {
        (self.makespan - self.compute_time()).max(0.0)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.events {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-event issue latency; every event starts this long after it becomes
/// ready. Zero by default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimSettings {
    pub issue_delay: f64,
}

struct Sim {
    delay: f64,
    compute_free: f64,
    comm_free: f64,
    events: Vec<Event>,
}

impl Sim {
    fn new(delay: f64) -> Self {
        Self { delay, compute_free: 0.0, comm_free: 0.0, events: Vec::new() }
    }

    fn run(&mut self, kind: EventKind, layer: usize, ready: f64, duration: f64) -> Event {
        let stream = kind.stream();
        let free = match stream {
            Stream::Compute => &mut self.compute_free,
            Stream::Comm => &mut self.comm_free,
        };
        let start = free.max(ready) + self.delay;
        let end = start + duration;
        *free = end;
        let e = Event { stream, kind, layer, start, end };
        self.events.push(e);
        e
    }

    fn finish(self) -> Timeline {
        let makespan = self.events.iter().map(|e| e.end).fold(0.0, f64::max);
        Timeline { events: self.events, makespan }
    }
}

fn check(workloads: &[LayerWorkload]) -> Result<()> {
    if workloads.is_empty() {
        return Err(Error::Validation(vec!["at least one layer is required".into()]));
    }
    workloads.iter().try_for_each(LayerWorkload::validate)
}

/// Forward pass over the layers in order.
///
/// `Naive` gathers each layer's parameters and then computes, serially.
/// `InterLayerPrefetch` issues the gather of layer `i+1` when the compute of
/// layer `i` starts; the first gather is always exposed.
pub fn simulate_forward(
    workloads: &[LayerWorkload],
    policy: ForwardPolicy,
    link: Link<'_>,
    settings: SimSettings,
) -> Result<Timeline> {
    check(workloads)?;
    let mut sim = Sim::new(settings.issue_delay);
    match policy {
        ForwardPolicy::Naive => {
            let mut t = 0.0;
            for (i, w) in workloads.iter().enumerate() {
                let g = sim.run(EventKind::Gather, i, t, link.time(Collective::AllGather, w.gather_bytes)?);
                t = sim.run(EventKind::Forward, i, g.end, w.forward).end;
            }
        }
        ForwardPolicy::InterLayerPrefetch => {
            let first = link.time(Collective::AllGather, workloads[0].gather_bytes)?;
            let mut gathered = sim.run(EventKind::Gather, 0, 0.0, first).end;
            for (i, w) in workloads.iter().enumerate() {
                let c = sim.run(EventKind::Forward, i, gathered, w.forward);
                if let Some(next) = workloads.get(i + 1) {
                    let g = link.time(Collective::AllGather, next.gather_bytes)?;
                    gathered = sim.run(EventKind::Gather, i + 1, c.start - sim.delay, g).end;
                }
            }
        }
    }
    Ok(sim.finish())
}

/// Backward pass over the layers in reverse order.
///
/// `Fused`: per layer, gather, then one backward event, then reduce-scatter,
/// serially. `Selective`: the weight gradient of layer `i` runs first, and
/// as it starts the gather of layer `i-1` is issued; the reduce-scatter of
/// layer `i` follows on the comm stream once the weight gradient is done,
/// overlapping the input gradient of layer `i` and the work of layer `i-1`.
pub fn simulate_backward(
    workloads: &[LayerWorkload],
    policy: BackwardPolicy,
    link: Link<'_>,
    settings: SimSettings,
) -> Result<Timeline> {
    check(workloads)?;
    let mut sim = Sim::new(settings.issue_delay);
    let last = workloads.len() - 1;
    match policy {
        BackwardPolicy::Fused => {
            let mut t = 0.0;
            for i in (0..=last).rev() {
                let w = &workloads[i];
                let g = sim.run(EventKind::Gather, i, t, link.time(Collective::AllGather, w.gather_bytes)?);
                let c = sim.run(EventKind::Backward, i, g.end, w.grad_input + w.grad_weight);
                let rs = link.time(Collective::ReduceScatter, w.reduce_scatter_bytes)?;
                t = sim.run(EventKind::ReduceScatter, i, c.end, rs).end;
            }
        }
        BackwardPolicy::Selective => {
            let first = link.time(Collective::AllGather, workloads[last].gather_bytes)?;
            let mut gathered = sim.run(EventKind::Gather, last, 0.0, first).end;
            for i in (0..=last).rev() {
                let w = &workloads[i];
                let gw = sim.run(EventKind::GradWeight, i, gathered, w.grad_weight);
                if i > 0 {
                    let g = link.time(Collective::AllGather, workloads[i - 1].gather_bytes)?;
                    gathered = sim.run(EventKind::Gather, i - 1, gw.start - sim.delay, g).end;
                }
                sim.run(EventKind::GradInput, i, gw.end, w.grad_input);
                let rs = link.time(Collective::ReduceScatter, w.reduce_scatter_bytes)?;
                sim.run(EventKind::ReduceScatter, i, gw.end, rs);
            }
        }
    }
    Ok(sim.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatio {
    pub first_layer: usize,
    pub last_layer: usize,
    pub span: f64,
    pub compute: f64,
    pub comm: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticComparison {
    pub slowdown_ratio: f64,
    pub makespan: f64,
    pub analytic: f64,
    /// `makespan / (ℛ·max(Σcomp, Σcomm))`; 1 for an empty timeline.
    pub ratio: f64,
    pub groups: Vec<GroupRatio>,
}

fn ratio(measured: f64, analytic: f64) -> f64 {
    if analytic > 0.0 {
        measured / analytic
    } else {
        1.0
    }
}

/// Compares a simulated timeline with `ℛ·max(comp, comm)`, overall and per
/// group of `group_layers` consecutive layers.
pub fn compare_to_analytic(
    timeline: &Timeline,
    model: &OverlapModel,
    group_layers: usize,
) -> AnalyticComparison {
    let analytic = model.overlapped(timeline.comm_time(), timeline.compute_time());
    let layers = timeline.events.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    let size = group_layers.max(1);
    let groups = (0..layers)
        .step_by(size)
        .map(|first| {
            let last = (first + size - 1).min(layers - 1);
            let evs: Vec<_> = timeline
                .events
                .iter()
                .filter(|e| (first..=last).contains(&e.layer))
                .collect();
            let start = evs.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
            let end = evs.iter().map(|e| e.end).fold(0.0, f64::max);
            let span = if evs.is_empty() { 0.0 } else { end - start };
            let sum = |s| evs.iter().filter(|e| e.stream == s).map(|e| e.duration()).sum::<f64>();
            let (compute, comm) = (sum(Stream::Compute), sum(Stream::Comm));
            GroupRatio {
                first_layer: first,
                last_layer: last,
                span,
                compute,
                comm,
                ratio: ratio(span, model.overlapped(comm, compute)),
            }
        })
        .collect();
    AnalyticComparison {
        slowdown_ratio: model.slowdown_ratio,
        makespan: timeline.makespan,
        analytic,
        ratio: ratio(timeline.makespan, analytic),
        groups,
    }
}

/// Per-layer workloads of one pipeline stage under a strategy, with the
/// parameter gather priced over the parameter-sharding group.
pub fn stage_workloads(
    s: &Strategy,
    model: &ModelConfig,
    compute: &ComputeModel,
) -> Result<Vec<LayerWorkload>> {
    let forward = comp_time_layer(s, model, compute)? / (3 + s.recompute_flag()) as f64;
    let bytes = if s.ps > 1 {
        model.bytes_per_element as f64 * model.layer_param_count() as f64 / s.tp as f64
    } else {
        0.0
    };
    Ok(vec![LayerWorkload::from_forward(forward, bytes, 2.0); s.stage_layers(model) as usize])
}

/// The link the parameter-sharding group of `s` communicates over.
pub fn strategy_link<'a>(
    s: &Strategy,
    cluster: &ClusterConfig,
    profile: &'a BandwidthProfile,
) -> Link<'a> {
    let placement = place_groups(cluster, s);
    Link::Profiled { profile, axis: placement.axis(GroupKind::Ps), participants: s.ps }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: Link<'static> = Link::Constant(1.0);

    fn layers(n: usize, f: f64, comm: f64) -> Vec<LayerWorkload> {
        vec![LayerWorkload::from_forward(f, comm, 2.0); n]
    }

    #[test]
    fn forward_hand_example() {
        let w = layers(2, 10.0, 10.0);
        let naive = simulate_forward(&w, ForwardPolicy::Naive, UNIT, SimSettings::default()).unwrap();
        let pre = simulate_forward(&w, ForwardPolicy::InterLayerPrefetch, UNIT, SimSettings::default()).unwrap();
        assert_eq!(naive.makespan, 40.0);
        assert_eq!(pre.makespan, 30.0);
    }

    #[test]
    fn backward_hand_example() {
        let w = layers(2, 10.0, 10.0);
        let fused = simulate_backward(&w, BackwardPolicy::Fused, UNIT, SimSettings::default()).unwrap();
        let sel = simulate_backward(&w, BackwardPolicy::Selective, UNIT, SimSettings::default()).unwrap();
        assert_eq!(fused.makespan, 80.0);
        assert_eq!(sel.makespan, 50.0);
    }

    #[test]
    fn no_comm_is_pure_compute() {
        let w = layers(3, 2.0, 0.0);
        for p in [ForwardPolicy::Naive, ForwardPolicy::InterLayerPrefetch] {
            assert_eq!(simulate_forward(&w, p, UNIT, SimSettings::default()).unwrap().makespan, 6.0);
        }
        for p in [BackwardPolicy::Fused, BackwardPolicy::Selective] {
            assert_eq!(simulate_backward(&w, p, UNIT, SimSettings::default()).unwrap().makespan, 12.0);
        }
    }

    #[test]
    fn single_layer_forward_policies_agree() {
        let w = layers(1, 3.0, 5.0);
        let a = simulate_forward(&w, ForwardPolicy::Naive, UNIT, SimSettings::default()).unwrap();
        let b = simulate_forward(&w, ForwardPolicy::InterLayerPrefetch, UNIT, SimSettings::default()).unwrap();
        assert_eq!(a.makespan, b.makespan);
    }

    #[test]
    fn single_layer_selective_exposes_rs_beyond_grad_input() {
        let w = [LayerWorkload {
            forward: 1.0,
            grad_input: 2.0,
            grad_weight: 2.0,
            gather_bytes: 1.0,
            reduce_scatter_bytes: 5.0,
        }];
        let t = simulate_backward(&w, BackwardPolicy::Selective, UNIT, SimSettings::default()).unwrap();
        assert_eq!(t.makespan, 1.0 + 2.0 + 5.0);
    }

    #[test]
    fn empty_and_negative_rejected() {
        assert!(simulate_forward(&[], ForwardPolicy::Naive, UNIT, SimSettings::default()).is_err());
        let w = [LayerWorkload::from_forward(-1.0, 0.0, 2.0)];
        assert!(simulate_backward(&w, BackwardPolicy::Fused, UNIT, SimSettings::default()).is_err());
    }

    #[test]
    fn issue_delay_slows_naive_more() {
        let w = layers(4, 10.0, 10.0);
        let s = SimSettings { issue_delay: 1.0 };
        let naive = simulate_forward(&w, ForwardPolicy::Naive, UNIT, s).unwrap();
        let pre = simulate_forward(&w, ForwardPolicy::InterLayerPrefetch, UNIT, s).unwrap();
        assert_eq!(naive.makespan, 88.0);
        assert!(pre.makespan < naive.makespan);
    }

    #[test]
    fn comparison_comm_free_is_one() {
        let w = layers(4, 1.0, 0.0);
        let t = simulate_backward(&w, BackwardPolicy::Selective, UNIT, SimSettings::default()).unwrap();
        let c = compare_to_analytic(&t, &OverlapModel::new(1.0).unwrap(), 2);
        assert_eq!(c.ratio, 1.0);
        assert_eq!(c.groups.len(), 2);
    }

    #[test]
    fn csv_has_header() {
        let w = layers(1, 1.0, 1.0);
        let t = simulate_forward(&w, ForwardPolicy::Naive, UNIT, SimSettings::default()).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("stream,kind,layer,start,end\ncomm,gather,0,0.0,1.0\n"));
    }
}
