//! Cluster topology and profiled collective bandwidth.
//!
//! Communication cost is bandwidth-only, `τ(o, v, p) = v / w(o, v, p)`, where
//! `w` is read off a profiled effective-bandwidth curve. Small-message latency
//! shows up as the bandwidth collapse at the low end of each curve.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
}

impl Collective {
    pub const ALL: [Collective; 4] = [
        Collective::AllReduce,
        Collective::AllGather,
        Collective::ReduceScatter,
        Collective::AllToAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Collective::AllReduce => "all-reduce",
            Collective::AllGather => "all-gather",
            Collective::ReduceScatter => "reduce-scatter",
            Collective::AllToAll => "all-to-all",
        }
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// Device-mesh axis a collective runs over: NVLink inside a node or the
/// network between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Intra,
    Inter,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::Intra, Axis::Inter];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Axis::Intra => "intra",
            Axis::Inter => "inter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub total_gpus: u64,
    pub gpus_per_node: u64,
    #[serde(rename = "gpu_memory_capacity_bytes")]
    pub gpu_memory_capacity: u64,
}

impl ClusterConfig {
    pub fn new(total_gpus: u64, gpus_per_node: u64, gpu_memory_capacity: u64) -> Self {
        Self { total_gpus, gpus_per_node, gpu_memory_capacity }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.total_gpus == 0 {
            errors.push("total_gpus must be positive".to_string());
        }
        if self.gpus_per_node == 0 {
            errors.push("gpus_per_node must be positive".to_string());
        }
        if self.gpu_memory_capacity == 0 {
            errors.push("gpu_memory_capacity_bytes must be positive".to_string());
        }
        if self.total_gpus > 0
            && self.gpus_per_node > 0
            && !self.total_gpus.is_multiple_of(self.gpus_per_node)
        {
            errors.push(format!(
                "total_gpus ({}) must be divisible by gpus_per_node ({})",
                self.total_gpus, self.gpus_per_node
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCluster(errors))
        }
    }

    pub fn nodes(&self) -> u64 {
        self.total_gpus / self.gpus_per_node
    }
}

/// One profiled sample: collective `op` over `participants` GPUs on `axis`
/// moved `message_bytes` at `bandwidth_bytes_per_sec`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub op: Collective,
    pub participants: u64,
    pub axis: Axis,
    pub message_bytes: f64,
    pub bandwidth_bytes_per_sec: f64,
}

pub const PROFILE_HEADER: [&str; 5] =
    ["op", "participants", "axis", "message_bytes", "bandwidth_bytes_per_sec"];

/// `(message_bytes, bandwidth)` samples sorted by message size.
type Curve = Vec<(f64, f64)>;

/// Immutable set of effective-bandwidth curves keyed by collective, axis and
/// participant count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandwidthProfile {
    curves: BTreeMap<(Collective, Axis), BTreeMap<u64, Curve>>,
}

impl BandwidthProfile {
    pub fn from_entries(entries: impl IntoIterator<Item = ProfileEntry>) -> Result<Self> {
        let mut curves: BTreeMap<(Collective, Axis), BTreeMap<u64, Curve>> = BTreeMap::new();
        for e in entries {
            if e.participants == 0 {
                return Err(Error::InvalidProfile(format!(
                    "{} {}: participants must be positive",
                    e.op, e.axis
                )));
            }
            if !(e.message_bytes.is_finite() && e.message_bytes > 0.0) {
                return Err(Error::InvalidProfile(format!(
                    "{} p={} {}: message_bytes must be positive, got {}",
                    e.op, e.participants, e.axis, e.message_bytes
                )));
            }
            if !(e.bandwidth_bytes_per_sec.is_finite() && e.bandwidth_bytes_per_sec > 0.0) {
                return Err(Error::InvalidProfile(format!(
                    "{} p={} {}: bandwidth must be positive, got {}",
                    e.op, e.participants, e.axis, e.bandwidth_bytes_per_sec
                )));
            }
            curves
                .entry((e.op, e.axis))
                .or_default()
                .entry(e.participants)
                .or_default()
                .push((e.message_bytes, e.bandwidth_bytes_per_sec));
        }
        for ((op, axis), by_p) in &mut curves {
            for (p, curve) in by_p.iter_mut() {
                curve.sort_by(|a, b| a.0.total_cmp(&b.0));
                if let Some(w) = curve.windows(2).find(|w| w[0].0 == w[1].0) {
                    return Err(Error::InvalidProfile(format!(
                        "{op} p={p} {axis}: duplicate sample at {} bytes",
                        w[0].0
                    )));
                }
            }
        }
        Ok(Self { curves })
    }

    /// The same bandwidth for every collective, axis and message size.
    pub fn flat(bandwidth: f64) -> Self {
        Self::flat_per_axis(bandwidth, bandwidth)
    }

    pub fn flat_per_axis(intra: f64, inter: f64) -> Self {
        let entries = Collective::ALL.into_iter().flat_map(|op| {
            [(Axis::Intra, intra), (Axis::Inter, inter)].into_iter().map(move |(axis, w)| {
                ProfileEntry {
                    op,
                    participants: 2,
                    axis,
                    message_bytes: 1.0,
                    bandwidth_bytes_per_sec: w,
                }
            })
        });
        Self::from_entries(entries).expect("flat profile is well formed")
    }

    /// Saturating curves `w(v) = peak·v / (v + half)` shaped like NCCL
    /// measurements on an 8-GPU NVLink node with InfiniBand between nodes.
    /// Synthetic; meant for examples and tests, not for real planning.
    pub fn synthetic_a100() -> Self {
        let intra_peak = |op| match op {
            Collective::AllGather | Collective::ReduceScatter => 150e9,
            Collective::AllReduce => 90e9,
            Collective::AllToAll => 120e9,
        };
        let inter_peak = |op| match op {
            Collective::AllGather | Collective::ReduceScatter => 20e9,
            Collective::AllReduce => 11e9,
            Collective::AllToAll => 12e9,
        };
        let sizes: Vec<f64> = (10..=32).step_by(2).map(|k| (1u64 << k) as f64).collect();
        let mut entries = Vec::new();
        for op in Collective::ALL {
            for p in [2u64, 4, 8] {
                let peak = intra_peak(op) * (1.0 - 0.03 * (p as f64).log2());
                for &v in &sizes {
                    entries.push(ProfileEntry {
                        op,
                        participants: p,
                        axis: Axis::Intra,
                        message_bytes: v,
                        bandwidth_bytes_per_sec: peak * v / (v + 4.0 * 1048576.0),
                    });
                }
            }
            for p in [2u64, 4, 8, 16, 32, 64, 128] {
                let peak = inter_peak(op) / (1.0 + 0.08 * (p as f64).log2());
                for &v in &sizes {
                    entries.push(ProfileEntry {
                        op,
                        participants: p,
                        axis: Axis::Inter,
                        message_bytes: v,
                        bandwidth_bytes_per_sec: peak * v / (v + 16.0 * 1048576.0),
                    });
                }
            }
        }
        Self::from_entries(entries).expect("synthetic profile is well formed")
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_csv(file).map_err(|e| match e {
            Error::Csv(e) => Error::Parse { path: path.to_path_buf(), message: e.to_string() },
            other => other,
        })
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().ne(PROFILE_HEADER.iter().copied()) {
            return Err(Error::InvalidProfile(format!(
                "expected header `{}`, got `{}`",
                PROFILE_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let rows = rdr.deserialize::<ProfileEntry>().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_entries(rows)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for e in self.entries() {
            wtr.serialize(e)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = ProfileEntry> + '_ {
        self.curves.iter().flat_map(|(&(op, axis), by_p)| {
            by_p.iter().flat_map(move |(&participants, curve)| {
                curve.iter().map(move |&(message_bytes, bandwidth_bytes_per_sec)| ProfileEntry {
                    op,
                    participants,
                    axis,
                    message_bytes,
                    bandwidth_bytes_per_sec,
                })
            })
        })
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// `(op, axis, participants)` of every curve in the profile.
    pub fn curve_keys(&self) -> impl Iterator<Item = (Collective, Axis, u64)> + '_ {
        self.curves
            .iter()
            .flat_map(|(&(op, axis), by_p)| by_p.keys().map(move |&p| (op, axis, p)))
    }

    /// Effective bandwidth of `op` over `participants` GPUs on `axis` at
    /// message size `bytes`.
    ///
    /// Interpolates linearly in `(log v, log w)` between bracketing samples
    /// and clamps to the end samples outside the profiled range. When no
    /// curve exists for `participants`, the nearest participant count on the
    /// same axis is used, ties going to the larger count.
    pub fn lookup_bandwidth(
        &self,
        op: Collective,
        participants: u64,
        axis: Axis,
        bytes: f64,
    ) -> Result<f64> {
        let by_p = self.curves.get(&(op, axis)).ok_or(Error::MissingCurve { op, axis })?;
        let curve = match by_p.get(&participants) {
            Some(c) => c,
            None => {
                by_p.iter()
                    .min_by_key(|(&p, _)| (p.abs_diff(participants), std::cmp::Reverse(p)))
                    .ok_or(Error::MissingCurve { op, axis })?
                    .1
            }
        };
        Ok(interpolate(curve, bytes))
    }

    /// `τ = v / w`; zero for an empty message or a single participant.
    pub fn collective_time(
        &self,
        op: Collective,
        bytes: f64,
        participants: u64,
        axis: Axis,
    ) -> Result<f64> {
        if participants <= 1 || bytes <= 0.0 {
            return Ok(0.0);
        }
        Ok(bytes / self.lookup_bandwidth(op, participants, axis, bytes)?)
    }
}

fn interpolate(curve: &[(f64, f64)], bytes: f64) -> f64 {
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    if bytes <= first.0 {
        return first.1;
    }
    if bytes >= last.0 {
        return last.1;
    }
    let hi = curve.partition_point(|&(v, _)| v < bytes);
    let (v1, w1) = curve[hi];
    if v1 == bytes {
        return w1;
    }
    let (v0, w0) = curve[hi - 1];
    if w0 == w1 {
        return w0;
    }
    let t = (bytes.ln() - v0.ln()) / (v1.ln() - v0.ln());
    let w = (w0.ln() + t * (w1.ln() - w0.ln())).exp();
    // exp/ln round-off must not step outside the bracket
    w.clamp(w0.min(w1), w0.max(w1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(op: Collective, p: u64, axis: Axis, v: f64, w: f64) -> ProfileEntry {
        ProfileEntry { op, participants: p, axis, message_bytes: v, bandwidth_bytes_per_sec: w }
    }

    fn two_point() -> BandwidthProfile {
        BandwidthProfile::from_entries([
            entry(Collective::AllGather, 8, Axis::Intra, 1024.0, 10e9),
            entry(Collective::AllGather, 8, Axis::Intra, 1048576.0, 40e9),
            entry(Collective::AllGather, 8, Axis::Intra, 4194304.0, 50e9),
        ])
        .unwrap()
    }

    #[test]
    fn exact_hit() {
        let p = two_point();
        let w = p.lookup_bandwidth(Collective::AllGather, 8, Axis::Intra, 1048576.0).unwrap();
        assert_eq!(w, 40e9);
    }

    #[test]
    fn clamps_outside_samples() {
        let p = two_point();
        assert_eq!(p.lookup_bandwidth(Collective::AllGather, 8, Axis::Intra, 1.0).unwrap(), 10e9);
        assert_eq!(p.lookup_bandwidth(Collective::AllGather, 8, Axis::Intra, 1e12).unwrap(), 50e9);
    }

    #[test]
    fn geometric_midpoint_is_log_log_midpoint() {
        // sqrt(1024 * 1048576) = 32768; sqrt(10e9 * 40e9) = 20e9
        let p = two_point();
        let w = p.lookup_bandwidth(Collective::AllGather, 8, Axis::Intra, 32768.0).unwrap();
        assert!((w - 20e9).abs() / 20e9 < 1e-12, "{w}");
    }

    #[test]
    fn nearest_participants_ties_go_up() {
        let p = BandwidthProfile::from_entries([
            entry(Collective::AllReduce, 2, Axis::Inter, 1.0, 1e9),
            entry(Collective::AllReduce, 6, Axis::Inter, 1.0, 3e9),
        ])
        .unwrap();
        let w = |n| p.lookup_bandwidth(Collective::AllReduce, n, Axis::Inter, 10.0).unwrap();
        assert_eq!(w(3), 1e9);
        assert_eq!(w(4), 3e9);
        assert_eq!(w(100), 3e9);
    }

    #[test]
    fn missing_curve() {
        let err = two_point().lookup_bandwidth(Collective::AllToAll, 8, Axis::Intra, 1.0);
        assert!(matches!(err, Err(Error::MissingCurve { .. })));
    }

    #[test]
    fn degenerate_collectives_are_free() {
        let p = BandwidthProfile::flat(100e9);
        assert_eq!(p.collective_time(Collective::AllReduce, 0.0, 8, Axis::Inter).unwrap(), 0.0);
        assert_eq!(p.collective_time(Collective::AllReduce, 1e9, 1, Axis::Inter).unwrap(), 0.0);
        let t = p.collective_time(Collective::AllReduce, 1e9, 8, Axis::Inter).unwrap();
        assert_eq!(t, 0.01);
    }

    #[test]
    fn rejects_bad_rows() {
        let bad = [entry(Collective::AllReduce, 2, Axis::Intra, 8.0, 0.0)];
        assert!(BandwidthProfile::from_entries(bad).is_err());
        let dup = [
            entry(Collective::AllReduce, 2, Axis::Intra, 8.0, 1.0),
            entry(Collective::AllReduce, 2, Axis::Intra, 8.0, 2.0),
        ];
        assert!(BandwidthProfile::from_entries(dup).is_err());
    }

    #[test]
    fn csv_header_is_checked() {
        let text = "op,participants,axis,bytes,bw\nall-reduce,2,intra,8,1\n";
        assert!(matches!(
            BandwidthProfile::read_csv(text.as_bytes()),
            Err(Error::InvalidProfile(_))
        ));
        let text = "op,participants,axis,message_bytes,bandwidth_bytes_per_sec\n\
                    all-reduce,2,intra,8,1e9\nall-to-all,16,inter,1048576,2.5e10\n";
        let p = BandwidthProfile::read_csv(text.as_bytes()).unwrap();
        assert_eq!(p.entries().count(), 2);
    }

    #[test]
    fn csv_round_trip() {
        let p = BandwidthProfile::synthetic_a100();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(BandwidthProfile::read_csv(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn cluster_validation() {
        assert!(ClusterConfig::new(16, 8, 80).validate().is_ok());
        assert!(ClusterConfig::new(12, 8, 80).validate().is_err());
        assert!(ClusterConfig::new(0, 8, 0).validate().is_err());
    }
}
