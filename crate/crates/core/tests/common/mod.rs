#![allow(dead_code)]

use longseq_plan::cluster::{Axis, BandwidthProfile, ClusterConfig, Collective, ProfileEntry};
use longseq_plan::cost::{memory, ComputeModel, Estimator, EstimatorSettings};
use longseq_plan::model::ModelConfig;
use longseq_plan::overlap::LayerWorkload;
use longseq_plan::strategy::{validate, Strategy};
use rand::Rng;

/// Parameter count from an explicit list of weight matrices and vectors.
pub fn count_params(hidden: u64, layers: u64, vocab: u64) -> u64 {
    let h = hidden;
    let per_layer: u64 = [
        h * h,         // query
        h * h,         // key
        h * h,         // value
        h * h,         // attention output
        h * (4 * h),   // MLP up
        (4 * h) * h,   // MLP down
        h,             // pre-attention norm
        h,             // pre-MLP norm
    ]
    .iter()
    .sum();
    let embedding = vocab * h;
    let head = h * vocab;
    layers * per_layer + embedding + head
}

/// The feasibility rules restated directly, without the library.
pub fn feasible_by_hand(s: &Strategy, model: &ModelConfig, n_gpus: u64) -> bool {
    let t = s.tuple();
    let positive = t.iter().enumerate().all(|(i, &v)| i == 2 || v >= 1);
    positive
        && s.micro_batch * model.seq_len * s.micro_batches * s.dp == model.global_batch
        && s.dp * s.sp * s.pp == n_gpus
        && n_gpus.is_multiple_of(s.ps * s.pp * s.tp)
        && n_gpus.is_multiple_of(s.ps * s.oss * s.pp * s.tp)
        && (s.gs == 1 || s.gs == s.oss)
        && (s.tp == 1 || s.tp == s.sp)
        && s.ps <= n_gpus / (s.pp * s.tp)
        && s.oss <= n_gpus / (s.pp * s.tp * s.ps)
        && model.heads.is_multiple_of(s.sp)
        && s.pp <= model.layers
}

/// Every tuple with components in the given ranges that passes the
/// hand-written rules, with `s_sp` restricted to powers of two.
pub fn brute_force_feasible(model: &ModelConfig, cluster: &ClusterConfig, max: u64) -> Vec<Strategy> {
    let n_gpus = cluster.total_gpus;
    let batch_max = (model.global_batch / model.seq_len).max(1).min(max);
    let par_max = n_gpus.min(max);
    let mut out = Vec::new();
    for pp in 1..=par_max {
        for dp in 1..=par_max {
            for sp in (1..=par_max).filter(|v| v.is_power_of_two()) {
                if pp * dp * sp != n_gpus {
                    continue;
                }
                for b in 1..=batch_max {
                    for n in 1..=batch_max {
                        if b * model.seq_len * n * dp != model.global_batch {
                            continue;
                        }
                        for tp in 1..=par_max {
                            for ps in 1..=par_max {
                                for oss in 1..=par_max {
                                    for gs in 1..=par_max {
                                        for recompute in [false, true] {
                                            let s = Strategy {
                                                micro_batch: b,
                                                micro_batches: n,
                                                recompute,
                                                pp,
                                                dp,
                                                tp,
                                                sp,
                                                ps,
                                                gs,
                                                oss,
                                            };
                                            if feasible_by_hand(&s, model, n_gpus) {
                                                assert!(
                                                    validate(&s, model, cluster).is_feasible(),
                                                    "library rejects {s}"
                                                );
                                                out.push(s);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive enumerate, gate on memory, estimate and sort.
pub fn brute_force_top_k(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    profile: &BandwidthProfile,
    compute: &ComputeModel,
    settings: EstimatorSettings,
    slack: f64,
    k: usize,
) -> Vec<(Strategy, f64)> {
    let est = Estimator::new(model, cluster, profile, compute, settings);
    let budget = cluster.gpu_memory_capacity as f64 * slack;
    let mut all: Vec<(Strategy, f64)> = brute_force_feasible(model, cluster, u64::MAX)
        .into_iter()
        .filter(|s| memory(s, model).total() <= budget)
        .map(|s| (s, est.step_time(&s).unwrap().t_step))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.tuple().cmp(&b.0.tuple())));
    all.truncate(k);
    all
}

pub const PARTICIPANTS: [u64; 5] = [2, 4, 8, 16, 32];

/// A profile covering every collective, axis and participant count, either
/// flat or with random increasing curves.
pub fn random_profile(rng: &mut impl Rng, curved: bool) -> BandwidthProfile {
    if !curved {
        return BandwidthProfile::flat(rng.random_range(1e9..300e9));
    }
    let mut entries = Vec::new();
    for op in Collective::ALL {
        for axis in Axis::ALL {
            for p in PARTICIPANTS {
                let mut w = rng.random_range(1e8..1e10);
                for size in [1e3, 1e5, 1e7, 1e9] {
                    w *= rng.random_range(1.0..4.0);
                    entries.push(ProfileEntry {
                        op,
                        participants: p,
                        axis,
                        message_bytes: size,
                        bandwidth_bytes_per_sec: w,
                    });
                }
            }
        }
    }
    BandwidthProfile::from_entries(entries).unwrap()
}

pub struct Instance {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub profile: BandwidthProfile,
    pub top_k: usize,
    pub slack: f64,
}

/// Small model and cluster: N <= 16, B/S <= 8.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let n_gpus = [1u64, 2, 3, 4, 6, 8, 12, 16][rng.random_range(0..8)];
    let gpn_choices: Vec<u64> = (1..=n_gpus).filter(|d| n_gpus.is_multiple_of(*d)).collect();
    let gpus_per_node = gpn_choices[rng.random_range(0..gpn_choices.len())];
    let hidden = [32u64, 64, 128][rng.random_range(0..3)];
    let heads = [1u64, 2, 4, 8, 16][rng.random_range(0..5)];
    let seq_len = [64u64, 128, 256][rng.random_range(0..3)];
    let model = ModelConfig {
        hidden_dim: hidden,
        layers: rng.random_range(1..=4),
        heads,
        vocab: [64u64, 128, 256][rng.random_range(0..3)],
        seq_len,
        global_batch: seq_len * rng.random_range(1..=8),
        bytes_per_element: 2,
    };
    let serial = memory(&Strategy::serial(), &model).total();
    let capacity = (serial * rng.random_range(0.02..1.5)).max(1.0) as u64;
    let curved = rng.random_bool(0.5);
    Instance {
        model,
        cluster: ClusterConfig::new(n_gpus, gpus_per_node, capacity),
        profile: random_profile(rng, curved),
        top_k: rng.random_range(1..=10),
        slack: if rng.random_bool(0.5) { 1.0 } else { 1.1 },
    }
}

pub fn random_workloads(rng: &mut impl Rng) -> Vec<LayerWorkload> {
    let layers = rng.random_range(1..=12);
    (0..layers)
        .map(|_| {
            let mut t = || if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..20.0) };
            LayerWorkload {
                forward: t(),
                grad_input: t(),
                grad_weight: t(),
                gather_bytes: t(),
                reduce_scatter_bytes: t(),
            }
        })
        .collect()
}
