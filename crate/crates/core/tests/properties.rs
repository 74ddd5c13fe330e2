mod common;

use common::*;
use longseq_plan::cluster::ClusterConfig;
use longseq_plan::cost::{fwd_bwd_time, memory, OverlapModel};
use longseq_plan::mempool::{run, synthesize_trace, PoolPolicy, Tag, TraceOp};
use longseq_plan::model::ModelConfig;
use longseq_plan::overlap::{
    simulate_backward, simulate_forward, BackwardPolicy, EventKind, ForwardPolicy, Link,
    SimSettings, Stream, Timeline,
};
use longseq_plan::strategy::Strategy as Plan;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_strategy() -> impl Strategy<Value = (ModelConfig, ClusterConfig, Vec<Plan>)> {
    (0u64..1_000).prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let feasible = brute_force_feasible(&inst.model, &inst.cluster, u64::MAX);
        (inst.model, inst.cluster, feasible)
    })
}

fn index(s: &Plan, field: usize) -> u64 {
    s.tuple()[field]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn memory_is_monotone_in_each_divisor((model, _cluster, feasible) in model_strategy()) {
        // tuple positions: 3 pp, 5 tp, 6 sp, 7 ps, 8 gs, 9 oss
        for a in &feasible {
            for b in &feasible {
                let diff: Vec<usize> = (0..10).filter(|&i| index(a, i) != index(b, i)).collect();
                let (ma, mb) = (memory(a, &model), memory(b, &model));
                let grows = |i: usize| index(b, i) > index(a, i);
                match diff.as_slice() {
                    [7] if grows(7) => {
                        prop_assert!(mb.params <= ma.params);
                        prop_assert!(mb.grads <= ma.grads);
                        prop_assert!(mb.optstate <= ma.optstate);
                    }
                    [8] if grows(8) => prop_assert!(mb.grads <= ma.grads),
                    [9] if grows(9) => prop_assert!(mb.optstate <= ma.optstate),
                    [5] if grows(5) => {
                        prop_assert!(mb.params <= ma.params);
                        prop_assert!(mb.optstate <= ma.optstate);
                    }
                    _ => {}
                }
                // s_sp and s_pp cannot change alone under a fixed GPU count, so
                // compare plans that differ only in them and the derived s_dp, n.
                let same_rest = [0, 2, 5, 7, 8, 9].iter().all(|&i| index(a, i) == index(b, i));
                if same_rest && a.pp == b.pp && b.sp > a.sp && a.micro_batches == b.micro_batches {
                    prop_assert!(mb.act <= ma.act);
                }
                if same_rest && a.sp == b.sp && b.pp > a.pp && a.micro_batches == b.micro_batches {
                    prop_assert!(mb.params <= ma.params);
                    prop_assert!(mb.act <= ma.act);
                }
            }
        }
    }

    #[test]
    fn memory_reduces_to_unsharded_closed_form((model, _cluster, feasible) in model_strategy()) {
        let psi = 12 * model.hidden_dim * model.hidden_dim + 2 * model.hidden_dim;
        for s in feasible.iter().filter(|s| s.ps == 1 && s.gs == 1 && s.oss == 1 && s.micro_batches >= s.pp) {
            let m = memory(s, &model);
            let states = (psi * model.layers) as f64 / (s.pp * s.tp) as f64;
            let a = s.recompute as u64;
            let act = ((34 - 32 * a) * s.micro_batch * model.seq_len * model.hidden_dim * model.layers) as f64
                / s.sp as f64;
            prop_assert_eq!(m.params, 2.0 * states);
            prop_assert_eq!(m.grads, 2.0 * states);
            prop_assert_eq!(m.optstate, 6.0 * states);
            prop_assert!((m.act - act).abs() <= 1e-9 * act);
        }
    }

    #[test]
    fn bubble_ratio(n in 1u64..64, pp in 1u64..16, extra in 0u64..64, opro in 1e-6f64..1.0) {
        let layers = pp + extra;
        let r = fwd_bwd_time(n, pp, layers, 0.0, opro) / fwd_bwd_time(n, 1, layers, 0.0, opro);
        let want = ((n + pp - 1) * layers.div_ceil(pp)) as f64 / (n * layers) as f64;
        prop_assert!((r - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn opro_brackets(comp in 0.0f64..10.0, comm in 0.0f64..10.0, ratio in 1.0f64..2.0) {
        let o = OverlapModel::new(ratio).unwrap();
        let base = o.overlapped(comm, comp) / ratio;
        prop_assert!(comp <= base + 1e-12);
        prop_assert!(base <= comp + comm + 1e-12);
    }

    #[test]
    fn timelines_respect_streams_and_dependencies(seed in 0u64..10_000, delay in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_workloads(&mut rng);
        let settings = SimSettings { issue_delay: delay };
        let link = Link::Constant(1.0);
        let runs = [
            simulate_forward(&w, ForwardPolicy::Naive, link, settings).unwrap(),
            simulate_forward(&w, ForwardPolicy::InterLayerPrefetch, link, settings).unwrap(),
            simulate_backward(&w, BackwardPolicy::Fused, link, settings).unwrap(),
            simulate_backward(&w, BackwardPolicy::Selective, link, settings).unwrap(),
        ];
        for t in &runs {
            check_exclusive(t, Stream::Compute)?;
            check_exclusive(t, Stream::Comm)?;
            for e in t.events.iter().filter(|e| e.stream == Stream::Compute) {
                let gather = t.events.iter().find(|g| g.kind == EventKind::Gather && g.layer == e.layer).unwrap();
                prop_assert!(gather.end <= e.start + 1e-12);
            }
            prop_assert!(t.events.iter().all(|e| e.end >= e.start));
        }
    }

    #[test]
    fn analytic_ratio_is_one_without_comm(layers in 1usize..32, f in 0.001f64..5.0) {
        let w = vec![longseq_plan::overlap::LayerWorkload::from_forward(f, 0.0, 2.0); layers];
        let t = simulate_backward(&w, BackwardPolicy::Selective, Link::Constant(1.0), SimSettings::default()).unwrap();
        let c = longseq_plan::overlap::compare_to_analytic(&t, &OverlapModel::new(1.0).unwrap(), 4);
        prop_assert!((c.ratio - 1.0).abs() < 1e-12);
    }
}

fn check_exclusive(t: &Timeline, stream: Stream) -> Result<(), TestCaseError> {
    let mut evs: Vec<_> = t.events.iter().filter(|e| e.stream == stream).collect();
    evs.sort_by(|a, b| a.start.total_cmp(&b.start));
    for pair in evs.windows(2) {
        prop_assert!(pair[0].end <= pair[1].start + 1e-12, "{:?} overlaps {:?}", pair[0], pair[1]);
    }
    Ok(())
}

#[test]
fn balanced_workload_ratio_tends_to_one_from_above() {
    let mut last = f64::INFINITY;
    for layers in [4, 16, 64] {
        let w = vec![longseq_plan::overlap::LayerWorkload::from_forward(1.0, 1.0, 2.0); layers];
        let w: Vec<_> = w.into_iter().map(|mut l| { l.reduce_scatter_bytes = 1.0; l }).collect();
        let t = simulate_backward(&w, BackwardPolicy::Selective, Link::Constant(1.0), SimSettings::default()).unwrap();
        let c = longseq_plan::overlap::compare_to_analytic(&t, &OverlapModel::new(1.0).unwrap(), layers);
        assert!(c.ratio >= 1.0);
        assert!(c.ratio < last);
        last = c.ratio;
    }
    assert!(last < 1.02, "{last}");
}

#[test]
fn comm_bound_ratio_near_one() {
    let w = vec![
        longseq_plan::overlap::LayerWorkload {
            forward: 0.01,
            grad_input: 0.01,
            grad_weight: 0.01,
            gather_bytes: 100.0,
            reduce_scatter_bytes: 100.0,
        };
        64
    ];
    let t = simulate_backward(&w, BackwardPolicy::Selective, Link::Constant(1.0), SimSettings::default()).unwrap();
    let c = longseq_plan::overlap::compare_to_analytic(&t, &OverlapModel::new(1.0).unwrap(), 8);
    assert!((c.ratio - 1.0).abs() < 1e-3, "{}", c.ratio);
}

fn random_trace_config(seed: u64) -> (ModelConfig, Plan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let hidden = [1024u64, 2048, 4096, 8192][rng.random_range(0..4)];
    let seq_len = [4096u64, 16384, 65536][rng.random_range(0..3)];
    let model = ModelConfig {
        hidden_dim: hidden,
        layers: rng.random_range(1..=24),
        heads: 32,
        vocab: 32000,
        seq_len,
        global_batch: seq_len * 64,
        bytes_per_element: 2,
    };
    let sp = [1u64, 2, 4, 8][rng.random_range(0..4)];
    let ps = [1u64, 2, 4, 8][rng.random_range(0..4)];
    let oss = [1u64, 2][rng.random_range(0..2)];
    let s = Plan {
        micro_batch: rng.random_range(1..=2),
        micro_batches: rng.random_range(1..=3),
        recompute: true,
        pp: [1u64, 2, 4][rng.random_range(0..3)],
        dp: 1,
        tp: if rng.random_bool(0.5) { sp } else { 1 },
        sp,
        ps,
        gs: if rng.random_bool(0.5) { oss } else { 1 },
        oss,
    };
    (model, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn allocator_conserves_bytes_and_tiles(seed in 0u64..100_000, pinned: bool, k in 0u64..5, premap: bool) {
        let (model, s) = random_trace_config(seed);
        let trace = synthesize_trace(&model, &s).unwrap();
        let policy = PoolPolicy { pinned_comm_pool: pinned, consolidate_every_k_mlp: k, grad_premap: premap };
        let r = run(&trace, policy, Some(40_000_000_000)).unwrap();
        for st in &r.steps {
            prop_assert_eq!(st.reserved, st.allocated + st.free_cached + st.fragmented);
            prop_assert!(st.allocated <= st.reserved);
        }
        prop_assert_eq!(r.final_stats().allocated, 0);
        prop_assert_eq!(&r, &run(&trace, policy, Some(40_000_000_000)).unwrap());
    }

    #[test]
    fn pinned_pool_is_isolated(seed in 0u64..100_000, k in 0u64..4) {
        let (model, s) = random_trace_config(seed);
        let s = Plan { ps: s.ps.max(2), ..s };
        let trace = synthesize_trace(&model, &s).unwrap();
        let policy = PoolPolicy { pinned_comm_pool: true, consolidate_every_k_mlp: k, grad_premap: false };
        let with_comm = run(&trace, policy, None).unwrap();
        let stripped = trace.without(Tag::CommBuffer);
        let without = run(&stripped, PoolPolicy { pinned_comm_pool: false, ..policy }, None).unwrap();
        let general: Vec<_> = trace
            .ops
            .iter()
            .zip(&with_comm.steps)
            .filter(|(op, _)| !matches!(op, TraceOp::Alloc { tag: Tag::CommBuffer, .. } | TraceOp::Free { tag: Tag::CommBuffer, .. }))
            .map(|(_, st)| *st)
            .collect();
        prop_assert_eq!(general, without.steps.clone());
        prop_assert_eq!(with_comm.peak_fragmented, without.peak_fragmented);
        prop_assert!(with_comm.pinned_reserved > 0);
    }

    #[test]
    fn consolidation_never_increases_peak_fragmentation(seed in 0u64..100_000) {
        let (model, s) = random_trace_config(seed);
        let trace = synthesize_trace(&model, &s).unwrap();
        let plain = run(&trace, PoolPolicy::NONE, None).unwrap();
        let policy = PoolPolicy { consolidate_every_k_mlp: PoolPolicy::DEFAULT_CONSOLIDATION, ..PoolPolicy::NONE };
        let consolidated = run(&trace, policy, None).unwrap();
        prop_assert!(consolidated.peak_fragmented <= plain.peak_fragmented,
            "{} > {}", consolidated.peak_fragmented, plain.peak_fragmented);
    }

    #[test]
    fn halving_tokens_halves_activation_requests(seed in 0u64..100_000) {
        let (model, s) = random_trace_config(seed);
        let doubled = Plan { sp: s.sp * 2, ..s };
        let a = longseq_plan::mempool::TraceSizes::new(&model, &s);
        let b = longseq_plan::mempool::TraceSizes::new(&model, &doubled);
        prop_assert_eq!(a.intermediate, 2 * b.intermediate);
        prop_assert_eq!(a.output, 2 * b.output);
    }
}

#[test]
fn partly_filled_output_segment_is_not_fragmented() {
    // one layer per stage: the output segment holds one output and room for two more
    let (model, s) = random_trace_config(48013);
    assert_eq!(s.stage_layers(&model), 1);
    let trace = synthesize_trace(&model, &s).unwrap();
    let plain = run(&trace, PoolPolicy::NONE, None).unwrap();
    let policy = PoolPolicy { consolidate_every_k_mlp: 3, ..PoolPolicy::NONE };
    let consolidated = run(&trace, policy, None).unwrap();
    let output = longseq_plan::mempool::TraceSizes::new(&model, &s).output;
    assert_eq!(consolidated.max_fragments_of(2 * output), 0);
    assert!(consolidated.peak_fragmented <= plain.peak_fragmented);
}
