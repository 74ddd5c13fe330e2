// Cost breakdown for one hand-picked plan: 7B at 256K tokens on 64 GPUs.

use longseq_plan::{
    validate, BandwidthProfile, ClusterConfig, ComputeModel, Estimator, EstimatorSettings, Preset,
    Strategy,
};

fn run_example() -> longseq_plan::Result<()> {
    let model = Preset::B7.config(262_144, 524_288);
    let cluster = ClusterConfig::new(64, 8, 80_000_000_000);
    let profile = BandwidthProfile::synthetic_a100();
    let compute = ComputeModel::a100();
    let s = Strategy { recompute: true, dp: 2, sp: 32, ps: 4, oss: 2, ..Strategy::serial() };

    let verdict = validate(&s, &model, &cluster);
    assert!(verdict.is_feasible(), "{verdict:?}");

    let est = Estimator::new(&model, &cluster, &profile, &compute, EstimatorSettings::default());
    let cost = est.step_time(&s)?;
    let tput = est.throughput(&cost);
    let gb = |v: f64| v / 1e9;

    println!("plan {s}");
    println!("memory (GB): params {:.2}, grads {:.2}, optstate {:.2}, act {:.2}, other {:.2}, total {:.2}",
        gb(cost.mem_params), gb(cost.mem_grads), gb(cost.mem_optstate), gb(cost.mem_act),
        gb(cost.mem_other), gb(cost.mem_total()));
    println!("per layer (ms): compute {:.3}, act comm {:.3}, param comm {:.3}, overlapped {:.3}",
        cost.t_comp_per_layer * 1e3, cost.t_comm_act * 1e3, cost.t_comm_param * 1e3,
        cost.t_layer_overlapped * 1e3);
    println!("step (s): fwd+bwd {:.3}, update {:.3}, total {:.3}", cost.t_fwd_bwd, cost.t_update, cost.t_step);
    println!("throughput: {:.1} tokens/GPU/s, MFU {:.1}%", tput.tgs, tput.mfu * 100.0);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
