// Search the plan space for a 7B model on 64 GPUs and print the top five.

use longseq_plan::{search, BandwidthProfile, ClusterConfig, ComputeModel, Preset, SearchOptions};

fn run_example() -> longseq_plan::Result<()> {
    let model = Preset::B7.config(65_536, 4_194_304);
    let cluster = ClusterConfig::new(64, 8, 80_000_000_000);
    let opts = SearchOptions { top_k: 5, ..SearchOptions::default() };
    let report = search(&model, &cluster, &BandwidthProfile::synthetic_a100(), &ComputeModel::a100(), &opts)?;

    println!(
        "{} candidates, {} rejected by constraints, {} over memory, {} feasible",
        report.stats.candidates, report.stats.constraint_rejected, report.stats.pruned, report.stats.feasible
    );
    for (rank, p) in report.plans.iter().enumerate() {
        println!(
            "#{rank} {:<48} t_step {:>8.3}s  mem {:>6.1}GB  MFU {:>5.1}%",
            p.strategy.to_string(),
            p.cost.t_step,
            p.cost.mem_total() / 1e9,
            p.throughput.mfu * 100.0
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
