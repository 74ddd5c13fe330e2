// Caching-allocator fragmentation for 65B at 256K tokens, and what each pool
// policy does about it.

use longseq_plan::mempool::{run, synthesize_trace, PoolPolicy, MIB};
use longseq_plan::{Preset, Strategy};

fn run_example() -> longseq_plan::Result<()> {
    let model = Preset::B65.config(262_144, 262_144 * 8);
    let s = Strategy { recompute: true, dp: 8, sp: 16, ..Strategy::serial() };
    let trace = synthesize_trace(&model, &s)?;
    println!("{} trace operations", trace.ops.len());

    let policies = [
        ("best-fit", PoolPolicy::NONE),
        ("pinned comm pool", PoolPolicy { pinned_comm_pool: true, ..PoolPolicy::NONE }),
        ("consolidate k=3", PoolPolicy { consolidate_every_k_mlp: PoolPolicy::DEFAULT_CONSOLIDATION, ..PoolPolicy::NONE }),
        ("grad premap", PoolPolicy { grad_premap: true, ..PoolPolicy::NONE }),
        (
            "all three",
            PoolPolicy { pinned_comm_pool: true, consolidate_every_k_mlp: PoolPolicy::DEFAULT_CONSOLIDATION, grad_premap: true },
        ),
    ];
    for (name, policy) in policies {
        let r = run(&trace, policy, Some(80_000_000_000))?;
        let sizes: Vec<String> = r
            .fragment_sizes
            .iter()
            .map(|(size, count)| format!("{}MiB x{count}", size / MIB))
            .collect();
        println!(
            "{name:<18} reserved {:>7} MiB  fragmented {:>6} MiB  {}",
            r.peak_reserved / MIB,
            r.peak_fragmented / MIB,
            if sizes.is_empty() { "no fragments".to_string() } else { sizes.join(", ") }
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
