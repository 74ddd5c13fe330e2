// Load a run configuration from TOML, apply command-line style overrides and
// check a strategy against it.

use std::path::Path;

use longseq_plan::config::{parse_config, Overrides};
use longseq_plan::{validate, Strategy};

const RUN: &str = r#"
[model]
preset = "13b"

[cluster]
total_gpus = 32
gpus_per_node = 8
gpu_memory_capacity_bytes = 80000000000

[search]
top_k = 3
"#;

fn run_example() -> longseq_plan::Result<()> {
    let overrides = Overrides { seq_len: Some(32_768), global_batch: Some(1_048_576), ..Overrides::default() };
    let cfg = parse_config(RUN, Path::new("inline.toml"), Path::new("."), &overrides)?;
    println!(
        "model H={} L={} heads={} S={} B={}",
        cfg.model.hidden_dim, cfg.model.layers, cfg.model.heads, cfg.model.seq_len, cfg.model.global_batch
    );
    println!("cluster {} GPUs, {} per node", cfg.cluster.total_gpus, cfg.cluster.gpus_per_node);

    let good = Strategy { micro_batches: 4, dp: 8, sp: 4, ps: 8, recompute: true, ..Strategy::serial() };
    let bad = Strategy { tp: 2, ..good };
    for s in [good, bad] {
        let verdict = validate(&s, &cfg.model, &cfg.cluster);
        if verdict.is_feasible() {
            println!("{s}: feasible");
        } else {
            for v in &verdict.violations {
                println!("{s}: {} ({})", v.constraint, v.detail);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
