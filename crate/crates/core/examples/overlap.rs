// Two-layer timelines: naive vs prefetching forward, fused vs selective
// backward, with the analytic overlap estimate alongside.

use longseq_plan::cost::OverlapModel;
use longseq_plan::overlap::{
    compare_to_analytic, simulate_backward, simulate_forward, BackwardPolicy, ForwardPolicy,
    LayerWorkload, Link, SimSettings,
};

fn run_example() -> longseq_plan::Result<()> {
    let layer = LayerWorkload {
        forward: 10.0,
        grad_input: 10.0,
        grad_weight: 10.0,
        gather_bytes: 10.0,
        reduce_scatter_bytes: 10.0,
    };
    let layers = vec![layer; 2];
    let link = Link::Constant(1.0);
    let settings = SimSettings::default();
    let analytic = OverlapModel::new(1.0)?;

    for policy in [ForwardPolicy::Naive, ForwardPolicy::InterLayerPrefetch] {
        let t = simulate_forward(&layers, policy, link, settings)?;
        println!("forward  {policy:?}: makespan {}", t.makespan);
    }
    for policy in [BackwardPolicy::Fused, BackwardPolicy::Selective] {
        let t = simulate_backward(&layers, policy, link, settings)?;
        let c = compare_to_analytic(&t, &analytic, 1);
        println!(
            "backward {policy:?}: makespan {}, exposed comm {}, analytic {} (ratio {:.2})",
            t.makespan,
            t.exposed_comm(),
            c.analytic,
            c.ratio
        );
    }

    let t = simulate_backward(&layers, BackwardPolicy::Selective, link, settings)?;
    println!("\nselective backward events:");
    t.write_csv(std::io::stdout())?;
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
