// Parameter counts and unsharded memory for the built-in model presets.

use longseq_plan::model::Preset;

const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

fn run_example() -> longseq_plan::Result<()> {
    println!("{:<6}{:>16}{:>12}{:>12}{:>12}", "model", "params", "states GiB", "act GiB", "act+rc GiB");
    for preset in Preset::ALL {
        let model = preset.config(4096, 4096);
        model.validate()?;
        let plain = model.unsharded_footprint(1);
        let states = (plain.params_bytes + plain.grads_bytes + plain.optstate_bytes) as f64 / GIB;
        let recompute = longseq_plan::cost::memory(
            &longseq_plan::Strategy { recompute: true, ..longseq_plan::Strategy::serial() },
            &model,
        );
        println!(
            "{:<6}{:>16}{:>12.1}{:>12.1}{:>12.1}",
            preset.name(),
            model.total_param_count(),
            states,
            plain.act_bytes as f64 / GIB,
            recompute.act / GIB,
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
